//! Generates the synthetic fact world, splits it and writes the corpus file.

use pktlab::data::{gen_corpus, make_splits, read_corpus_file, write_corpus_file, SplitSpec, SplitTag, WorldSpec};

fn main() -> pktlab::Result<()> {
    let spec = WorldSpec::default();
    let corpus = gen_corpus(0, &spec)?;
    let splits = make_splits(&corpus, &SplitSpec::default())?;
    let vocab = corpus.vocab();
    println!("{} general facts, {} alias facts, vocabulary {}", corpus.general.len(), corpus.task.len(), vocab.size());

    for f in corpus.general.iter().take(2).chain(corpus.task.iter().take(2)) {
        println!("  {:<16} -> prompt {:?} answer {}", f.render(), vocab.prompt(f), vocab.answer(f));
    }
    for tag in SplitTag::ALL {
        println!("  {:<11} {}", tag.name(), splits.get(tag).len());
    }

    let path = std::env::temp_dir().join("pktlab-world.tsv");
    write_corpus_file(&path, &corpus, &splits)?;
    let (back, tagged) = read_corpus_file(&path)?;
    assert_eq!(back, spec);
    println!("wrote {} tagged facts to {}", tagged.len(), path.display());
    Ok(())
}
