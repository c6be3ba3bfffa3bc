use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PktError, Result};

use super::splits::{SplitTag, Splits};
use super::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub entity: u32,
    /// `< n_relations` for base form, `>= n_relations` for alias form.
    pub relation: u32,
    pub value: u32,
}

impl Fact {
    pub fn render(&self) -> String {
        format!("e{} r{} = v{}", self.entity, self.relation, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_values: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec { n_entities: 200, n_relations: 8, n_values: 380 }
    }
}

/// Base-form facts plus their alias-form twins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub seed: u64,
    pub spec: WorldSpec,
    /// One fact per `(entity, base relation)`, entity-major.
    pub general: Vec<Fact>,
    /// Alias-form twin of every general fact, same order.
    pub task: Vec<Fact>,
}

impl Corpus {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(&self.spec)
    }
}

pub fn gen_corpus(seed: u64, spec: &WorldSpec) -> Result<Corpus> {
    if spec.n_entities == 0 || spec.n_relations == 0 || spec.n_values == 0 {
        return Err(PktError::Data(format!("empty world {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.n_relations as u32;
    let mut general = Vec::with_capacity(spec.n_entities * spec.n_relations);
    for e in 0..spec.n_entities as u32 {
        for j in 0..r {
            general.push(Fact { entity: e, relation: j, value: rng.gen_range(0..spec.n_values as u32) });
        }
    }
    let task = general.iter().map(|f| Fact { relation: f.relation + r, ..*f }).collect();
    Ok(Corpus { seed, spec: *spec, general, task })
}

/// Writes every fact once, tagged with its split.
pub fn write_corpus_file(path: &Path, corpus: &Corpus, splits: &Splits) -> Result<()> {
    let vocab = corpus.vocab();
    let mut out = String::new();
    let s = corpus.spec;
    writeln!(
        out,
        "# seed={} entities={} relations={} values={} split_seed={}",
        corpus.seed, s.n_entities, s.n_relations, s.n_values, splits.seed
    )
    .unwrap();
    for (tag, fact) in splits.tagged(corpus) {
        let prompt = vocab.detokenize(&vocab.prompt(&fact))?;
        let answer = vocab.symbol(vocab.answer(&fact))?;
        writeln!(out, "{}\t{}\t{}", tag.name(), prompt, answer).unwrap();
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a corpus file back into tagged facts and its world description.
pub fn read_corpus_file(path: &Path) -> Result<(WorldSpec, Vec<(SplitTag, Fact)>)> {
    if !path.exists() {
        return Err(PktError::Dependency(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| PktError::Data("corpus file lacks header".into()))?;
    let field = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PktError::Data(format!("corpus header missing `{key}`")))
    };
    let spec =
        WorldSpec { n_entities: field("entities")?, n_relations: field("relations")?, n_values: field("values")? };
    let vocab = Vocab::new(&spec);
    let mut facts = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| PktError::Data(format!("corpus line {}: {what}", i + 2));
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        let tag = SplitTag::parse(parts[0]).ok_or_else(|| bad("unknown split tag"))?;
        let prompt = vocab.tokenize(parts[1])?;
        if prompt.len() != 3 || prompt[2] != super::vocab::EQUALS {
            return Err(bad("prompt must be `e<i> r<j> =`"));
        }
        let e = vocab.symbol(prompt[0])?;
        let r = vocab.symbol(prompt[1])?;
        let v = parts[2];
        let num = |s: &str, p: char| s.strip_prefix(p).and_then(|n| n.parse::<u32>().ok());
        let (entity, relation, value) = match (num(&e, 'e'), num(&r, 'r'), num(v, 'v')) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(bad("malformed symbols")),
        };
        vocab.token(v)?;
        facts.push((tag, Fact { entity, relation, value }));
    }
    Ok((spec, facts))
}
