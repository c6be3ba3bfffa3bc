//! Synthetic factual-recall world.
//!
//! Every `(entity, relation)` pair has one value drawn uniformly at random.
//! Each base relation `r<j>` also has an alias relation `r<j+R>` that asks
//! for the same value. Base-form facts are general knowledge shared by both
//! models; alias-form facts are the transfer task, known only to the large
//! model. A model that knows base facts can answer alias facts once it
//! learns which base relation each alias stands for, so task knowledge is
//! learnable from a training split and testable on held-out pairs.

mod corpus;
mod splits;
mod vocab;

pub use corpus::{gen_corpus, read_corpus_file, write_corpus_file, Corpus, Fact, WorldSpec};
pub use splits::{make_splits, SplitSpec, SplitTag, Splits};
pub use vocab::Vocab;

/// One prompt/answer pair in token space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub answer: u32,
}

impl Example {
    pub fn from_fact(fact: &Fact, vocab: &Vocab) -> Self {
        Example { prompt: vocab.prompt(fact), answer: vocab.answer(fact) }
    }
}

pub fn examples(facts: &[Fact], vocab: &Vocab) -> Vec<Example> {
    facts.iter().map(|f| Example::from_fact(f, vocab)).collect()
}
