#![allow(dead_code)]

use pktlab::data::{examples, gen_corpus, make_splits, Example, SplitSpec, Splits, Vocab, WorldSpec};
use pktlab::model::{train, ModelConfig, TrainOptions, TransformerParams};
use pktlab::Result;

pub struct Pair {
    pub vocab: Vocab,
    pub splits: Splits,
    pub large: TransformerParams<f32>,
    pub small: TransformerParams<f32>,
}

pub fn world() -> WorldSpec {
    WorldSpec { n_entities: 48, n_relations: 4, n_values: 60 }
}

pub fn split_spec(seed: u64) -> SplitSpec {
    SplitSpec { extract: 8, align: 16, train: 48, eval: 40, large_only: 40, seed }
}

/// A large/small pair small enough to train in a few seconds.
pub fn trained_pair(seed: u64) -> Result<Pair> {
    let corpus = gen_corpus(seed, &world())?;
    let splits = make_splits(&corpus, &split_spec(seed))?;
    let vocab = corpus.vocab();
    let shape = |layers, d_model, n_ffn, seed| ModelConfig {
        layers,
        d_model,
        n_ffn,
        heads: 2,
        vocab: vocab.size(),
        max_len: 8,
        seed,
    };
    let opts = |epochs| TrainOptions { epochs, lr: 3e-3, batch_size: 16, warmup: 20, seed, ..TrainOptions::default() };

    let mut large = TransformerParams::init(shape(3, 32, 64, seed * 2 + 1))?;
    train(&mut large, &examples(&splits.large_training_set(), &vocab), &opts(60))?;
    let mut small = TransformerParams::init(shape(2, 16, 32, seed * 2 + 2))?;
    train(&mut small, &examples(&splits.small_training_set(), &vocab), &opts(80))?;
    Ok(Pair { vocab, splits, large, small })
}

impl Pair {
    pub fn set(&self, facts: &[pktlab::data::Fact]) -> Vec<Example> {
        examples(facts, &self.vocab)
    }
}
