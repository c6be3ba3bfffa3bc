use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PktError, Result};

use super::corpus::{Corpus, Fact};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub extract: usize,
    pub align: usize,
    pub train: usize,
    pub eval: usize,
    pub large_only: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { extract: 32, align: 80, train: 1000, eval: 200, large_only: 200, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Extract,
    Align,
    Train,
    Eval,
    LargeOnly,
    /// Base-form fact outside the eval split.
    General,
    /// Alias-form fact outside every named split.
    Task,
}

impl SplitTag {
    pub const ALL: [SplitTag; 7] = [
        SplitTag::Extract,
        SplitTag::Align,
        SplitTag::Train,
        SplitTag::Eval,
        SplitTag::LargeOnly,
        SplitTag::General,
        SplitTag::Task,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Extract => "extract",
            SplitTag::Align => "align",
            SplitTag::Train => "train",
            SplitTag::Eval => "eval",
            SplitTag::LargeOnly => "large_only",
            SplitTag::General => "general",
            SplitTag::Task => "task",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Task splits are alias-form facts; `eval` is base-form general knowledge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub seed: u64,
    pub extract: Vec<Fact>,
    pub align: Vec<Fact>,
    pub train: Vec<Fact>,
    pub eval: Vec<Fact>,
    pub large_only: Vec<Fact>,
    pub general_rest: Vec<Fact>,
    pub task_rest: Vec<Fact>,
}

impl Splits {
    pub fn get(&self, tag: SplitTag) -> &[Fact] {
        match tag {
            SplitTag::Extract => &self.extract,
            SplitTag::Align => &self.align,
            SplitTag::Train => &self.train,
            SplitTag::Eval => &self.eval,
            SplitTag::LargeOnly => &self.large_only,
            SplitTag::General => &self.general_rest,
            SplitTag::Task => &self.task_rest,
        }
    }

    /// Every fact with its tag, in the corpus's own order.
    pub fn tagged(&self, corpus: &Corpus) -> Vec<(SplitTag, Fact)> {
        let lookup: std::collections::HashMap<Fact, SplitTag> =
            SplitTag::ALL.iter().flat_map(|&t| self.get(t).iter().map(move |f| (*f, t))).collect();
        corpus.general.iter().chain(&corpus.task).map(|f| (lookup[f], *f)).collect()
    }

    /// Regroups tagged facts, keeping their order within each split.
    pub fn from_tagged(seed: u64, tagged: &[(SplitTag, Fact)]) -> Self {
        let mut s = Splits {
            seed,
            extract: Vec::new(),
            align: Vec::new(),
            train: Vec::new(),
            eval: Vec::new(),
            large_only: Vec::new(),
            general_rest: Vec::new(),
            task_rest: Vec::new(),
        };
        for &(tag, f) in tagged {
            match tag {
                SplitTag::Extract => s.extract.push(f),
                SplitTag::Align => s.align.push(f),
                SplitTag::Train => s.train.push(f),
                SplitTag::Eval => s.eval.push(f),
                SplitTag::LargeOnly => s.large_only.push(f),
                SplitTag::General => s.general_rest.push(f),
                SplitTag::Task => s.task_rest.push(f),
            }
        }
        s
    }

    /// Everything: both fact forms.
    pub fn large_training_set(&self) -> Vec<Fact> {
        let mut v = self.general_knowledge();
        for t in [SplitTag::Extract, SplitTag::Align, SplitTag::Train, SplitTag::LargeOnly, SplitTag::Task] {
            v.extend_from_slice(self.get(t));
        }
        v
    }

    /// Base-form facts only; no alias fact, and so no large-only fact.
    pub fn small_training_set(&self) -> Vec<Fact> {
        self.general_knowledge()
    }

    fn general_knowledge(&self) -> Vec<Fact> {
        let mut v = self.eval.clone();
        v.extend_from_slice(&self.general_rest);
        v
    }
}

pub fn make_splits(corpus: &Corpus, spec: &SplitSpec) -> Result<Splits> {
    let task_need = spec.extract + spec.align + spec.train + spec.large_only;
    if task_need > corpus.task.len() || spec.eval > corpus.general.len() {
        return Err(PktError::Data(format!(
            "world holds {} facts per form; splits need {task_need} task and {} eval",
            corpus.task.len(),
            spec.eval
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut task = corpus.task.clone();
    task.shuffle(&mut rng);
    let mut general = corpus.general.clone();
    general.shuffle(&mut rng);

    let mut rest = task.into_iter();
    let mut take = |n: usize| -> Vec<Fact> { rest.by_ref().take(n).collect() };
    let extract = take(spec.extract);
    let align = take(spec.align);
    let train = take(spec.train);
    let large_only = take(spec.large_only);
    let task_rest = take(usize::MAX);
    let general_rest = general.split_off(spec.eval);

    let splits = Splits { seed: spec.seed, extract, align, train, eval: general, large_only, general_rest, task_rest };
    let mut seen = HashSet::new();
    for t in SplitTag::ALL {
        for f in splits.get(t) {
            assert!(seen.insert(*f), "split overlap on {f:?}");
        }
    }
    Ok(splits)
}
