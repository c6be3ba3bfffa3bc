use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{PktError, Result};
use crate::numerics::{AdamW, Real, Tape};

use super::forward::{loss_graph, ParamVars};
use super::params::TransformerParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Linear warmup steps; zero keeps the rate constant throughout.
    pub warmup: usize,
    /// Cosine decay to zero over the whole run after warmup.
    pub cosine: bool,
    pub beta2: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            lr: 3e-3,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            warmup: 100,
            cosine: true,
            beta2: 0.95,
        }
    }
}

impl TrainOptions {
    /// Learning rate of optimizer step `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = total.saturating_sub(self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * examples.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

/// Full-parameter AdamW training on answer-position cross-entropy.
pub fn train<T: Real>(params: &mut TransformerParams<T>, data: &[Example], opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(PktError::Data("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(PktError::Data("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.lr, opts.weight_decay);
    opt.beta2 = opts.beta2;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let total = opts.total_steps(data.len());
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
            let mut tape = Tape::new();
            let pv = ParamVars::bind(params, &mut tape, true);
            let loss = loss_graph(&mut tape, &params.config, &pv, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(PktError::NonFinite("training loss"));
            }
            report.loss_curve.push(value.as_f64());
            let grads = tape.backward(loss)?;
            drop(tape);
            opt.lr = opts.lr_at(report.steps, total);
            opt.step(params.named_mut(), &grads);
            report.steps += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, ModelConfig};

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let o = TrainOptions { lr: 1.0, warmup: 4, ..TrainOptions::default() };
        assert_eq!(o.lr_at(0, 20), 0.25);
        assert_eq!(o.lr_at(3, 20), 1.0);
        assert_eq!(o.lr_at(4, 20), 1.0);
        assert!(o.lr_at(12, 20) < 0.5 + 1e-12 && o.lr_at(12, 20) > 0.49);
        assert!(o.lr_at(19, 20) < 0.01);
        let flat = TrainOptions { lr: 0.5, warmup: 0, cosine: false, ..o };
        assert_eq!(flat.lr_at(17, 20), 0.5);
        assert_eq!(TrainOptions { epochs: 3, batch_size: 4, ..o }.total_steps(9), 9);
    }

    fn toy() -> (TransformerParams<f32>, Vec<Example>) {
        let cfg = ModelConfig { layers: 1, d_model: 16, n_ffn: 32, heads: 2, vocab: 12, max_len: 4, seed: 1 };
        let data = (0..6).map(|i| Example { prompt: vec![i, 10, 11], answer: (i * 5 + 1) % 12 }).collect();
        (TransformerParams::init(cfg).unwrap(), data)
    }

    #[test]
    fn memorizes_a_tiny_table() {
        let (mut p, data) = toy();
        let opts = TrainOptions { epochs: 200, lr: 1e-2, batch_size: 6, warmup: 10, ..TrainOptions::default() };
        let r = train(&mut p, &data, &opts).unwrap();
        assert_eq!(r.steps, 200);
        assert!(r.loss_curve[199] < r.loss_curve[0] * 0.1);
        assert_eq!(accuracy(&p, &data).unwrap(), 1.0);
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let (p0, data) = toy();
        let opts = TrainOptions { epochs: 3, batch_size: 4, warmup: 2, ..TrainOptions::default() };
        let (mut a, mut b) = (p0.clone(), p0);
        train(&mut a, &data, &opts).unwrap();
        train(&mut b, &data, &opts).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn rejects_empty_input() {
        let (mut p, _) = toy();
        assert!(train(&mut p, &[], &TrainOptions::default()).is_err());
    }
}
