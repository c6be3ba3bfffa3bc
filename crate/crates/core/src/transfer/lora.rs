use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::data::Example;
use crate::error::{PktError, Result};
use crate::extraction::SeekingBlock;
use crate::model::{loss_graph, ParamVars, TrainOptions, TrainReport, TransformerParams, WeightKind};
use crate::numerics::{matmul, svd, truncate_svd, AdamW, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraInit {
    Seeking,
    Pissa,
    Random,
}

impl LoraInit {
    pub fn name(self) -> &'static str {
        match self {
            LoraInit::Seeking => "seeking",
            LoraInit::Pissa => "pissa",
            LoraInit::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LoraInit::Seeking, LoraInit::Pissa, LoraInit::Random].into_iter().find(|m| m.name() == s)
    }
}

const RANDOM_A_STD: f64 = 0.02;

/// Adapter factors and the base matrix they sit on: `(base, B, A)`.
///
/// * seeking: `(B, A) = truncate_svd(W_extract, r)`, base `W − W_extract`
/// * pissa: `B = U_r·√σ_r`, `A = √σ_r·V_rᵀ`, base `W − B·A`
/// * random: `A ~ N(0, 0.02²)`, `B = 0`, base `W`
pub fn lora_init<T: Real, R: rand::Rng>(
    method: LoraInit,
    w: &Tensor<T>,
    w_extract: Option<&Tensor<T>>,
    r: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, m) = (w.rows(), w.cols());
    let k = n.min(m);
    if r == 0 || r > k {
        return Err(PktError::Rank { rank: r, max: k });
    }
    match method {
        LoraInit::Seeking => {
            let we = w_extract.ok_or_else(|| PktError::Plan("seeking init needs an extracted matrix".into()))?;
            if we.shape() != w.shape() {
                return Err(PktError::shape(
                    "lora_init",
                    format!("extracted {:?} vs target {:?}", we.shape(), w.shape()),
                ));
            }
            let (b, a) = truncate_svd(&svd(we)?, r)?;
            Ok((w.sub(we)?, b, a))
        }
        LoraInit::Pissa => {
            let s = svd(w)?;
            let root: Vec<T> = s.sigma[..r].iter().map(|v| v.sqrt()).collect();
            let b = Tensor::from_fn(n, r, |i, j| s.u.get(i, j) * root[j]);
            let a = Tensor::from_fn(r, m, |i, j| root[i] * s.v.get(j, i));
            let base = w.sub(&matmul(&b, &a)?)?;
            Ok((base, b, a))
        }
        LoraInit::Random => {
            let a = Tensor::randn(&[r, m], RANDOM_A_STD, rng);
            Ok((w.clone(), Tensor::zeros(&[n, r]), a))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactor<T = f32> {
    pub layer: usize,
    pub kind: WeightKind,
    /// `out × r`
    pub b: Tensor<T>,
    /// `r × in`
    pub a: Tensor<T>,
}

impl<T: Real> LoraFactor<T> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn product(&self) -> Tensor<T> {
        matmul(&self.b, &self.a).expect("factor shapes agree")
    }

    fn names(&self) -> (String, String) {
        let p = format!("lora.{}.{}", self.layer, self.kind.name());
        (format!("{p}.b"), format!("{p}.a"))
    }
}

/// Frozen base model with one adapter on each up/down/v/o matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModel<T = f32> {
    pub base: TransformerParams<T>,
    pub factors: Vec<LoraFactor<T>>,
    pub init: LoraInit,
    pub rank: usize,
}

impl<T: Real> LoraModel<T> {
    /// `W_base + B·A` for every adapted matrix.
    pub fn merged(&self) -> TransformerParams<T> {
        let mut p = self.base.clone();
        for f in &self.factors {
            let w = p.layers[f.layer].get_mut(f.kind);
            *w = w.add(&f.product()).expect("adapter matches base");
        }
        p
    }

    pub fn factor(&self, layer: usize, kind: WeightKind) -> Option<&LoraFactor<T>> {
        self.factors.iter().find(|f| f.layer == layer && f.kind == kind)
    }

    /// Records the adapter-form forward weights: base constants plus `B·A`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<ParamVars> {
        let mut pv = ParamVars::bind(&self.base, tape, false);
        for f in &self.factors {
            let (nb, na) = f.names();
            let b = tape.param(nb, f.b.clone());
            let a = tape.param(na, f.a.clone());
            let ba = tape.matmul(b, a)?;
            let lv = &mut pv.layers[f.layer];
            let slot = match f.kind {
                WeightKind::Up => &mut lv.w_up,
                WeightKind::Down => &mut lv.w_down,
                WeightKind::V => &mut lv.wv,
                WeightKind::O => &mut lv.wo,
            };
            *slot = tape.add(*slot, ba)?;
        }
        Ok(pv)
    }

    fn named_factors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for f in self.factors.iter_mut() {
            let (nb, na) = f.names();
            out.push((nb, &mut f.b));
            out.push((na, &mut f.a));
        }
        out
    }
}

impl LoraModel<f32> {
    pub fn to_container(&self, provenance: serde_json::Value) -> Container {
        let mut c = Container::new(json!({
            "kind": "lora",
            "init": self.init,
            "rank": self.rank,
            "config": self.base.config,
            "provenance": provenance,
        }));
        for f in &self.factors {
            let p = format!("lora/{}/{}", f.layer, f.kind.name());
            c.push(format!("{p}/b"), f.b.clone());
            c.push(format!("{p}/a"), f.a.clone());
            c.push(format!("{p}/base"), self.base.layers[f.layer].get(f.kind).clone());
        }
        c
    }

    /// Rebuilds the adapter model on top of the small model it was attached to.
    pub fn from_container(c: &Container, small: &TransformerParams<f32>) -> Result<Self> {
        let init: LoraInit = serde_json::from_value(c.metadata.get("init").cloned().unwrap_or_default())
            .map_err(|e| PktError::container("metadata.init", e.to_string()))?;
        let rank = c
            .metadata
            .get("rank")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| PktError::container("metadata.rank", "missing"))? as usize;
        let mut base = small.clone();
        let mut factors = Vec::new();
        for l in 0..small.config.layers {
            for kind in WeightKind::ALL {
                let p = format!("lora/{l}/{}", kind.name());
                let b = c.require(&format!("{p}/b"))?.clone();
                let a = c.require(&format!("{p}/a"))?.clone();
                let w = c.require(&format!("{p}/base"))?.clone();
                if w.shape() != small.layers[l].get(kind).shape() {
                    return Err(PktError::container(format!("{p}/base"), "shape differs from the small model"));
                }
                *base.layers[l].get_mut(kind) = w;
                factors.push(LoraFactor { layer: l, kind, b, a });
            }
        }
        Ok(LoraModel { base, factors, init, rank })
    }
}

/// Adapters of rank `r` on up/down/v/o of every layer of `small`.
/// Seeking needs one extracted block per adapted matrix.
pub fn attach_lora<T: Real>(
    small: &TransformerParams<T>,
    method: LoraInit,
    r: usize,
    seeking: Option<&[SeekingBlock<T>]>,
    seed: u64,
) -> Result<LoraModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = small.clone();
    let mut factors = Vec::new();
    for l in 0..small.config.layers {
        for kind in WeightKind::ALL {
            let w_extract = match method {
                LoraInit::Seeking => {
                    let blocks = seeking.ok_or_else(|| PktError::Plan("seeking init needs extracted blocks".into()))?;
                    let b = blocks
                        .iter()
                        .find(|b| b.target_layer == l && b.kind == kind)
                        .ok_or_else(|| PktError::Plan(format!("no extracted block for layer {l} {}", kind.name())))?;
                    Some(&b.sub.extract)
                }
                _ => None,
            };
            let (w_base, b, a) = lora_init(method, small.layers[l].get(kind), w_extract, r, &mut rng)?;
            *base.layers[l].get_mut(kind) = w_base;
            factors.push(LoraFactor { layer: l, kind, b, a });
        }
    }
    Ok(LoraModel { base, factors, init: method, rank: r })
}

/// Trains only the adapter factors; the base stays frozen.
pub fn lora_finetune<T: Real>(
    model: &mut LoraModel<T>,
    train_set: &[Example],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(PktError::Data("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(PktError::Data("batch size must be positive".into()));
    }
    for f in &model.factors {
        let w = model.base.layers[f.layer].get(f.kind);
        if f.b.rows() != w.rows() || f.a.cols() != w.cols() || f.b.cols() != f.a.rows() {
            return Err(PktError::shape(
                "lora_finetune",
                format!("adapter {:?}·{:?} on base {:?}", f.b.shape(), f.a.shape(), w.shape()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.lr, opts.weight_decay);
    opt.beta2 = opts.beta2;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let total = opts.total_steps(train_set.len());
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let mut tape = Tape::new();
            let pv = model.bind(&mut tape)?;
            let loss = loss_graph(&mut tape, &model.base.config, &pv, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(PktError::NonFinite("fine-tuning loss"));
            }
            report.loss_curve.push(value.as_f64());
            let grads = tape.backward(loss)?;
            drop(tape);
            opt.lr = opts.lr_at(report.steps, total);
            opt.step(model.named_factors_mut(), &grads);
            report.steps += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> TransformerParams<f32> {
        let cfg = ModelConfig { layers: 2, d_model: 8, n_ffn: 16, heads: 2, vocab: 12, max_len: 4, seed: 4 };
        TransformerParams::init(cfg).unwrap()
    }

    #[test]
    fn finetune_moves_only_the_adapters() {
        let s = small();
        let data: Vec<Example> = (0..6).map(|i| Example { prompt: vec![i, 10, 11], answer: (i + 1) % 12 }).collect();
        let mut m = attach_lora(&s, LoraInit::Pissa, 2, None, 0).unwrap();
        let (base, factors) = (m.base.checksum(), m.factors.clone());
        let opts = TrainOptions { epochs: 2, batch_size: 3, lr: 1e-2, warmup: 0, ..TrainOptions::default() };
        lora_finetune(&mut m, &data, &opts).unwrap();
        assert_eq!(m.base.checksum(), base);
        assert_ne!(m.factors, factors);
        assert_eq!(m.factors.len(), 2 * WeightKind::ALL.len());
    }

    #[test]
    fn seeking_without_blocks_is_a_plan_error() {
        assert!(matches!(attach_lora(&small(), LoraInit::Seeking, 2, None, 0), Err(PktError::Plan(_))));
    }

    #[test]
    fn container_round_trip() {
        let s = small();
        let m = attach_lora(&s, LoraInit::Random, 3, None, 9).unwrap();
        let back = LoraModel::from_container(&m.to_container(serde_json::json!({})), &s).unwrap();
        assert_eq!(back, m);
    }
}
