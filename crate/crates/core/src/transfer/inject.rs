use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{top_neurons, NeuronKind, ScoreMatrices};
use crate::container::Container;
use crate::error::{PktError, Result};
use crate::extraction::{DeltaBlock, ExtractedDelta};
use crate::model::{ModelConfig, TransformerParams};
use crate::numerics::{Real, Tensor};

/// Which target neurons receive each extracted source neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPairing {
    /// i-th ranked source neuron → i-th ranked target neuron (target attribution).
    #[default]
    RankMatched,
    /// Source index `k` → `⌊k·W_t/W_s⌋`, bumped forward past collisions.
    IndexOrder,
}

/// Target slot for each row of `block`, in row order.
pub fn target_slots<T: Real>(
    block: &DeltaBlock<T>,
    pairing: SlotPairing,
    target: &ModelConfig,
    source_width: usize,
    target_scores: Option<&ScoreMatrices>,
) -> Result<Vec<usize>> {
    let width = match block.kind {
        NeuronKind::Ffn => target.n_ffn,
        NeuronKind::Mhsa => target.d_model,
    };
    let c = block.indices.len();
    if c > width {
        return Err(PktError::Dimension(format!("{c} neurons into width {width}")));
    }
    match pairing {
        SlotPairing::RankMatched => {
            let s = target_scores
                .ok_or_else(|| PktError::Plan("rank-matched pairing needs target score matrices".into()))?;
            let ranked = top_neurons(s.get(block.kind), block.target_layer, c)?;
            Ok(block.ranks.iter().map(|&r| ranked[r]).collect())
        }
        SlotPairing::IndexOrder => {
            let mut used = vec![false; width];
            let mut out = Vec::with_capacity(c);
            for &k in &block.indices {
                let mut t = (k * width / source_width.max(1)).min(width - 1);
                while used[t] {
                    t = (t + 1) % width;
                }
                used[t] = true;
                out.push(t);
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedBlock<T = f32> {
    pub target_layer: usize,
    pub kind: NeuronKind,
    pub slots: Vec<usize>,
    /// Added to rows `slots` of `W_up` (FFN) or `W_v` (MHSA).
    pub key: Tensor<T>,
    /// Added to columns `slots` of `W_down` (FFN) or `W_o` (MHSA).
    pub value: Tensor<T>,
}

/// Target-width delta ready for additive injection.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedDelta<T = f32> {
    pub blocks: Vec<AlignedBlock<T>>,
}

impl<T: Real> AlignedDelta<T> {
    /// Pairs an already target-width extraction with its target slots.
    pub fn from_extracted(
        delta: &ExtractedDelta<T>,
        pairing: SlotPairing,
        target: &ModelConfig,
        source: &ModelConfig,
        target_scores: Option<&ScoreMatrices>,
    ) -> Result<Self> {
        let blocks = delta
            .blocks
            .iter()
            .map(|b| {
                let source_width = match b.kind {
                    NeuronKind::Ffn => source.n_ffn,
                    NeuronKind::Mhsa => source.d_model,
                };
                Ok(AlignedBlock {
                    target_layer: b.target_layer,
                    kind: b.kind,
                    slots: target_slots(b, pairing, target, source_width, target_scores)?,
                    key: b.key.clone(),
                    value: b.value.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(AlignedDelta { blocks })
    }

    pub fn values(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.key.data().iter().chain(b.value.data()).map(|v| v.as_f64())).collect()
    }

    pub fn negate(&self) -> Self {
        AlignedDelta {
            blocks: self
                .blocks
                .iter()
                .map(|b| AlignedBlock { key: b.key.scale(-T::one()), value: b.value.scale(-T::one()), ..b.clone() })
                .collect(),
        }
    }
}

impl AlignedDelta<f32> {
    pub fn to_container(&self, provenance: serde_json::Value) -> Container {
        let index: Vec<_> = self
            .blocks
            .iter()
            .map(|b| json!({"target_layer": b.target_layer, "kind": b.kind, "slots": b.slots}))
            .collect();
        let mut c = Container::new(json!({"kind": "aligned_delta", "blocks": index, "provenance": provenance}));
        for b in &self.blocks {
            let prefix = format!("aligned/{}/{}", b.target_layer, b.kind.name());
            c.push(format!("{prefix}/key"), b.key.clone());
            c.push(format!("{prefix}/value"), b.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            target_layer: usize,
            kind: NeuronKind,
            slots: Vec<usize>,
        }
        let entries: Vec<Entry> = serde_json::from_value(
            c.metadata.get("blocks").cloned().ok_or_else(|| PktError::container("metadata.blocks", "missing"))?,
        )
        .map_err(|e| PktError::container("metadata.blocks", e.to_string()))?;
        let blocks = entries
            .into_iter()
            .map(|e| {
                let prefix = format!("aligned/{}/{}", e.target_layer, e.kind.name());
                Ok(AlignedBlock {
                    key: c.require(&format!("{prefix}/key"))?.clone(),
                    value: c.require(&format!("{prefix}/value"))?.clone(),
                    target_layer: e.target_layer,
                    kind: e.kind,
                    slots: e.slots,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AlignedDelta { blocks })
    }
}

/// Prior contents of every slot an injection touched.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionRecord<T = f32> {
    saved: Vec<(usize, NeuronKind, usize, Vec<T>, Vec<T>)>,
}

fn check_block<T: Real>(params: &TransformerParams<T>, b: &AlignedBlock<T>) -> Result<()> {
    let cfg = params.config;
    if b.target_layer >= cfg.layers {
        return Err(PktError::Index(format!("target layer {} of {}", b.target_layer, cfg.layers)));
    }
    let width = match b.kind {
        NeuronKind::Ffn => cfg.n_ffn,
        NeuronKind::Mhsa => cfg.d_model,
    };
    let c = b.slots.len();
    if b.key.shape() != [c, cfg.d_model] || b.value.shape() != [c, cfg.d_model] {
        return Err(PktError::shape(
            "inject",
            format!(
                "{} block for layer {}: key {:?}, value {:?}, expected [{c}, {}]",
                b.kind.name(),
                b.target_layer,
                b.key.shape(),
                b.value.shape(),
                cfg.d_model
            ),
        ));
    }
    if let Some(&s) = b.slots.iter().find(|&&s| s >= width) {
        return Err(PktError::Index(format!("slot {s} of width {width}")));
    }
    Ok(())
}

/// `Θ_s + Δ` at the indexed slots, on a copy.
pub fn inject<T: Real>(
    params: &TransformerParams<T>,
    delta: &AlignedDelta<T>,
) -> Result<(TransformerParams<T>, InjectionRecord<T>)> {
    for b in &delta.blocks {
        check_block(params, b)?;
    }
    let mut out = params.clone();
    let mut saved = Vec::new();
    for b in &delta.blocks {
        let layer = &mut out.layers[b.target_layer];
        let (key_m, value_m) = match b.kind {
            NeuronKind::Ffn => (&mut layer.w_up, &mut layer.w_down),
            NeuronKind::Mhsa => (&mut layer.wv, &mut layer.wo),
        };
        for (i, &slot) in b.slots.iter().enumerate() {
            saved.push((b.target_layer, b.kind, slot, key_m.row(slot).to_vec(), value_m.col(slot)));
            for (w, &d) in key_m.row_mut(slot).iter_mut().zip(b.key.row(i)) {
                *w += d;
            }
            let col: Vec<T> = value_m.col(slot).iter().zip(b.value.row(i)).map(|(&w, &d)| w + d).collect();
            value_m.set_col(slot, &col);
        }
    }
    Ok((out, InjectionRecord { saved }))
}

/// Restores every slot touched by the injection that produced `record`.
pub fn undo_injection<T: Real>(params: &TransformerParams<T>, record: &InjectionRecord<T>) -> TransformerParams<T> {
    let mut out = params.clone();
    for (layer, kind, slot, key, value) in record.saved.iter().rev() {
        let l = &mut out.layers[*layer];
        let (key_m, value_m) = match kind {
            NeuronKind::Ffn => (&mut l.w_up, &mut l.w_down),
            NeuronKind::Mhsa => (&mut l.wv, &mut l.wo),
        };
        key_m.row_mut(*slot).copy_from_slice(key);
        value_m.set_col(*slot, value);
    }
    out
}

/// Direct injection of a closed-form-reduced extraction.
pub fn inject_unaligned<T: Real>(
    params: &TransformerParams<T>,
    delta: &ExtractedDelta<T>,
    source: &ModelConfig,
    pairing: SlotPairing,
    target_scores: Option<&ScoreMatrices>,
) -> Result<TransformerParams<T>> {
    if delta.dim() != params.config.d_model {
        return Err(PktError::shape(
            "inject_unaligned",
            format!("delta rows have width {}, target width is {}", delta.dim(), params.config.d_model),
        ));
    }
    let aligned = AlignedDelta::from_extracted(delta, pairing, &params.config, source, target_scores)?;
    Ok(inject(params, &aligned)?.0)
}
