//! Knowledge extraction from the larger model.
//!
//! A plan picks `L_s` source layers and, inside each, the `c` neurons to
//! copy. Selected layers keep their depth order and pair with target
//! layers `0..L_s`. Copies stay in the source width until [`reduce_dim`]
//! (or a hypernetwork) maps them to the target width.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{layer_scores, top_layers, top_neurons, NeuronKind, ScoreMatrices};
use crate::container::Container;
use crate::data::Example;
use crate::error::{PktError, Result};
use crate::model::{ModelConfig, ParamVars, TransformerParams, WeightKind};
use crate::numerics::{
    argsort_desc, least_squares_map, pca_apply, pca_fit, whitening_apply, whitening_fit, Real, Tape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    /// Shallowest `L_s` layers.
    Top,
    /// Deepest `L_s` layers.
    Bottom,
    Random,
    Attribution,
    Sensitivity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronStrategy {
    Random,
    /// Mean squared parameter magnitude.
    Importance,
    Attribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimReduction {
    Pca,
    Whitening,
    EmbeddingTransform,
    Hypernetwork,
    None,
}

macro_rules! parse_names {
    ($t:ty { $($s:literal => $v:expr),* $(,)? }) => {
        impl $t {
            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($v),)* _ => None }
            }
            pub fn name(self) -> &'static str {
                $(if self == $v { return $s; })*
                unreachable!()
            }
        }
    };
}

parse_names!(LayerStrategy {
    "top" => LayerStrategy::Top,
    "bottom" => LayerStrategy::Bottom,
    "random" => LayerStrategy::Random,
    "attribution" => LayerStrategy::Attribution,
    "sensitivity" => LayerStrategy::Sensitivity,
});

parse_names!(NeuronStrategy {
    "random" => NeuronStrategy::Random,
    "importance" => NeuronStrategy::Importance,
    "attribution" => NeuronStrategy::Attribution,
});

parse_names!(DimReduction {
    "pca" => DimReduction::Pca,
    "whitening" => DimReduction::Whitening,
    "embedding_transform" => DimReduction::EmbeddingTransform,
    "hypernetwork" => DimReduction::Hypernetwork,
    "none" => DimReduction::None,
});

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPlan {
    pub layer: LayerStrategy,
    pub neuron: NeuronStrategy,
    pub reduce: DimReduction,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for ExtractionPlan {
    fn default() -> Self {
        ExtractionPlan {
            layer: LayerStrategy::Attribution,
            neuron: NeuronStrategy::Attribution,
            reduce: DimReduction::Hypernetwork,
            fraction: 0.1,
            seed: 0,
        }
    }
}

impl ExtractionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(PktError::Plan(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        Ok(())
    }

    /// Neurons taken per layer for a target width of `width`.
    pub fn count(&self, width: usize) -> usize {
        ((self.fraction * width as f64).ceil() as usize).clamp(1, width)
    }
}

/// Copied neurons of one source layer and kind.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaBlock<T = f32> {
    pub source_layer: usize,
    pub target_layer: usize,
    pub kind: NeuronKind,
    /// Source neuron indices, strictly increasing.
    pub indices: Vec<usize>,
    /// Selection rank of each index (0 = chosen first).
    pub ranks: Vec<usize>,
    /// FFN: rows of `W_up`; MHSA: rows of `W_v`. One row per neuron.
    pub key: Tensor<T>,
    /// FFN: columns of `W_down`; MHSA: columns of `W_o`. One row per neuron.
    pub value: Tensor<T>,
}

impl<T: Real> DeltaBlock<T> {
    /// Indices ordered by rank.
    pub fn ranked_indices(&self) -> Vec<usize> {
        let mut by_rank: Vec<(usize, usize)> = self.ranks.iter().copied().zip(self.indices.iter().copied()).collect();
        by_rank.sort_unstable();
        by_rank.into_iter().map(|(_, i)| i).collect()
    }

    pub fn dim(&self) -> usize {
        self.key.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedDelta<T = f32> {
    pub blocks: Vec<DeltaBlock<T>>,
    pub source_dim: usize,
    pub plan: ExtractionPlan,
}

impl<T: Real> ExtractedDelta<T> {
    /// Current width of every key/value row.
    pub fn dim(&self) -> usize {
        self.blocks.first().map(|b| b.dim()).unwrap_or(self.source_dim)
    }

    pub fn block(&self, target_layer: usize, kind: NeuronKind) -> Option<&DeltaBlock<T>> {
        self.blocks.iter().find(|b| b.target_layer == target_layer && b.kind == kind)
    }

    /// Every key and value entry, in block order.
    pub fn values(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.key.data().iter().chain(b.value.data()).map(|v| v.as_f64())).collect()
    }

    pub fn map_rows(&self, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                Ok(DeltaBlock {
                    key: f(&b.key)?.ensure_finite("reduce_dim")?,
                    value: f(&b.value)?.ensure_finite("reduce_dim")?,
                    ..b.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(ExtractedDelta { blocks, source_dim: self.source_dim, plan: self.plan })
    }
}

impl ExtractedDelta<f32> {
    pub fn to_container(&self, provenance: serde_json::Value) -> Container {
        let index: Vec<_> = self
            .blocks
            .iter()
            .map(|b| {
                json!({
                    "target_layer": b.target_layer,
                    "source_layer": b.source_layer,
                    "kind": b.kind,
                    "indices": b.indices,
                    "ranks": b.ranks,
                })
            })
            .collect();
        let mut c = Container::new(json!({
            "kind": "extracted_delta",
            "plan": self.plan,
            "source_dim": self.source_dim,
            "blocks": index,
            "provenance": provenance,
        }));
        for b in &self.blocks {
            let prefix = format!("delta/{}/{}", b.target_layer, b.kind.name());
            c.push(format!("{prefix}/key"), b.key.clone());
            c.push(format!("{prefix}/value"), b.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            target_layer: usize,
            source_layer: usize,
            kind: NeuronKind,
            indices: Vec<usize>,
            ranks: Vec<usize>,
        }
        let meta =
            |k: &str| c.metadata.get(k).cloned().ok_or_else(|| PktError::container(format!("metadata.{k}"), "missing"));
        let entries: Vec<Entry> = serde_json::from_value(meta("blocks")?)
            .map_err(|e| PktError::container("metadata.blocks", e.to_string()))?;
        let plan: ExtractionPlan =
            serde_json::from_value(meta("plan")?).map_err(|e| PktError::container("metadata.plan", e.to_string()))?;
        let source_dim =
            meta("source_dim")?.as_u64().ok_or_else(|| PktError::container("metadata.source_dim", "not an integer"))?
                as usize;
        let blocks = entries
            .into_iter()
            .map(|e| {
                let prefix = format!("delta/{}/{}", e.target_layer, e.kind.name());
                let key = c.require(&format!("{prefix}/key"))?.clone();
                let value = c.require(&format!("{prefix}/value"))?.clone();
                if key.rows() != e.indices.len() || value.rows() != e.indices.len() || e.ranks.len() != e.indices.len()
                {
                    return Err(PktError::container(prefix, "index list does not match tensor rows"));
                }
                Ok(DeltaBlock {
                    source_layer: e.source_layer,
                    target_layer: e.target_layer,
                    kind: e.kind,
                    indices: e.indices,
                    ranks: e.ranks,
                    key,
                    value,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ExtractedDelta { blocks, source_dim, plan })
    }

    pub fn write(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        self.to_container(provenance).write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// `|θ · ∇L|` accumulated per parameter over examples.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityScores {
    /// Keyed by parameter name (`layers.{l}.{wq|wk|wv|wo|w_up|w_down}`).
    pub scores: BTreeMap<String, Tensor<f64>>,
    pub layers: usize,
}

impl SensitivityScores {
    pub fn get(&self, layer: usize, kind: WeightKind) -> &Tensor<f64> {
        &self.scores[&format!("layers.{layer}.{}", kind.param_name())]
    }

    /// Sum over every matrix of each layer.
    pub fn layer_scores(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|l| {
                let prefix = format!("layers.{l}.");
                self.scores
                    .iter()
                    .filter(|(k, _)| k.starts_with(&prefix))
                    .map(|(_, t)| t.data().iter().sum::<f64>())
                    .sum()
            })
            .collect()
    }
}

/// Per-example gradients of the answer loss for every per-layer matrix.
pub fn sensitivity<T: Real>(params: &TransformerParams<T>, extract_set: &[Example]) -> Result<SensitivityScores> {
    if extract_set.is_empty() {
        return Err(PktError::Data("empty extract set".into()));
    }
    let mut scores: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for ex in extract_set {
        let mut tape = Tape::new();
        let pv = ParamVars::bind_with(params, &mut tape, |tape, name, t| {
            Ok(if name.starts_with("layers.") { tape.param(name, t.clone()) } else { tape.constant(t.clone()) })
        })?;
        let loss = crate::model::loss_graph(&mut tape, &params.config, &pv, std::slice::from_ref(ex))?;
        let grads = tape.backward(loss)?;
        for (name, theta) in params.named() {
            let Some(g) = grads.get(&name) else { continue };
            let acc = scores.entry(name).or_insert_with(|| Tensor::zeros(theta.shape()));
            for ((a, &w), &gi) in acc.data_mut().iter_mut().zip(theta.data()).zip(g.data()) {
                *a += (w.as_f64() * gi.as_f64()).abs();
            }
        }
    }
    Ok(SensitivityScores { scores, layers: params.config.layers })
}

/// Mean squared magnitude of each neuron's key and value parameters.
pub fn neuron_amplitudes<T: Real>(params: &TransformerParams<T>, layer: usize, kind: NeuronKind) -> Vec<f64> {
    let p = &params.layers[layer];
    let (key, value) = match kind {
        NeuronKind::Ffn => (&p.w_up, &p.w_down),
        NeuronKind::Mhsa => (&p.wv, &p.wo),
    };
    (0..key.rows())
        .map(|k| {
            let sq: f64 = key.row(k).iter().chain(value.col(k).iter()).map(|v| v.as_f64().powi(2)).sum();
            sq / (key.cols() + value.rows()) as f64
        })
        .collect()
}

/// The `c` neurons with the largest amplitude, best first, ties to the lower index.
pub fn importance_select<T: Real>(
    params: &TransformerParams<T>,
    layer: usize,
    kind: NeuronKind,
    c: usize,
) -> Result<Vec<usize>> {
    if layer >= params.config.layers {
        return Err(PktError::Dimension(format!("layer {layer} of {}", params.config.layers)));
    }
    let amp = neuron_amplitudes(params, layer, kind);
    if c > amp.len() {
        return Err(PktError::Dimension(format!("{c} neurons requested of {}", amp.len())));
    }
    Ok(argsort_desc(&amp).into_iter().take(c).collect())
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k).into_vec()
}

fn select_layers(
    plan: &ExtractionPlan,
    kind: NeuronKind,
    source_layers: usize,
    target_layers: usize,
    scores: Option<&ScoreMatrices>,
    sens: Option<&SensitivityScores>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let n = target_layers;
    Ok(match plan.layer {
        LayerStrategy::Top => (0..n).collect(),
        LayerStrategy::Bottom => (source_layers - n..source_layers).collect(),
        LayerStrategy::Random => {
            let mut v = random_subset(rng, source_layers, n);
            v.sort_unstable();
            v
        }
        LayerStrategy::Attribution => {
            let s = scores.ok_or_else(|| PktError::Plan("attribution layers need score matrices".into()))?;
            top_layers(s.get(kind), n)?
        }
        LayerStrategy::Sensitivity => {
            let s = sens.ok_or_else(|| PktError::Plan("sensitivity layers need sensitivity scores".into()))?;
            top_by_score(&s.layer_scores(), n)
        }
    })
}

fn top_by_score(scores: &[f64], n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = argsort_desc(scores).into_iter().take(n).collect();
    v.sort_unstable();
    v
}

/// Copies the planned neurons out of the source model.
pub fn extract<T: Real>(
    source: &TransformerParams<T>,
    target: &ModelConfig,
    plan: &ExtractionPlan,
    scores: Option<&ScoreMatrices>,
    sens: Option<&SensitivityScores>,
) -> Result<ExtractedDelta<T>> {
    plan.validate()?;
    ModelConfig::validate_pair(&source.config, target)?;
    if plan.neuron == NeuronStrategy::Attribution && scores.is_none() {
        return Err(PktError::Plan("attribution neurons need score matrices".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let src = source.config;
    let mut blocks = Vec::new();
    for kind in [NeuronKind::Ffn, NeuronKind::Mhsa] {
        let (source_width, target_width) = match kind {
            NeuronKind::Ffn => (src.n_ffn, target.n_ffn),
            NeuronKind::Mhsa => (src.d_model, target.d_model),
        };
        let c = plan.count(target_width).min(source_width);
        let layers = select_layers(plan, kind, src.layers, target.layers, scores, sens, &mut rng)?;
        for (target_layer, &l) in layers.iter().enumerate() {
            let ranked = match plan.neuron {
                NeuronStrategy::Random => random_subset(&mut rng, source_width, c),
                NeuronStrategy::Importance => importance_select(source, l, kind, c)?,
                NeuronStrategy::Attribution => top_neurons(scores.expect("checked above").get(kind), l, c)?,
            };
            let mut pairs: Vec<(usize, usize)> = ranked.iter().enumerate().map(|(r, &i)| (i, r)).collect();
            pairs.sort_unstable();
            let indices: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let ranks = pairs.iter().map(|p| p.1).collect();
            let p = &source.layers[l];
            let (key, value) = match kind {
                NeuronKind::Ffn => (p.w_up.select_rows(&indices), p.w_down.select_cols(&indices).transpose()),
                NeuronKind::Mhsa => (p.wv.select_rows(&indices), p.wo.select_cols(&indices).transpose()),
            };
            blocks.push(DeltaBlock { source_layer: l, target_layer, kind, indices, ranks, key, value });
        }
    }
    Ok(ExtractedDelta { blocks, source_dim: src.d_model, plan: *plan })
}

/// Maps every source-width row of the delta to `target_dim`.
///
/// Projections are fitted on `stats` (source embedding rows);
/// `embedding_transform` also needs the target embedding rows `proxy`.
pub fn reduce_dim<T: Real>(
    delta: &ExtractedDelta<T>,
    method: DimReduction,
    stats: &Tensor<T>,
    proxy: Option<&Tensor<T>>,
    target_dim: usize,
) -> Result<ExtractedDelta<T>> {
    if stats.rank() != 2 || stats.cols() != delta.dim() {
        return Err(PktError::Dimension(format!(
            "statistics width {:?} does not match delta width {}",
            stats.shape(),
            delta.dim()
        )));
    }
    match method {
        DimReduction::Pca => {
            let p = pca_fit(stats, target_dim)?;
            delta.map_rows(|x| pca_apply(x, &p))
        }
        DimReduction::Whitening => {
            let w = whitening_fit(stats, target_dim)?;
            delta.map_rows(|x| whitening_apply(x, &w))
        }
        DimReduction::EmbeddingTransform => {
            let es = proxy.ok_or_else(|| PktError::Plan("embedding transform needs target embeddings".into()))?;
            if es.cols() != target_dim || es.rows() != stats.rows() {
                return Err(PktError::Dimension(format!(
                    "target embeddings {:?} vs source {:?} and width {target_dim}",
                    es.shape(),
                    stats.shape()
                )));
            }
            let w = least_squares_map(stats, es)?;
            delta.map_rows(|x| crate::numerics::matmul(x, &w))
        }
        DimReduction::None if delta.dim() == target_dim => Ok(delta.clone()),
        DimReduction::None | DimReduction::Hypernetwork => {
            Err(PktError::Plan(format!("`{}` is not a closed-form reduction to width {target_dim}", method.name())))
        }
    }
}

/// Submatrix with near-maximal sensitivity mass, found by alternating
/// row and column selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Submatrix<T = f32> {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub extract: Tensor<T>,
    pub score: f64,
    pub iterations: usize,
}

fn subset_sum(s: &Tensor<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    rows.iter().map(|&r| cols.iter().map(|&c| s.get(r, c)).sum::<f64>()).sum()
}

fn best_k(scores: Vec<f64>, k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = argsort_desc(&scores).into_iter().take(k).collect();
    v.sort_unstable();
    v
}

pub fn seeking_submatrix<T: Real>(w: &Tensor<T>, s: &Tensor<f64>, n_s: usize, m_s: usize) -> Result<Submatrix<T>> {
    if w.shape() != s.shape() || w.rank() != 2 {
        return Err(PktError::shape("seeking_submatrix", format!("W {:?} vs S {:?}", w.shape(), s.shape())));
    }
    let (n_l, m_l) = (w.rows(), w.cols());
    if n_s == 0 || m_s == 0 || n_s > n_l || m_s > m_l {
        return Err(PktError::Dimension(format!("{n_s}×{m_s} submatrix of {n_l}×{m_l}")));
    }
    let col_sums = (0..m_l).map(|c| (0..n_l).map(|r| s.get(r, c)).sum()).collect();
    let mut cols = best_k(col_sums, m_s);
    let mut rows = best_k((0..n_l).map(|r| cols.iter().map(|&c| s.get(r, c)).sum()).collect(), n_s);
    let mut score = subset_sum(s, &rows, &cols);
    let mut iterations = 1;
    while iterations < n_l + m_l {
        let new_cols = best_k((0..m_l).map(|c| rows.iter().map(|&r| s.get(r, c)).sum()).collect(), m_s);
        let new_rows = best_k((0..n_l).map(|r| new_cols.iter().map(|&c| s.get(r, c)).sum()).collect(), n_s);
        let new_score = subset_sum(s, &new_rows, &new_cols);
        iterations += 1;
        if new_score <= score {
            break;
        }
        rows = new_rows;
        cols = new_cols;
        score = new_score;
    }
    let extract = w.select_rows(&rows).select_cols(&cols);
    Ok(Submatrix { rows, cols, extract, score, iterations })
}

/// One Seeking extraction per adapted matrix of each selected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SeekingBlock<T = f32> {
    pub source_layer: usize,
    pub target_layer: usize,
    pub kind: WeightKind,
    pub sub: Submatrix<T>,
}

/// Sensitivity-ranked layers, then a target-shaped submatrix of each of
/// the up/down/v/o matrices.
pub fn seeking_extract<T: Real>(
    source: &TransformerParams<T>,
    target: &ModelConfig,
    sens: &SensitivityScores,
) -> Result<Vec<SeekingBlock<T>>> {
    ModelConfig::validate_pair(&source.config, target)?;
    let layers = top_by_score(&sens.layer_scores(), target.layers);
    let mut out = Vec::new();
    for (target_layer, &l) in layers.iter().enumerate() {
        for kind in WeightKind::ALL {
            let (n, m) = match kind {
                WeightKind::Up => (target.n_ffn, target.d_model),
                WeightKind::Down => (target.d_model, target.n_ffn),
                WeightKind::V | WeightKind::O => (target.d_model, target.d_model),
            };
            let sub = seeking_submatrix(source.layers[l].get(kind), sens.get(l, kind), n, m)?;
            out.push(SeekingBlock { source_layer: l, target_layer, kind, sub });
        }
    }
    Ok(out)
}

/// Layer score sums for reports.
pub fn attribution_layer_scores(scores: &ScoreMatrices, kind: NeuronKind) -> Vec<f64> {
    layer_scores(scores.get(kind))
}

/// Seeking blocks as a `PKTC` container: one tensor per block named
/// `seeking/<target_layer>/<kind>`, indices in the metadata.
pub fn seeking_to_container(blocks: &[SeekingBlock<f32>], provenance: serde_json::Value) -> Container {
    let index: Vec<_> = blocks
        .iter()
        .map(|b| {
            json!({
                "source_layer": b.source_layer,
                "target_layer": b.target_layer,
                "kind": b.kind,
                "rows": b.sub.rows,
                "cols": b.sub.cols,
                "score": b.sub.score,
                "iterations": b.sub.iterations,
            })
        })
        .collect();
    let mut c = Container::new(json!({"kind": "seeking", "blocks": index, "provenance": provenance}));
    for b in blocks {
        c.push(format!("seeking/{}/{}", b.target_layer, b.kind.name()), b.sub.extract.clone());
    }
    c
}

pub fn seeking_from_container(c: &Container) -> Result<Vec<SeekingBlock<f32>>> {
    #[derive(Deserialize)]
    struct Entry {
        source_layer: usize,
        target_layer: usize,
        kind: WeightKind,
        rows: Vec<usize>,
        cols: Vec<usize>,
        score: f64,
        iterations: usize,
    }
    let entries: Vec<Entry> = serde_json::from_value(
        c.metadata.get("blocks").cloned().ok_or_else(|| PktError::container("metadata.blocks", "missing"))?,
    )
    .map_err(|e| PktError::container("metadata.blocks", e.to_string()))?;
    entries
        .into_iter()
        .map(|e| {
            let name = format!("seeking/{}/{}", e.target_layer, e.kind.name());
            let extract = c.require(&name)?.clone();
            if extract.shape() != [e.rows.len(), e.cols.len()] {
                return Err(PktError::container(name, "shape does not match its index lists"));
            }
            Ok(SeekingBlock {
                source_layer: e.source_layer,
                target_layer: e.target_layer,
                kind: e.kind,
                sub: Submatrix { rows: e.rows, cols: e.cols, extract, score: e.score, iterations: e.iterations },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerParams<f32> {
        let cfg = ModelConfig { layers: 4, d_model: 8, n_ffn: 16, heads: 2, vocab: 10, max_len: 4, seed: 3 };
        TransformerParams::init(cfg).unwrap()
    }

    #[test]
    fn count_rounds_up_and_clamps() {
        let plan = |fraction| ExtractionPlan { fraction, ..ExtractionPlan::default() };
        assert_eq!(plan(0.1).count(16), 2);
        assert_eq!(plan(0.01).count(16), 1);
        assert_eq!(plan(1.0).count(16), 16);
        assert_eq!(plan(0.5).count(8), 4);
        assert!(plan(0.0).validate().is_err());
        assert!(plan(1.5).validate().is_err());
    }

    #[test]
    fn amplitude_is_the_mean_square_of_key_and_value() {
        let mut p = model();
        let layer = &mut p.layers[1];
        layer.w_up.data_mut().iter_mut().for_each(|v| *v = 0.0);
        layer.w_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        layer.w_up.set(5, 0, 3.0);
        layer.w_down.set(2, 5, 4.0);
        layer.w_up.set(9, 1, 1.0);
        let amp = neuron_amplitudes(&p, 1, NeuronKind::Ffn);
        assert_eq!(amp[5], 25.0 / 16.0);
        assert_eq!(amp[9], 1.0 / 16.0);
        assert_eq!(importance_select(&p, 1, NeuronKind::Ffn, 3).unwrap(), vec![5, 9, 0]);
        assert!(importance_select(&p, 4, NeuronKind::Ffn, 1).is_err());
        assert!(importance_select(&p, 1, NeuronKind::Ffn, 17).is_err());
    }

    #[test]
    fn top_and_bottom_take_the_edges() {
        let p = model();
        let target = ModelConfig { layers: 2, d_model: 4, n_ffn: 8, ..p.config };
        let run = |layer| {
            let plan = ExtractionPlan { layer, neuron: NeuronStrategy::Importance, ..ExtractionPlan::default() };
            let d = extract(&p, &target, &plan, None, None).unwrap();
            d.blocks.iter().map(|b| (b.kind, b.source_layer, b.target_layer)).collect::<Vec<_>>()
        };
        use NeuronKind::*;
        assert_eq!(run(LayerStrategy::Top), vec![(Ffn, 0, 0), (Ffn, 1, 1), (Mhsa, 0, 0), (Mhsa, 1, 1)]);
        assert_eq!(run(LayerStrategy::Bottom), vec![(Ffn, 2, 0), (Ffn, 3, 1), (Mhsa, 2, 0), (Mhsa, 3, 1)]);
    }

    #[test]
    fn copied_rows_match_the_source() {
        let p = model();
        let target = ModelConfig { layers: 2, d_model: 4, n_ffn: 8, ..p.config };
        let plan = ExtractionPlan {
            layer: LayerStrategy::Random,
            neuron: NeuronStrategy::Random,
            ..ExtractionPlan::default()
        };
        let d = extract(&p, &target, &plan, None, None).unwrap();
        for b in &d.blocks {
            let src = &p.layers[b.source_layer];
            for (r, &i) in b.indices.iter().enumerate() {
                let (key, value) = match b.kind {
                    NeuronKind::Ffn => (src.w_up.row(i), src.w_down.col(i)),
                    NeuronKind::Mhsa => (src.wv.row(i), src.wo.col(i)),
                };
                assert_eq!(b.key.row(r), key);
                assert_eq!(b.value.row(r), value);
            }
        }
        let attr = ExtractionPlan { layer: LayerStrategy::Top, ..ExtractionPlan::default() };
        assert!(matches!(extract(&p, &target, &attr, None, None), Err(PktError::Plan(_))));
    }
}
