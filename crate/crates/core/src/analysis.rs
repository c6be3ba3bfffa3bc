//! Similarity diagnostics between models and range statistics of deltas.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{PktError, Result};
use crate::model::{forward, ForwardTrace, TransformerParams, WeightKind};
use crate::numerics::{matmul_nt, matmul_tn, Real, Tensor};

fn centered(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, p) = (x.rows(), x.cols());
    let mut means = vec![0.0; p];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    Tensor::from_fn(n, p, |i, j| x.get(i, j) - means[j])
}

/// Linear centered kernel alignment between two feature sets over the same rows.
pub fn linear_cka<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(PktError::shape("linear_cka", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.rows() < 2 {
        return Err(PktError::Similarity("CKA needs at least two rows".into()));
    }
    let xc = centered(&x.cast());
    let yc = centered(&y.cast());
    let xx = matmul_tn(&xc, &xc)?.frobenius_norm();
    let yy = matmul_tn(&yc, &yc)?.frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(PktError::Similarity("zero-variance feature set".into()));
    }
    let yx = matmul_tn(&yc, &xc)?.frobenius_norm();
    Ok(yx * yx / (xx * yy))
}

/// Output of one adapted sublayer, one row per token.
pub fn sublayer_output<T: Real>(
    params: &TransformerParams<T>,
    trace: &ForwardTrace<T>,
    layer: usize,
    kind: WeightKind,
) -> Result<Tensor<T>> {
    let lt = trace.layer(layer, 0)?;
    Ok(match kind {
        WeightKind::Up => matmul_nt(&lt.ffn_in, &params.layers[layer].w_up)?,
        WeightKind::Down => lt.ffn_out.clone(),
        WeightKind::V => lt.v.clone(),
        WeightKind::O => lt.attn_out.clone(),
    })
}

/// Layer of a `to_layers`-deep model at the same relative depth.
pub fn paired_layer(layer: usize, from_layers: usize, to_layers: usize) -> usize {
    let r = (layer as f64 * to_layers as f64 / from_layers as f64).round() as usize;
    r.min(to_layers - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaEntry {
    pub kind: WeightKind,
    pub layer_a: usize,
    pub layer_b: usize,
    pub cka: f64,
}

/// Stacked per-token sublayer outputs over the probe set, per layer.
fn activations<T: Real>(
    params: &TransformerParams<T>,
    probe: &[Example],
    kind: WeightKind,
) -> Result<Vec<Tensor<f64>>> {
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); params.config.layers];
    let mut width = vec![0; params.config.layers];
    for ex in probe {
        let trace = forward(params, &ex.prompt, true)?.trace.expect("trace requested");
        for (l, acc) in per_layer.iter_mut().enumerate() {
            let out = sublayer_output(params, &trace, l, kind)?;
            width[l] = out.cols();
            acc.extend(out.data().iter().map(|v| v.as_f64()));
        }
    }
    per_layer.into_iter().zip(width).map(|(data, w)| Tensor::new(vec![data.len() / w, w], data)).collect()
}

/// CKA between proportionally paired layers of two models on one probe set.
pub fn representation_similarity<T: Real>(
    a: &TransformerParams<T>,
    b: &TransformerParams<T>,
    probe: &[Example],
    kinds: &[WeightKind],
) -> Result<Vec<CkaEntry>> {
    if a.config.vocab != b.config.vocab {
        return Err(PktError::Protocol(format!("vocabularies differ ({} vs {})", a.config.vocab, b.config.vocab)));
    }
    if probe.is_empty() {
        return Err(PktError::Data("empty probe set".into()));
    }
    let mut out = Vec::new();
    for &kind in kinds {
        let fa = activations(a, probe, kind)?;
        let fb = activations(b, probe, kind)?;
        for (la, xa) in fa.iter().enumerate() {
            let lb = paired_layer(la, a.config.layers, b.config.layers);
            out.push(CkaEntry { kind, layer_a: la, layer_b: lb, cka: linear_cka(xa, &fb[lb])? });
        }
    }
    Ok(out)
}

/// Cosine of two flattened matrices; `None` when either is zero.
pub fn cosine<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<f64>> {
    if a.shape() != b.shape() {
        return Err(PktError::shape("cosine", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(None);
    }
    Ok(Some(ab / (aa.sqrt() * bb.sqrt())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricEntry {
    pub layer: usize,
    pub kind: WeightKind,
    /// cosine(W_LoRA, W)
    pub lora_vs_original: f64,
    /// cosine(W_LoRA, W_remain)
    pub lora_vs_remain: f64,
    /// Set when a cosine was undefined (zero matrix) and reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricReport {
    pub entries: Vec<ParametricEntry>,
    pub mean_lora_vs_original: f64,
    pub mean_lora_vs_remain: f64,
}

/// Per-matrix cosines of the low-rank part against the original weight
/// and against the frozen remainder.
pub fn parametric_similarity<T: Real>(
    items: &[(usize, WeightKind, Tensor<T>, Tensor<T>, Tensor<T>)],
) -> Result<ParametricReport> {
    let mut entries = Vec::with_capacity(items.len());
    for (layer, kind, lora, w, remain) in items {
        let c1 = cosine(lora, w)?;
        let c2 = cosine(lora, remain)?;
        entries.push(ParametricEntry {
            layer: *layer,
            kind: *kind,
            lora_vs_original: c1.unwrap_or(0.0),
            lora_vs_remain: c2.unwrap_or(0.0),
            undefined: c1.is_none() || c2.is_none(),
        });
    }
    let n = entries.len().max(1) as f64;
    Ok(ParametricReport {
        mean_lora_vs_original: entries.iter().map(|e| e.lora_vs_original).sum::<f64>() / n,
        mean_lora_vs_remain: entries.iter().map(|e| e.lora_vs_remain).sum::<f64>() / n,
        entries,
    })
}

pub const HISTOGRAM_BINS: usize = 64;
pub const SMALL_DELTA: f64 = 0.002;
pub const LARGE_DELTA: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Equal-width bins over `[min, max]`.
    pub histogram: Vec<u64>,
    pub frac_above_002: f64,
    pub frac_above_005: f64,
}

pub fn delta_stats(values: &[f64]) -> Result<DeltaStats> {
    if values.is_empty() {
        return Err(PktError::Data("delta statistics of an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PktError::NonFinite("delta_stats"));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (values.iter().sum::<f64>() / values.len() as f64).clamp(min, max);
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let span = max - min;
    for &v in values {
        let b = if span > 0.0 { (((v - min) / span) * HISTOGRAM_BINS as f64) as usize } else { 0 };
        histogram[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    let n = values.len() as f64;
    let frac = |t: f64| values.iter().filter(|v| v.abs() > t).count() as f64 / n;
    Ok(DeltaStats {
        count: values.len(),
        min,
        max,
        mean,
        histogram,
        frac_above_002: frac(SMALL_DELTA),
        frac_above_005: frac(LARGE_DELTA),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub cka: Vec<CkaEntry>,
    pub parametric: Option<ParametricReport>,
    pub mean_cka: Vec<(WeightKind, f64)>,
}

impl SimilarityReport {
    pub fn new(cka: Vec<CkaEntry>, parametric: Option<ParametricReport>) -> Self {
        let mean_cka = WeightKind::ALL
            .iter()
            .filter_map(|&k| {
                let v: Vec<f64> = cka.iter().filter(|e| e.kind == k).map(|e| e.cka).collect();
                (!v.is_empty()).then(|| (k, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect();
        SimilarityReport { cka, parametric, mean_cka }
    }

    /// `layer,kind,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,metric,value\n");
        for e in &self.cka {
            writeln!(out, "{},{},cka,{}", e.layer_a, e.kind.name(), e.cka).unwrap();
        }
        if let Some(p) = &self.parametric {
            for e in &p.entries {
                writeln!(out, "{},{},cos_lora_w,{}", e.layer, e.kind.name(), e.lora_vs_original).unwrap();
                writeln!(out, "{},{},cos_lora_remain,{}", e.layer, e.kind.name(), e.lora_vs_remain).unwrap();
            }
        }
        out
    }
}
