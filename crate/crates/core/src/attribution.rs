//! Neuron-level knowledge localization through the logit lens.
//!
//! An FFN neuron `k` of layer `l` contributes `c^l_{i,k} · down_k` to the
//! residual stream; an attention neuron contributes `(z^l_i)_k · o_k`. Its
//! importance for a target token `w` is how much adding that vector to the
//! stream it was written into raises `log p(w | ·)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{PktError, Result};
use crate::model::{forward, ForwardTrace, TransformerParams, NORM_EPS};
use crate::numerics::{argsort_desc, logsumexp, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    Ffn,
    Mhsa,
}

impl NeuronKind {
    pub fn name(self) -> &'static str {
        match self {
            NeuronKind::Ffn => "ffn",
            NeuronKind::Mhsa => "mhsa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub kind: NeuronKind,
    pub index: usize,
}

/// How `p(w | x)` reads a residual vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// `softmax(E_u · final_norm(x))`
    #[default]
    FinalNorm,
    /// `softmax(E_u · x)`
    Raw,
}

/// Contribution of one neuron to the residual stream at `position`.
pub fn neuron_vector<T: Real>(
    params: &TransformerParams<T>,
    trace: &ForwardTrace<T>,
    id: NeuronId,
    position: usize,
) -> Result<Vec<T>> {
    let lt = trace.layer(id.layer, position)?;
    let p = &params.layers[id.layer];
    let (w, coeff) = match id.kind {
        NeuronKind::Ffn => (&p.w_down, lt.coeff.get(position, check(id, p.w_down.cols())?)),
        NeuronKind::Mhsa => (&p.wo, lt.z.get(position, check(id, p.wo.cols())?)),
    };
    Ok(w.col(id.index).into_iter().map(|x| coeff * x).collect())
}

fn check(id: NeuronId, width: usize) -> Result<usize> {
    if id.index >= width {
        return Err(PktError::Index(format!(
            "{} neuron {} of layer {} (width {width})",
            id.kind.name(),
            id.index,
            id.layer
        )));
    }
    Ok(id.index)
}

/// `log p(w | x)` evaluated in 64-bit arithmetic.
pub fn log_prob<T: Real>(params: &TransformerParams<T>, x: &[f64], target: u32, mode: LensMode) -> Result<f64> {
    let vocab = params.config.vocab;
    if target as usize >= vocab {
        return Err(PktError::Token { token: target, vocab });
    }
    let d = x.len();
    let y: Vec<f64> = match mode {
        LensMode::FinalNorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let s = 1.0 / (ms + NORM_EPS).sqrt();
            x.iter().zip(params.final_norm.data()).map(|(&v, &g)| v * s * g.as_f64()).collect()
        }
        LensMode::Raw => x.to_vec(),
    };
    let logits: Vec<f64> =
        (0..vocab).map(|b| params.unembed.row(b).iter().zip(&y).map(|(&e, &v)| e.as_f64() * v).sum()).collect();
    Ok(logits[target as usize] - logsumexp(&logits))
}

/// Signed log-probability gain from adding the neuron's vector to the
/// stream it reads: `h^{l-1}` for attention neurons, `h^{l-1} + A^l` for
/// FFN neurons.
pub fn importance<T: Real>(
    params: &TransformerParams<T>,
    trace: &ForwardTrace<T>,
    id: NeuronId,
    position: usize,
    target: u32,
    mode: LensMode,
) -> Result<f64> {
    let v = neuron_vector(params, trace, id, position)?;
    let lt = trace.layer(id.layer, position)?;
    let base = match id.kind {
        NeuronKind::Ffn => lt.h_mid.row(position),
        NeuronKind::Mhsa => lt.h_in.row(position),
    };
    let base: Vec<f64> = base.iter().map(|x| x.as_f64()).collect();
    let with: Vec<f64> = base.iter().zip(&v).map(|(&b, &x)| b + x.as_f64()).collect();
    Ok(log_prob(params, &with, target, mode)? - log_prob(params, &base, target, mode)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoreProvenance {
    pub model_id: String,
    pub dataset_id: String,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrices {
    /// `L × N`
    pub ffn: Tensor<f64>,
    /// `L × d`
    pub mhsa: Tensor<f64>,
    pub provenance: ScoreProvenance,
}

impl ScoreMatrices {
    pub fn get(&self, kind: NeuronKind) -> &Tensor<f64> {
        match kind {
            NeuronKind::Ffn => &self.ffn,
            NeuronKind::Mhsa => &self.mhsa,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,neuron,score\n");
        for kind in [NeuronKind::Ffn, NeuronKind::Mhsa] {
            let s = self.get(kind);
            for l in 0..s.rows() {
                for (k, v) in s.row(l).iter().enumerate() {
                    writeln!(out, "{l},{},{k},{v:e}", kind.name()).unwrap();
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, layers: usize, n_ffn: usize, d_model: usize) -> Result<Self> {
        let mut ffn = Tensor::zeros(&[layers, n_ffn]);
        let mut mhsa = Tensor::zeros(&[layers, d_model]);
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = || PktError::Data(format!("score csv line {}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let l: usize = f[0].parse().map_err(|_| bad())?;
            let k: usize = f[2].parse().map_err(|_| bad())?;
            let v: f64 = f[3].parse().map_err(|_| bad())?;
            let t = match f[1] {
                "ffn" => &mut ffn,
                "mhsa" => &mut mhsa,
                _ => return Err(bad()),
            };
            if l >= t.rows() || k >= t.cols() {
                return Err(bad());
            }
            t.set(l, k, v);
        }
        Ok(ScoreMatrices { ffn, mhsa, provenance: ScoreProvenance::default() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-layer products that make every neuron's importance an `O(B)` update.
struct LensCache {
    /// `E_u · diag(g)`, `B × d`
    m: Tensor<f64>,
    /// Per layer: `M · W_down` (`B × N`) and `M · W_o` (`B × d`).
    m_down: Vec<Tensor<f64>>,
    m_o: Vec<Tensor<f64>>,
}

impl LensCache {
    fn new<T: Real>(params: &TransformerParams<T>, mode: LensMode) -> Result<Self> {
        let mut m = params.unembed.cast::<f64>();
        if mode == LensMode::FinalNorm {
            let g = params.final_norm.cast::<f64>();
            let d = m.cols();
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v *= g.data()[i % d];
            }
        }
        let mut m_down = Vec::new();
        let mut m_o = Vec::new();
        for p in &params.layers {
            m_down.push(crate::numerics::matmul(&m, &p.w_down.cast())?);
            m_o.push(crate::numerics::matmul(&m, &p.wo.cast())?);
        }
        Ok(LensCache { m, m_down, m_o })
    }
}

/// Scores of every neuron in every layer for a single traced example.
fn example_scores<T: Real>(
    params: &TransformerParams<T>,
    cache: &LensCache,
    trace: &ForwardTrace<T>,
    position: usize,
    target: usize,
    mode: LensMode,
    ffn: &mut Tensor<f64>,
    mhsa: &mut Tensor<f64>,
) -> Result<()> {
    let d = params.config.d_model;
    for (l, p) in params.layers.iter().enumerate() {
        let lt = trace.layer(l, position)?;
        let jobs = [
            (lt.h_mid.row(position), lt.coeff.row(position), &p.w_down, &cache.m_down[l], &mut *ffn),
            (lt.h_in.row(position), lt.z.row(position), &p.wo, &cache.m_o[l], &mut *mhsa),
        ];
        for (base, coeff, w, mw, out) in jobs {
            let x: Vec<f64> = base.iter().map(|v| v.as_f64()).collect();
            let n = w.cols();
            let mx: Vec<f64> =
                (0..cache.m.rows()).map(|b| cache.m.row(b).iter().zip(&x).map(|(a, c)| a * c).sum()).collect();
            let xx: f64 = x.iter().map(|v| v * v).sum();
            let rms = |sq: f64| match mode {
                LensMode::FinalNorm => (sq / d as f64 + NORM_EPS).sqrt(),
                LensMode::Raw => 1.0,
            };
            let base_logits: Vec<f64> = mx.iter().map(|v| v / rms(xx)).collect();
            let base_lp = base_logits[target] - logsumexp(&base_logits);
            let mut logits = vec![0.0; mx.len()];
            for k in 0..n {
                let c = coeff[k].as_f64();
                if c == 0.0 {
                    continue;
                }
                let mut xdot = 0.0;
                let mut ww = 0.0;
                for r in 0..d {
                    let wk = w.get(r, k).as_f64();
                    xdot += x[r] * wk;
                    ww += wk * wk;
                }
                if ww == 0.0 {
                    continue;
                }
                let s = 1.0 / rms(xx + 2.0 * c * xdot + c * c * ww);
                for (b, o) in logits.iter_mut().enumerate() {
                    *o = (mx[b] + c * mw.get(b, k)) * s;
                }
                let lp = logits[target] - logsumexp(&logits);
                let cur = out.get(l, k);
                out.set(l, k, cur + (lp - base_lp));
            }
        }
    }
    Ok(())
}

/// Sums importance at each example's answer-predicting position, in example order.
pub fn score_matrices<T: Real>(
    params: &TransformerParams<T>,
    extract_set: &[Example],
    mode: LensMode,
) -> Result<ScoreMatrices> {
    if extract_set.is_empty() {
        return Err(PktError::Data("empty extract set".into()));
    }
    let cfg = params.config;
    let cache = LensCache::new(params, mode)?;
    let mut ffn = Tensor::zeros(&[cfg.layers, cfg.n_ffn]);
    let mut mhsa = Tensor::zeros(&[cfg.layers, cfg.d_model]);
    for ex in extract_set {
        if ex.answer as usize >= cfg.vocab {
            return Err(PktError::Token { token: ex.answer, vocab: cfg.vocab });
        }
        let out = forward(params, &ex.prompt, true)?;
        let trace = out.trace.expect("trace requested");
        let pos = ex.prompt.len() - 1;
        example_scores(params, &cache, &trace, pos, ex.answer as usize, mode, &mut ffn, &mut mhsa)?;
    }
    if !ffn.is_finite() || !mhsa.is_finite() {
        return Err(PktError::NonFinite("score_matrices"));
    }
    Ok(ScoreMatrices {
        ffn,
        mhsa,
        provenance: ScoreProvenance { model_id: String::new(), dataset_id: String::new(), examples: extract_set.len() },
    })
}

/// Per-layer sums of a score matrix.
pub fn layer_scores(scores: &Tensor<f64>) -> Vec<f64> {
    (0..scores.rows()).map(|l| scores.row(l).iter().sum()).collect()
}

/// The `n` highest-scoring layers, returned in depth order.
pub fn top_layers(scores: &Tensor<f64>, n: usize) -> Result<Vec<usize>> {
    if n > scores.rows() {
        return Err(PktError::Dimension(format!("{n} layers requested of {}", scores.rows())));
    }
    let mut picked: Vec<usize> = argsort_desc(&layer_scores(scores)).into_iter().take(n).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// The `c` highest-scoring neurons of `layer`, best first, ties to the lower index.
pub fn top_neurons(scores: &Tensor<f64>, layer: usize, c: usize) -> Result<Vec<usize>> {
    if layer >= scores.rows() {
        return Err(PktError::Dimension(format!("layer {layer} of {}", scores.rows())));
    }
    if c > scores.cols() {
        return Err(PktError::Dimension(format!("{c} neurons requested of {}", scores.cols())));
    }
    Ok(argsort_desc(scores.row(layer)).into_iter().take(c).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutEntry {
    pub token: u32,
    pub logit: f64,
}

/// Tokens ranked by raw `E_u · v`, ties to the lower token id.
pub fn logit_lens_readout<T: Real>(params: &TransformerParams<T>, v: &[T], k: usize) -> Result<Vec<ReadoutEntry>> {
    let vocab = params.config.vocab;
    if k > vocab {
        return Err(PktError::Dimension(format!("top-{k} of vocabulary {vocab}")));
    }
    if v.len() != params.config.d_model {
        return Err(PktError::shape("logit_lens_readout", format!("vector of length {}", v.len())));
    }
    let logits: Vec<f64> =
        (0..vocab).map(|b| params.unembed.row(b).iter().zip(v).map(|(&e, &x)| e.as_f64() * x.as_f64()).sum()).collect();
    Ok(argsort_desc(&logits).into_iter().take(k).map(|t| ReadoutEntry { token: t as u32, logit: logits[t] }).collect())
}
