use crate::data::Example;
use crate::error::{PktError, Result};
use crate::numerics::autodiff::attention_forward;
use crate::numerics::{Real, Segments, Tape, Tensor, Var};

use super::params::{ModelConfig, TransformerParams};
use super::NORM_EPS;

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles for every model weight. Callers choose how each is
/// produced: a plain leaf, or a composite such as `base + B·A`.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embed: Var,
    pub unembed: Var,
    pub final_norm: Var,
    pub layers: Vec<LayerVars>,
}

impl ParamVars {
    /// Binds each weight through `f(tape, name, tensor)`.
    pub fn bind_with<T: Real>(
        params: &TransformerParams<T>,
        tape: &mut Tape<T>,
        mut f: impl FnMut(&mut Tape<T>, &str, &Tensor<T>) -> Result<Var>,
    ) -> Result<Self> {
        let embed = f(tape, "embed", &params.embed)?;
        let unembed = f(tape, "unembed", &params.unembed)?;
        let mut layers = Vec::with_capacity(params.layers.len());
        for (l, p) in params.layers.iter().enumerate() {
            let mut g = |n: &str, t: &Tensor<T>| f(tape, &format!("layers.{l}.{n}"), t);
            layers.push(LayerVars {
                wq: g("wq", &p.wq)?,
                wk: g("wk", &p.wk)?,
                wv: g("wv", &p.wv)?,
                wo: g("wo", &p.wo)?,
                w_up: g("w_up", &p.w_up)?,
                w_down: g("w_down", &p.w_down)?,
            });
        }
        let final_norm = f(tape, "final_norm", &params.final_norm)?;
        Ok(ParamVars { embed, unembed, final_norm, layers })
    }

    /// All weights as named trainable leaves (`trainable`) or as constants.
    pub fn bind<T: Real>(params: &TransformerParams<T>, tape: &mut Tape<T>, trainable: bool) -> Self {
        Self::bind_with(params, tape, |tape, name, t| {
            Ok(if trainable { tape.param(name, t.clone()) } else { tape.constant(t.clone()) })
        })
        .expect("plain binding cannot fail")
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNodes {
    pub h_in: Var,
    pub attn_in: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub z: Var,
    pub attn_out: Var,
    pub h_mid: Var,
    pub ffn_in: Var,
    pub coeff: Var,
    pub ffn_out: Var,
    pub h_out: Var,
}

pub struct GraphOut {
    /// Logits for the requested rows (all rows when none were requested).
    pub logits: Var,
    pub(crate) layers: Vec<LayerNodes>,
    pub(crate) hidden: Var,
}

/// Records the forward computation over packed sequences.
///
/// `tokens` holds every sequence back to back; `segments` gives each
/// sequence's `(start, len)`. Attention never crosses a segment boundary.
pub fn build_graph<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    pv: &ParamVars,
    tokens: &[u32],
    segments: &Segments,
    logit_rows: Option<&[usize]>,
) -> Result<GraphOut> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab) {
        return Err(PktError::Token { token: bad, vocab: config.vocab });
    }
    if let Some(&(_, len)) = segments.iter().find(|s| s.1 > config.max_len) {
        return Err(PktError::SequenceLength { len, max: config.max_len });
    }
    if tokens.is_empty() {
        return Err(PktError::shape("forward", "empty token sequence"));
    }
    let eps = T::of(NORM_EPS);
    let ids = tokens.iter().map(|&t| t as usize).collect();
    let mut h = tape.gather_rows(pv.embed, ids)?;
    let mut layers = Vec::with_capacity(pv.layers.len());
    for lv in &pv.layers {
        let h_in = h;
        let attn_in = tape.rms_norm(h_in, eps);
        let q = tape.matmul_nt(attn_in, lv.wq)?;
        let k = tape.matmul_nt(attn_in, lv.wk)?;
        let v = tape.matmul_nt(attn_in, lv.wv)?;
        let z = tape.attention(q, k, v, config.heads, segments.clone())?;
        let attn_out = tape.matmul_nt(z, lv.wo)?;
        let h_mid = tape.add(h_in, attn_out)?;
        let ffn_in = tape.rms_norm(h_mid, eps);
        let pre = tape.matmul_nt(ffn_in, lv.w_up)?;
        let coeff = tape.gelu(pre);
        let ffn_out = tape.matmul_nt(coeff, lv.w_down)?;
        let h_out = tape.add(h_mid, ffn_out)?;
        layers.push(LayerNodes { h_in, attn_in, q, k, v, z, attn_out, h_mid, ffn_in, coeff, ffn_out, h_out });
        h = h_out;
    }
    let normed = tape.rms_norm(h, eps);
    let normed = tape.mul_row(normed, pv.final_norm)?;
    let selected = match logit_rows {
        Some(rows) => tape.gather_rows(normed, rows.to_vec())?,
        None => normed,
    };
    let logits = tape.matmul_nt(selected, pv.unembed)?;
    Ok(GraphOut { logits, layers, hidden: h })
}

/// Per-layer activations of one sequence; row `i` is position `i`.
#[derive(Clone, Debug)]
pub struct LayerTrace<T = f32> {
    /// Residual stream entering the layer, `h^{l-1}`.
    pub h_in: Tensor<T>,
    /// Normalized attention input.
    pub attn_in: Tensor<T>,
    /// Value vectors `W_v x̂_n`.
    pub v: Tensor<T>,
    /// Concatenated head outputs before `W_o`.
    pub z: Tensor<T>,
    pub attn_out: Tensor<T>,
    /// `h^{l-1} + A^l`, the stream the FFN reads.
    pub h_mid: Tensor<T>,
    /// Normalized FFN input, computed from `h^{l-1} + A^l`.
    pub ffn_in: Tensor<T>,
    /// FFN coefficients `c^l_{i,k}`.
    pub coeff: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub h_out: Tensor<T>,
    /// Attention weights, `heads × len × len`, row `i` holding position `i`'s
    /// distribution over positions `0..=i`.
    pub probs: Vec<T>,
}

impl<T: Real> LayerTrace<T> {
    pub fn alpha(&self, head: usize, i: usize, n: usize) -> T {
        let len = self.h_in.rows();
        self.probs[head * len * len + i * len + n]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T = f32> {
    pub layers: Vec<LayerTrace<T>>,
    /// Residual stream after the last layer, `h^L`.
    pub final_hidden: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn layer(&self, layer: usize, position: usize) -> Result<&LayerTrace<T>> {
        let lt = self
            .layers
            .get(layer)
            .ok_or_else(|| PktError::Trace(format!("layer {layer} not recorded ({} layers)", self.layers.len())))?;
        if position >= lt.h_in.rows() {
            return Err(PktError::Trace(format!("position {position} not recorded (length {})", lt.h_in.rows())));
        }
        Ok(lt)
    }

    pub fn len(&self) -> usize {
        self.final_hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ForwardOutput<T = f32> {
    /// `len × vocab`
    pub logits: Tensor<T>,
    pub trace: Option<ForwardTrace<T>>,
}

/// Single-sequence forward pass.
pub fn forward<T: Real>(params: &TransformerParams<T>, tokens: &[u32], trace: bool) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(params, &mut tape, false);
    let segments = vec![(0, tokens.len())];
    let g = build_graph(&mut tape, &params.config, &pv, tokens, &segments, None)?;
    let logits = tape.value(g.logits).clone();
    let trace = trace.then(|| {
        let layers = g
            .layers
            .iter()
            .map(|n| {
                let val = |v: Var| tape.value(v).clone();
                let (_, probs) = attention_forward(
                    tape.value(n.q),
                    tape.value(n.k),
                    tape.value(n.v),
                    params.config.heads,
                    &segments,
                );
                LayerTrace {
                    h_in: val(n.h_in),
                    attn_in: val(n.attn_in),
                    v: val(n.v),
                    z: val(n.z),
                    attn_out: val(n.attn_out),
                    h_mid: val(n.h_mid),
                    ffn_in: val(n.ffn_in),
                    coeff: val(n.coeff),
                    ffn_out: val(n.ffn_out),
                    h_out: val(n.h_out),
                    probs,
                }
            })
            .collect();
        ForwardTrace { layers, final_hidden: tape.value(g.hidden).clone(), logits: logits.clone() }
    });
    Ok(ForwardOutput { logits, trace })
}

/// `F^l_i` rebuilt as `Σ_k c^l_{i,k} · down_k`.
pub fn ffn_neuron_sum<T: Real>(
    params: &TransformerParams<T>,
    trace: &ForwardTrace<T>,
    layer: usize,
    position: usize,
) -> Result<Vec<T>> {
    let lt = trace.layer(layer, position)?;
    let w_down = &params.layers[layer].w_down;
    let (d, n) = (w_down.rows(), w_down.cols());
    let c = lt.coeff.row(position);
    let mut out = vec![T::zero(); d];
    for k in 0..n {
        if c[k] == T::zero() {
            continue;
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += c[k] * w_down.data()[r * n + k];
        }
    }
    Ok(out)
}

/// `A^l_i` rebuilt as `Σ_heads Σ_n α · W_o(W_v x̂_n)`, one head block at a time.
pub fn attn_value_output_sum<T: Real>(
    params: &TransformerParams<T>,
    trace: &ForwardTrace<T>,
    layer: usize,
    position: usize,
) -> Result<Vec<T>> {
    let lt = trace.layer(layer, position)?;
    let wo = &params.layers[layer].wo;
    let d = wo.rows();
    let heads = params.config.heads;
    let dh = d / heads;
    let mut out = vec![T::zero(); d];
    for h in 0..heads {
        for n in 0..=position {
            let a = lt.alpha(h, position, n);
            let vn = &lt.v.row(n)[h * dh..(h + 1) * dh];
            for (r, o) in out.iter_mut().enumerate() {
                let wrow = &wo.row(r)[h * dh..(h + 1) * dh];
                let proj: T = wrow.iter().zip(vn).map(|(&w, &x)| w * x).sum();
                *o += a * proj;
            }
        }
    }
    Ok(out)
}

pub(crate) struct Packed {
    pub tokens: Vec<u32>,
    pub segments: Segments,
    /// Row of each example's last prompt token.
    pub answer_rows: Vec<usize>,
    pub targets: Vec<usize>,
}

pub(crate) fn pack(batch: &[Example]) -> Packed {
    let mut p = Packed {
        tokens: Vec::new(),
        segments: Vec::with_capacity(batch.len()),
        answer_rows: Vec::with_capacity(batch.len()),
        targets: Vec::with_capacity(batch.len()),
    };
    for ex in batch {
        let start = p.tokens.len();
        p.tokens.extend_from_slice(&ex.prompt);
        p.segments.push((start, ex.prompt.len()));
        p.answer_rows.push(start + ex.prompt.len() - 1);
        p.targets.push(ex.answer as usize);
    }
    p
}

/// Records the mean answer-position loss over `batch` with the given weights.
pub fn loss_graph<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, pv: &ParamVars, batch: &[Example]) -> Result<Var> {
    if batch.is_empty() {
        return Err(PktError::Data("empty batch".into()));
    }
    if let Some(ex) = batch.iter().find(|e| e.prompt.is_empty()) {
        return Err(PktError::Data(format!("empty prompt for answer {}", ex.answer)));
    }
    let p = pack(batch);
    let g = build_graph(tape, config, pv, &p.tokens, &p.segments, Some(&p.answer_rows))?;
    tape.cross_entropy(g.logits, p.targets)
}

/// Mean negative log-likelihood of each answer token at its prompt's last position.
pub fn lm_loss<T: Real>(params: &TransformerParams<T>, batch: &[Example]) -> Result<T> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(params, &mut tape, false);
    let loss = loss_graph(&mut tape, &params.config, &pv, batch)?;
    Ok(tape.value(loss).item())
}

const PREDICT_CHUNK: usize = 256;

/// Greedy next token after each prompt; ties go to the lower id.
pub fn predict<T: Real>(params: &TransformerParams<T>, prompts: &[Vec<u32>]) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(PREDICT_CHUNK) {
        let batch: Vec<Example> = chunk.iter().map(|p| Example { prompt: p.clone(), answer: 0 }).collect();
        if batch.iter().any(|e| e.prompt.is_empty()) {
            return Err(PktError::Data("empty prompt".into()));
        }
        let p = pack(&batch);
        let mut tape = Tape::new();
        let pv = ParamVars::bind(params, &mut tape, false);
        let g = build_graph(&mut tape, &params.config, &pv, &p.tokens, &p.segments, Some(&p.answer_rows))?;
        let logits = tape.value(g.logits);
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

/// Exact-match accuracy of greedy answers, in `[0, 1]`.
pub fn accuracy<T: Real>(params: &TransformerParams<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(PktError::Data("accuracy over an empty set".into()));
    }
    let prompts: Vec<Vec<u32>> = examples.iter().map(|e| e.prompt.clone()).collect();
    let preds = predict(params, &prompts)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.answer).count();
    Ok(hits as f64 / examples.len() as f64)
}
