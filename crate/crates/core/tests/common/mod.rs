#![allow(dead_code)]

use pktlab::analysis::linear_cka;
use pktlab::attribution::{score_matrices, LensMode};
use pktlab::data::Example;
use pktlab::model::{
    attn_value_output_sum, ffn_neuron_sum, forward, lm_loss, loss_graph, ModelConfig, ParamVars, TransformerParams,
    NORM_EPS,
};
use pktlab::numerics::{least_squares_map, matmul, svd, truncate_svd, Tape};
use pktlab::transfer::{attach_lora, laten_gradients, laten_locate, lora_init, Hypernetwork, LatenOptions, LoraInit};
use pktlab::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(layers: usize, d: usize, n: usize, heads: usize, vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig { layers, d_model: d, n_ffn: n, heads, vocab, max_len: 8, seed }
}

/// Seeded model with weights of standard deviation `std` and a non-trivial final gain.
pub fn random_model<T: Real>(cfg: ModelConfig, std: f64) -> TransformerParams<T> {
    let mut p = TransformerParams::<T>::init(cfg).unwrap();
    let mut r = rng(cfg.seed ^ 0xabcdef);
    for (name, t) in p.named_mut() {
        let shape = t.shape().to_vec();
        *t = if name == "final_norm" {
            Tensor::randn(&shape, 0.3, &mut r).map(|v| v + T::one())
        } else {
            Tensor::randn(&shape, std, &mut r)
        };
    }
    p
}

pub fn random_examples(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Example {
            prompt: (0..len).map(|_| r.gen_range(0..vocab as u32)).collect(),
            answer: r.gen_range(0..vocab as u32),
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-30)
}

fn f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

pub fn decomposition_shapes() -> [(usize, usize, usize, usize); 3] {
    [(1, 8, 16, 2), (2, 16, 32, 4), (3, 24, 48, 3)]
}

/// Worst relative error of both neuron sums against the traced sublayer outputs.
pub fn decomposition_error(seed: u64, shape: (usize, usize, usize, usize)) -> f64 {
    let (l, d, n, h) = shape;
    let p: TransformerParams<f32> = random_model(config(l, d, n, h, 20, seed), 0.3);
    let tokens: Vec<u32> = random_examples(20, 1, 6, seed + 100)[0].prompt.clone();
    let trace = forward(&p, &tokens, true).unwrap().trace.unwrap();
    let mut worst = 0.0f64;
    for layer in 0..l {
        let lt = &trace.layers[layer];
        for pos in 0..tokens.len() {
            let f = ffn_neuron_sum(&p, &trace, layer, pos).unwrap();
            let a = attn_value_output_sum(&p, &trace, layer, pos).unwrap();
            worst = worst.max(rel(&f64s(&f), &f64s(lt.ffn_out.row(pos))));
            worst = worst.max(rel(&f64s(&a), &f64s(lt.attn_out.row(pos))));
        }
    }
    worst
}

pub fn criterion_decomposition() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        for shape in decomposition_shapes() {
            worst = worst.max(decomposition_error(seed, shape));
        }
    }
    Outcome::new(worst <= 1e-5, format!("max relative error {worst:.2e} over 10 seeds x 3 shapes"))
}

fn lens_log_prob<T: Real>(p: &TransformerParams<T>, x: &[f64], target: usize) -> f64 {
    let d = x.len() as f64;
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / d + NORM_EPS).sqrt();
    let logits: Vec<f64> = (0..p.config.vocab)
        .map(|b| {
            (0..x.len()).map(|r| p.unembed.get(b, r).as_f64() * p.final_norm.data()[r].as_f64() * x[r] / rms).sum()
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits[target] - lse
}

/// Per-neuron loop: add each neuron's vector to the stream it reads and
/// measure the change of the answer's log-probability.
pub fn naive_scores<T: Real>(p: &TransformerParams<T>, set: &[Example]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = p.config;
    let mut ffn = vec![vec![0.0; cfg.n_ffn]; cfg.layers];
    let mut mhsa = vec![vec![0.0; cfg.d_model]; cfg.layers];
    for ex in set {
        let trace = forward(p, &ex.prompt, true).unwrap().trace.unwrap();
        let pos = ex.prompt.len() - 1;
        let target = ex.answer as usize;
        for l in 0..cfg.layers {
            let lt = &trace.layers[l];
            let w = &p.layers[l];
            let cases = [
                (f64s(lt.h_mid.row(pos)), f64s(lt.coeff.row(pos)), &w.w_down, &mut ffn[l]),
                (f64s(lt.h_in.row(pos)), f64s(lt.z.row(pos)), &w.wo, &mut mhsa[l]),
            ];
            for (base, coeff, mat, out) in cases {
                let before = lens_log_prob(p, &base, target);
                for k in 0..coeff.len() {
                    let moved: Vec<f64> =
                        (0..base.len()).map(|r| base[r] + coeff[k] * mat.get(r, k).as_f64()).collect();
                    out[k] += lens_log_prob(p, &moved, target) - before;
                }
            }
        }
    }
    (ffn, mhsa)
}

pub fn attribution_gap(seed: u64, shape: (usize, usize, usize, usize)) -> f64 {
    let (l, d, n, h) = shape;
    let p: TransformerParams<f32> = random_model(config(l, d, n, h, 24, seed), 0.3);
    let set = random_examples(24, 4, 4, seed + 7);
    let fast = score_matrices(&p, &set, LensMode::FinalNorm).unwrap();
    let (ffn, mhsa) = naive_scores(&p, &set);
    let mut worst = 0.0f64;
    for layer in 0..l {
        for (k, v) in ffn[layer].iter().enumerate() {
            worst = worst.max((fast.ffn.get(layer, k) - v).abs() / v.abs().max(1.0));
        }
        for (k, v) in mhsa[layer].iter().enumerate() {
            worst = worst.max((fast.mhsa.get(layer, k) - v).abs() / v.abs().max(1.0));
        }
    }
    worst
}

/// A model whose FFN neuron 0 and attention neuron 0 of every layer write the zero vector.
pub fn zero_neuron_scores() -> Vec<f64> {
    let mut p: TransformerParams<f32> = random_model(config(2, 16, 32, 2, 24, 3), 0.3);
    for l in 0..2 {
        let d = p.config.d_model;
        p.layers[l].w_down.set_col(0, &vec![0.0; d]);
        p.layers[l].wo.set_col(0, &vec![0.0; d]);
    }
    let s = score_matrices(&p, &random_examples(24, 4, 4, 9), LensMode::FinalNorm).unwrap();
    (0..2).flat_map(|l| [s.ffn.get(l, 0), s.mhsa.get(l, 0)]).collect()
}

pub fn criterion_attribution() -> Outcome {
    let shapes = [(1, 8, 16, 2), (2, 16, 32, 4), (2, 12, 32, 3)];
    let mut worst = 0.0f64;
    for (i, shape) in shapes.into_iter().enumerate() {
        worst = worst.max(attribution_gap(i as u64, shape));
    }
    let zeros = zero_neuron_scores();
    let exact = zeros.iter().all(|&v| v == 0.0);
    Outcome::new(worst <= 1e-6 && exact, format!("max gap to loop oracle {worst:.2e}; zero-vector scores {zeros:?}"))
}

fn residual(el: &Tensor<f64>, es: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    es.sub(&matmul(el, w).unwrap()).unwrap().frobenius_norm()
}

/// `(normal-equation residual, worst margin over perturbations)` for one random problem.
pub fn least_squares_check(seed: u64, rows: usize, dl: usize, ds: usize) -> (f64, f64) {
    let mut r = rng(seed);
    let el = Tensor::<f64>::randn(&[rows, dl], 1.0, &mut r);
    let es = Tensor::<f64>::randn(&[rows, ds], 1.0, &mut r);
    let w = least_squares_map(&el, &es).unwrap();
    let err = es.sub(&matmul(&el, &w).unwrap()).unwrap();
    let normal = matmul(&el.transpose(), &err).unwrap().frobenius_norm();
    let scale = matmul(&el.transpose(), &es).unwrap().frobenius_norm();
    let best = residual(&el, &es, &w);
    let mut margin = f64::INFINITY;
    for _ in 0..100 {
        let eps = 10f64.powf(r.gen_range(-4.0..0.0));
        let cand = w.add(&Tensor::randn(&[dl, ds], eps, &mut r)).unwrap();
        margin = margin.min(residual(&el, &es, &cand) - best);
    }
    (normal / scale, margin)
}

pub fn criterion_closed_form() -> Outcome {
    let mut worst_res = 0.0f64;
    let mut worst_margin = f64::INFINITY;
    for (seed, (rows, dl, ds)) in [(64, 16, 8), (128, 32, 12), (40, 8, 8)].into_iter().enumerate() {
        let (res, margin) = least_squares_check(seed as u64, rows, dl, ds);
        worst_res = worst_res.max(res);
        worst_margin = worst_margin.min(margin);
    }
    Outcome::new(
        worst_res <= 1e-4 && worst_margin > 0.0,
        format!("normal-equation residual {worst_res:.2e}; smallest perturbation margin {worst_margin:.2e}"),
    )
}

pub struct SvdChecks {
    pub pissa_gap: f64,
    pub drift_gap: f64,
    pub truncation_margin: f64,
}

pub fn svd_lora_checks(seed: u64) -> SvdChecks {
    let mut r = rng(seed);
    let (n, m, rank) = (24, 16, 4);
    let w = Tensor::<f32>::randn(&[n, m], 0.5, &mut r);
    let (base, b, a) = lora_init(LoraInit::Pissa, &w, None, rank, &mut r).unwrap();
    let pissa_gap = base.add(&matmul(&b, &a).unwrap()).unwrap().max_abs_diff(&w).as_f64();

    let we = Tensor::<f32>::randn(&[n, m], 0.5, &mut r);
    let (base, b, a) = lora_init(LoraInit::Seeking, &w, Some(&we), rank, &mut r).unwrap();
    let merged = base.add(&matmul(&b, &a).unwrap()).unwrap();
    let drift = merged.cast::<f64>().sub(&w.cast()).unwrap().frobenius_norm();
    let we64: Tensor<f64> = we.cast();
    let tail = svd(&we64).unwrap().sigma[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let drift_gap = (drift - tail).abs();

    let (bt, at) = truncate_svd(&svd(&we64).unwrap(), rank).unwrap();
    let best = we64.sub(&matmul(&bt, &at).unwrap()).unwrap().frobenius_norm();
    let mut margin = f64::INFINITY;
    for i in 0..200 {
        let (bc, ac) = if i % 2 == 0 {
            (Tensor::randn(&[n, rank], 0.5, &mut r), Tensor::randn(&[rank, m], 0.5, &mut r))
        } else {
            let eps = 10f64.powf(r.gen_range(-3.0..0.0));
            (
                bt.add(&Tensor::randn(&[n, rank], eps, &mut r)).unwrap(),
                at.add(&Tensor::randn(&[rank, m], eps, &mut r)).unwrap(),
            )
        };
        let err = we64.sub(&matmul(&bc, &ac).unwrap()).unwrap().frobenius_norm();
        margin = margin.min(err - best);
    }
    SvdChecks { pissa_gap, drift_gap, truncation_margin: margin }
}

pub fn criterion_svd_lora() -> Outcome {
    let checks: Vec<SvdChecks> = (0..3).map(svd_lora_checks).collect();
    let pissa = checks.iter().map(|c| c.pissa_gap).fold(0.0, f64::max);
    let drift = checks.iter().map(|c| c.drift_gap).fold(0.0, f64::max);
    let margin = checks.iter().map(|c| c.truncation_margin).fold(f64::INFINITY, f64::min);
    Outcome::new(
        pissa <= 1e-5 && drift <= 1e-5 && margin >= 0.0,
        format!("pissa |BA+W_res-W| {pissa:.2e}; seeking drift gap {drift:.2e}; truncation margin {margin:.2e}"),
    )
}

/// Worst per-tensor relative error between analytic and central-difference gradients.
pub fn fd_error(
    tensors: &[(String, Tensor<f64>)],
    analytic: &dyn Fn(&str) -> Option<Tensor<f64>>,
    loss: &dyn Fn(&str, usize, f64) -> f64,
) -> (f64, String) {
    let h = 1e-6;
    let mut worst = (0.0, String::new());
    for (name, t) in tensors {
        let g = analytic(name).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let (mut diff, mut nf, mut na) = (0.0, 0.0, 0.0);
        for i in 0..t.len() {
            let fd = (loss(name, i, h) - loss(name, i, -h)) / (2.0 * h);
            let an = g.data()[i];
            diff += (fd - an).powi(2);
            nf += fd * fd;
            na += an * an;
        }
        let e = diff.sqrt() / f64::max(nf, na).sqrt().max(1e-7);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

fn perturbed(t: &Tensor<f64>, i: usize, h: f64) -> Tensor<f64> {
    let mut t = t.clone();
    t.data_mut()[i] += h;
    t
}

pub struct GradPair {
    pub large: TransformerParams<f64>,
    pub small: TransformerParams<f64>,
    pub batch: Vec<Example>,
}

pub fn grad_pair() -> GradPair {
    GradPair {
        large: random_model(config(2, 8, 16, 2, 12, 1), 0.4),
        small: random_model(config(2, 4, 8, 2, 12, 2), 0.4),
        batch: random_examples(12, 3, 4, 5),
    }
}

pub fn hyper_grad_error() -> (f64, String) {
    let g = grad_pair();
    let opts = LatenOptions { fraction: 0.25, ..LatenOptions::default() };
    let (delta, slots) = laten_locate(&g.large, &g.small, &g.batch[0], &opts).unwrap();
    let mut hyper = Hypernetwork::<f64>::init(8, 4, 6, 3).unwrap();
    let mut r = rng(11);
    for m in hyper.mlps.iter_mut() {
        m.w2 = Tensor::randn(m.w2.shape(), 0.5, &mut r);
    }
    let lambda = 0.7;
    let (_, grads) = laten_gradients(&hyper, &g.small, &delta, &slots, &g.batch, lambda).unwrap();
    let tensors: Vec<(String, Tensor<f64>)> = hyper.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let loss = |name: &str, i: usize, h: f64| {
        let mut hp = hyper.clone();
        for (n, t) in hp.named_mut() {
            if n == name {
                *t = perturbed(t, i, h);
            }
        }
        laten_gradients(&hp, &g.small, &delta, &slots, &g.batch, lambda).unwrap().0.total
    };
    fd_error(&tensors, &|n| grads.get(n).cloned(), &loss)
}

pub fn model_grad_error() -> (f64, String) {
    let g = grad_pair();
    let p = &g.small;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(p, &mut tape, true);
    let l = loss_graph(&mut tape, &p.config, &pv, &g.batch).unwrap();
    let grads = tape.backward(l).unwrap();
    let tensors: Vec<(String, Tensor<f64>)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let loss = |name: &str, i: usize, h: f64| {
        let mut q = p.clone();
        for (n, t) in q.named_mut() {
            if n == name {
                *t = perturbed(t, i, h);
            }
        }
        lm_loss(&q, &g.batch).unwrap()
    };
    fd_error(&tensors, &|n| grads.get(n).cloned(), &loss)
}

pub fn lora_grad_error() -> (f64, String) {
    let g = grad_pair();
    let mut m = attach_lora(&g.small, LoraInit::Random, 2, None, 4).unwrap();
    let mut r = rng(12);
    for f in m.factors.iter_mut() {
        f.b = Tensor::randn(f.b.shape(), 0.3, &mut r);
    }
    let mut tape = Tape::new();
    let pv = m.bind(&mut tape).unwrap();
    let l = loss_graph(&mut tape, &m.base.config, &pv, &g.batch).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut tensors = Vec::new();
    for f in &m.factors {
        tensors.push((format!("lora.{}.{}.b", f.layer, f.kind.name()), f.b.clone()));
        tensors.push((format!("lora.{}.{}.a", f.layer, f.kind.name()), f.a.clone()));
    }
    let loss = |name: &str, i: usize, h: f64| {
        let mut q = m.clone();
        for f in q.factors.iter_mut() {
            let p = format!("lora.{}.{}", f.layer, f.kind.name());
            if name == format!("{p}.b") {
                f.b = perturbed(&f.b, i, h);
            } else if name == format!("{p}.a") {
                f.a = perturbed(&f.a, i, h);
            }
        }
        lm_loss(&q.merged(), &g.batch).unwrap()
    };
    fd_error(&tensors, &|n| grads.get(n).cloned(), &loss)
}

pub fn criterion_gradients() -> Outcome {
    let checks = [("hypernetwork", hyper_grad_error()), ("model", model_grad_error()), ("lora", lora_grad_error())];
    let pass = checks.iter().all(|(_, (e, _))| *e < 1e-3);
    let detail =
        checks.iter().map(|(what, (e, name))| format!("{what} {e:.1e} ({name})")).collect::<Vec<_>>().join("; ");
    Outcome::new(pass, format!("worst relative error: {detail}"))
}

pub fn orthogonal(n: usize, seed: u64) -> Tensor<f64> {
    svd(&Tensor::<f64>::randn(&[n, n], 1.0, &mut rng(seed))).unwrap().u
}

pub struct CkaChecks {
    pub self_gap: f64,
    pub orthogonal_gap: f64,
    pub scaling_gap: f64,
    pub symmetry_gap: f64,
    pub random_baseline: f64,
}

pub fn cka_checks(seed: u64) -> CkaChecks {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(&[60, 10], 1.0, &mut r);
    let mix = Tensor::<f64>::randn(&[10, 7], 1.0, &mut r);
    let y = matmul(&x, &mix).unwrap().add(&Tensor::randn(&[60, 7], 0.5, &mut r)).unwrap();
    let base = linear_cka(&x, &y).unwrap();
    let xq = matmul(&x, &orthogonal(10, seed + 1)).unwrap();
    let big = Tensor::<f64>::randn(&[1000, 10], 1.0, &mut r);
    let other = Tensor::<f64>::randn(&[1000, 10], 1.0, &mut r);
    CkaChecks {
        self_gap: (linear_cka(&x, &x).unwrap() - 1.0).abs(),
        orthogonal_gap: (linear_cka(&xq, &y).unwrap() - base).abs(),
        scaling_gap: (linear_cka(&x.scale(3.7), &y.scale(0.01)).unwrap() - base).abs(),
        symmetry_gap: (linear_cka(&y, &x).unwrap() - base).abs(),
        random_baseline: linear_cka(&big, &other).unwrap(),
    }
}

pub fn criterion_cka() -> Outcome {
    let c: Vec<CkaChecks> = (0..5).map(cka_checks).collect();
    let max = |f: fn(&CkaChecks) -> f64| c.iter().map(f).fold(0.0, f64::max);
    let (s, o, k, y, b) = (
        max(|c| c.self_gap),
        max(|c| c.orthogonal_gap),
        max(|c| c.scaling_gap),
        max(|c| c.symmetry_gap),
        max(|c| c.random_baseline),
    );
    Outcome::new(
        s <= 1e-6 && o <= 1e-6 && k <= 1e-6 && y <= 1e-9 && b < 0.2,
        format!("self {s:.1e}, orthogonal {o:.1e}, scaling {k:.1e}, symmetry {y:.1e}, random baseline {b:.3}"),
    )
}
