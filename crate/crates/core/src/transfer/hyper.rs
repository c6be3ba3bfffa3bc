use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{score_matrices, LensMode, NeuronKind};
use crate::container::Container;
use crate::data::Example;
use crate::error::{PktError, Result};
use crate::extraction::{extract, DimReduction, ExtractedDelta, ExtractionPlan, LayerStrategy, NeuronStrategy};
use crate::model::{accuracy, loss_graph, ParamVars, TransformerParams};
use crate::numerics::{AdamW, Gradients, Real, Tape, Tensor, Var};

use super::inject::{inject, target_slots, AlignedBlock, AlignedDelta, SlotPairing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FfnKey,
    FfnValue,
    MhsaKey,
    MhsaValue,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::FfnKey, Role::FfnValue, Role::MhsaKey, Role::MhsaValue];

    pub fn name(self) -> &'static str {
        match self {
            Role::FfnKey => "ffn_key",
            Role::FfnValue => "ffn_value",
            Role::MhsaKey => "mhsa_key",
            Role::MhsaValue => "mhsa_value",
        }
    }

    fn of(kind: NeuronKind) -> (Role, Role) {
        match kind {
            NeuronKind::Ffn => (Role::FfnKey, Role::FfnValue),
            NeuronKind::Mhsa => (Role::MhsaKey, Role::MhsaValue),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// `x ↦ relu(x·W1)·W2`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypernetwork<T = f32> {
    /// Indexed by [`Role`] order.
    pub mlps: Vec<Mlp<T>>,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl<T: Real> Hypernetwork<T> {
    /// `W1 ~ N(0, 1/d_in)`, `W2 = 0`: the initial mapping is exactly zero.
    pub fn init(d_in: usize, d_out: usize, d_hidden: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 || d_hidden == 0 {
            return Err(PktError::Dimension("hypernetwork widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_in as f64).sqrt();
        let mlps = Role::ALL
            .iter()
            .map(|_| Mlp { w1: Tensor::randn(&[d_in, d_hidden], std, &mut rng), w2: Tensor::zeros(&[d_hidden, d_out]) })
            .collect();
        Ok(Hypernetwork { mlps, d_in, d_hidden, d_out })
    }

    pub fn mlp(&self, role: Role) -> &Mlp<T> {
        &self.mlps[role.index()]
    }

    pub fn apply(&self, role: Role, x: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.mlp(role);
        let h = crate::numerics::matmul(x, &m.w1)?.map(|v| v.max(T::zero()));
        crate::numerics::matmul(&h, &m.w2)
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        Role::ALL
            .iter()
            .zip(&self.mlps)
            .flat_map(|(r, m)| [(format!("hyper.{}.w1", r.name()), &m.w1), (format!("hyper.{}.w2", r.name()), &m.w2)])
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Role::ALL
            .iter()
            .zip(self.mlps.iter_mut())
            .flat_map(|(r, m)| {
                [(format!("hyper.{}.w1", r.name()), &mut m.w1), (format!("hyper.{}.w2", r.name()), &mut m.w2)]
            })
            .collect()
    }

    /// Target-width delta for an extraction, paired with its slots.
    pub fn map(&self, delta: &ExtractedDelta<T>, slots: &[Vec<usize>]) -> Result<AlignedDelta<T>> {
        let blocks = delta
            .blocks
            .iter()
            .zip(slots)
            .map(|(b, s)| {
                let (rk, rv) = Role::of(b.kind);
                Ok(AlignedBlock {
                    target_layer: b.target_layer,
                    kind: b.kind,
                    slots: s.clone(),
                    key: self.apply(rk, &b.key)?,
                    value: self.apply(rv, &b.value)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AlignedDelta { blocks })
    }

    pub fn cast<U: Real>(&self) -> Hypernetwork<U> {
        Hypernetwork {
            mlps: self.mlps.iter().map(|m| Mlp { w1: m.w1.cast(), w2: m.w2.cast() }).collect(),
            d_in: self.d_in,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
        }
    }
}

impl Hypernetwork<f32> {
    pub fn to_container(&self, provenance: serde_json::Value) -> Container {
        let mut c = Container::new(json!({
            "kind": "hypernetwork",
            "d_in": self.d_in,
            "d_hidden": self.d_hidden,
            "d_out": self.d_out,
            "provenance": provenance,
        }));
        for (name, t) in self.named() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let dim = |k: &str| -> Result<usize> {
            c.metadata
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| PktError::container(format!("metadata.{k}"), "missing or not an integer"))
        };
        let (d_in, d_hidden, d_out) = (dim("d_in")?, dim("d_hidden")?, dim("d_out")?);
        let mut mlps = Vec::new();
        for r in Role::ALL {
            let get = |part: &str, shape: [usize; 2]| -> Result<Tensor<f32>> {
                let name = format!("hyper.{}.{part}", r.name());
                let t = c.require(&name)?;
                if t.shape() != shape {
                    return Err(PktError::container(name, format!("shape {:?}, expected {shape:?}", t.shape())));
                }
                Ok(t.clone())
            };
            mlps.push(Mlp { w1: get("w1", [d_in, d_hidden])?, w2: get("w2", [d_hidden, d_out])? });
        }
        Ok(Hypernetwork { mlps, d_in, d_hidden, d_out })
    }
}

/// Loss terms of one alignment step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub lm_loss: f64,
    pub mse: f64,
    pub total: f64,
}

/// Records `params_s ⊕ hyper(extracted)` on the tape and returns the
/// weight handles plus every produced delta.
fn injected_graph<T: Real>(
    tape: &mut Tape<T>,
    hyper: &Hypernetwork<T>,
    params_s: &TransformerParams<T>,
    extracted: &ExtractedDelta<T>,
    slots: &[Vec<usize>],
) -> Result<(ParamVars, Vec<Var>)> {
    if extracted.dim() != hyper.d_in || params_s.config.d_model != hyper.d_out {
        return Err(PktError::shape(
            "laten_align_step",
            format!(
                "hypernetwork maps {}→{}, extraction width {}, target width {}",
                hyper.d_in,
                hyper.d_out,
                extracted.dim(),
                params_s.config.d_model
            ),
        ));
    }
    if slots.len() != extracted.blocks.len() {
        return Err(PktError::shape("laten_align_step", "one slot list per extracted block required"));
    }
    let hv: Vec<(Var, Var)> = Role::ALL
        .iter()
        .zip(&hyper.mlps)
        .map(|(r, m)| {
            (
                tape.param(format!("hyper.{}.w1", r.name()), m.w1.clone()),
                tape.param(format!("hyper.{}.w2", r.name()), m.w2.clone()),
            )
        })
        .collect();
    let mut pv = ParamVars::bind(params_s, tape, false);
    let mut deltas = Vec::new();
    for (b, s) in extracted.blocks.iter().zip(slots) {
        if b.target_layer >= pv.layers.len() {
            return Err(PktError::Index(format!("target layer {} of {}", b.target_layer, pv.layers.len())));
        }
        let (rk, rv) = Role::of(b.kind);
        let run = |tape: &mut Tape<T>, role: Role, x: &Tensor<T>| -> Result<Var> {
            let (w1, w2) = hv[role.index()];
            let x = tape.constant(x.clone());
            let h = tape.matmul(x, w1)?;
            let h = tape.relu(h);
            tape.matmul(h, w2)
        };
        let dk = run(tape, rk, &b.key)?;
        let dv = run(tape, rv, &b.value)?;
        let lv = &mut pv.layers[b.target_layer];
        let (key_slot, value_slot) = match b.kind {
            NeuronKind::Ffn => (&mut lv.w_up, &mut lv.w_down),
            NeuronKind::Mhsa => (&mut lv.wv, &mut lv.wo),
        };
        *key_slot = tape.scatter_rows(*key_slot, s.clone(), dk)?;
        *value_slot = tape.scatter_cols(*value_slot, s.clone(), dv)?;
        deltas.push(dk);
        deltas.push(dv);
    }
    Ok((pv, deltas))
}

/// Language-modeling loss of the injected model plus `λ·mean(ΔΘ²)`.
/// Returns the tape, the loss node and its terms; the small model stays constant.
pub(crate) fn align_objective<T: Real>(
    hyper: &Hypernetwork<T>,
    params_s: &TransformerParams<T>,
    extracted: &ExtractedDelta<T>,
    slots: &[Vec<usize>],
    batch: &[Example],
    lambda: f64,
) -> Result<(Tape<T>, Var, AlignStep)> {
    let mut tape = Tape::new();
    let (pv, deltas) = injected_graph(&mut tape, hyper, params_s, extracted, slots)?;
    let lm = loss_graph(&mut tape, &params_s.config, &pv, batch)?;
    let total_len: usize = deltas.iter().map(|&d| tape.value(d).len()).sum();
    let mut mse: Option<Var> = None;
    for &d in &deltas {
        let share = tape.value(d).len() as f64 / total_len as f64;
        let ms = tape.mean_square(d);
        let term = tape.scale(ms, T::of(share));
        mse = Some(match mse {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let mse = mse.ok_or_else(|| PktError::Plan("extraction has no blocks".into()))?;
    let reg = tape.scale(mse, T::of(lambda));
    let total = tape.add(lm, reg)?;
    let terms = AlignStep {
        lm_loss: tape.value(lm).item().as_f64(),
        mse: tape.value(mse).item().as_f64(),
        total: tape.value(total).item().as_f64(),
    };
    Ok((tape, total, terms))
}

/// Loss terms of the alignment objective and its gradient with respect to
/// every hypernetwork weight, keyed as in [`Hypernetwork::named`].
pub fn laten_gradients<T: Real>(
    hyper: &Hypernetwork<T>,
    params_s: &TransformerParams<T>,
    extracted: &ExtractedDelta<T>,
    slots: &[Vec<usize>],
    batch: &[Example],
    lambda: f64,
) -> Result<(AlignStep, Gradients<T>)> {
    let (tape, loss, terms) = align_objective(hyper, params_s, extracted, slots, batch, lambda)?;
    Ok((terms, tape.backward(loss)?))
}

/// One optimizer update of the hypernetwork only.
pub fn laten_align_step<T: Real>(
    hyper: &mut Hypernetwork<T>,
    opt: &mut AdamW<T>,
    params_s: &TransformerParams<T>,
    extracted: &ExtractedDelta<T>,
    slots: &[Vec<usize>],
    batch: &[Example],
    lambda: f64,
) -> Result<AlignStep> {
    let (tape, loss, terms) = align_objective(hyper, params_s, extracted, slots, batch, lambda)?;
    if !terms.total.is_finite() {
        return Err(PktError::NonFinite("alignment loss"));
    }
    let grads = tape.backward(loss)?;
    drop(tape);
    opt.step(hyper.named_mut(), &grads);
    Ok(terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatenOptions {
    pub steps: usize,
    /// Align examples per step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub d_hidden: usize,
    pub fraction: f64,
    pub pairing: SlotPairing,
    pub lens: LensMode,
    pub seed: u64,
}

impl Default for LatenOptions {
    fn default() -> Self {
        LatenOptions {
            steps: 4,
            batch: 16,
            lr: 1e-5,
            weight_decay: 0.05,
            lambda: 1.0,
            d_hidden: 64,
            fraction: 0.1,
            pairing: SlotPairing::RankMatched,
            lens: LensMode::FinalNorm,
            seed: 0,
        }
    }
}

impl LatenOptions {
    pub fn plan(&self) -> ExtractionPlan {
        ExtractionPlan {
            layer: LayerStrategy::Attribution,
            neuron: NeuronStrategy::Attribution,
            reduce: DimReduction::Hypernetwork,
            fraction: self.fraction,
            seed: self.seed,
        }
    }
}

/// Attribution-guided extraction from one example plus its target slots.
pub fn laten_locate<T: Real>(
    params_l: &TransformerParams<T>,
    params_s: &TransformerParams<T>,
    example: &Example,
    opts: &LatenOptions,
) -> Result<(ExtractedDelta<T>, Vec<Vec<usize>>)> {
    let one = std::slice::from_ref(example);
    let scores_l = score_matrices(params_l, one, opts.lens)?;
    let delta = extract(params_l, &params_s.config, &opts.plan(), Some(&scores_l), None)?;
    let scores_s = match opts.pairing {
        SlotPairing::RankMatched => Some(score_matrices(params_s, one, opts.lens)?),
        SlotPairing::IndexOrder => None,
    };
    let slots = delta
        .blocks
        .iter()
        .map(|b| {
            let source_width = match b.kind {
                NeuronKind::Ffn => params_l.config.n_ffn,
                NeuronKind::Mhsa => params_l.config.d_model,
            };
            target_slots(b, opts.pairing, &params_s.config, source_width, scores_s.as_ref())
        })
        .collect::<Result<_>>()?;
    Ok((delta, slots))
}

/// Extracts on the unseen `seed_example`, maps through the hypernetwork and
/// injects into a copy of the small model.
pub fn laten_infer_and_inject<T: Real>(
    hyper: &Hypernetwork<T>,
    params_l: &TransformerParams<T>,
    params_s: &TransformerParams<T>,
    seed_example: &Example,
    align_set: &[Example],
    opts: &LatenOptions,
) -> Result<(TransformerParams<T>, AlignedDelta<T>)> {
    if align_set.iter().any(|e| e.prompt == seed_example.prompt) {
        return Err(PktError::Protocol("inference seed example belongs to the align set".into()));
    }
    let (delta, slots) = laten_locate(params_l, params_s, seed_example, opts)?;
    let aligned = hyper.map(&delta, &slots)?;
    let (injected, _) = inject(params_s, &aligned)?;
    Ok((injected, aligned))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatenStepRecord {
    pub step: usize,
    pub terms: AlignStep,
    pub align_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatenReport {
    pub records: Vec<LatenStepRecord>,
    pub best_step: usize,
    pub best_align_acc: f64,
}

/// Alternates alignment steps with align-set evaluation of the injected
/// model and returns the best checkpoint (earliest on ties).
pub fn laten_train<T: Real>(
    params_l: &TransformerParams<T>,
    params_s: &TransformerParams<T>,
    extract_set: &[Example],
    align_set: &[Example],
    seed_example: &Example,
    opts: &LatenOptions,
) -> Result<(Hypernetwork<T>, LatenReport)> {
    if extract_set.is_empty() || align_set.is_empty() {
        return Err(PktError::Data("alignment needs extract and align examples".into()));
    }
    if opts.batch == 0 || opts.batch > align_set.len() {
        return Err(PktError::Data(format!("align batch {} with {} align examples", opts.batch, align_set.len())));
    }
    let mut hyper = Hypernetwork::init(params_l.config.d_model, params_s.config.d_model, opts.d_hidden, opts.seed)?;
    let mut opt = AdamW::new(opts.lr, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut best = (hyper.clone(), 0usize, f64::NEG_INFINITY);
    let mut records = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let ex = &extract_set[rng.gen_range(0..extract_set.len())];
        let (delta, slots) = laten_locate(params_l, params_s, ex, opts)?;
        let batch: Vec<Example> =
            sample(&mut rng, align_set.len(), opts.batch).into_iter().map(|i| align_set[i].clone()).collect();
        let terms = laten_align_step(&mut hyper, &mut opt, params_s, &delta, &slots, &batch, opts.lambda)?;
        let (injected, _) = laten_infer_and_inject(&hyper, params_l, params_s, seed_example, align_set, opts)?;
        let align_acc = accuracy(&injected, align_set)?;
        if align_acc > best.2 {
            best = (hyper.clone(), step, align_acc);
        }
        records.push(LatenStepRecord { step, terms, align_acc });
    }
    let (hyper, best_step, best_align_acc) = best;
    Ok((hyper, LatenReport { records, best_step, best_align_acc }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lm_loss, ModelConfig};

    fn pair() -> (TransformerParams<f64>, TransformerParams<f64>, Vec<Example>) {
        let large = ModelConfig { layers: 2, d_model: 8, n_ffn: 16, heads: 2, vocab: 12, max_len: 4, seed: 1 };
        let small = ModelConfig { layers: 2, d_model: 4, n_ffn: 8, heads: 2, vocab: 12, max_len: 4, seed: 2 };
        let data = (0..8).map(|i| Example { prompt: vec![i, 10, 11], answer: (i + 3) % 12 }).collect();
        (TransformerParams::init(large).unwrap(), TransformerParams::init(small).unwrap(), data)
    }

    fn opts() -> LatenOptions {
        LatenOptions { batch: 4, d_hidden: 6, fraction: 0.25, lr: 1e-2, ..LatenOptions::default() }
    }

    #[test]
    fn fresh_hypernetwork_is_a_no_op() {
        let (large, small, data) = pair();
        let hyper = Hypernetwork::init(8, 4, 6, 0).unwrap();
        let (delta, slots) = laten_locate(&large, &small, &data[0], &opts()).unwrap();
        let aligned = hyper.map(&delta, &slots).unwrap();
        assert!(aligned.values().iter().all(|&v| v == 0.0));
        let (step, _) = laten_gradients(&hyper, &small, &delta, &slots, &data[..4], 1.0).unwrap();
        assert_eq!(step.mse, 0.0);
        assert!((step.lm_loss - lm_loss(&small, &data[..4]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn training_leaves_both_models_untouched() {
        let (large, small, data) = pair();
        let (sum_l, sum_s) = (large.checksum(), small.checksum());
        let o = LatenOptions { batch: 3, ..opts() };
        let (_, report) = laten_train(&large, &small, &data[..4], &data[4..7], &data[7], &o).unwrap();
        assert_eq!((large.checksum(), small.checksum()), (sum_l, sum_s));
        assert_eq!(report.records.len(), 4);
        assert!(report.best_step >= 1);
        assert!(report.records.iter().all(|r| r.terms.total.is_finite()));
    }

    #[test]
    fn seed_example_may_not_come_from_the_align_set() {
        let (large, small, data) = pair();
        let hyper = Hypernetwork::init(8, 4, 6, 0).unwrap();
        let r = laten_infer_and_inject(&hyper, &large, &small, &data[4], &data[4..7], &opts());
        assert!(matches!(r, Err(PktError::Protocol(_))));
    }

    #[test]
    fn container_round_trip() {
        let hyper = Hypernetwork::<f32>::init(8, 4, 6, 5).unwrap();
        let back = Hypernetwork::from_container(&hyper.to_container(json!({}))).unwrap();
        assert_eq!(back, hyper);
    }
}
