use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PktError, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_ffn: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn large(vocab: usize, seed: u64) -> Self {
        ModelConfig { layers: 6, d_model: 128, n_ffn: 512, heads: 4, vocab, max_len: 8, seed }
    }

    pub fn small(vocab: usize, seed: u64) -> Self {
        ModelConfig { layers: 4, d_model: 64, n_ffn: 256, heads: 2, vocab, max_len: 8, seed }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.layers, self.d_model, self.n_ffn, self.heads, self.vocab, self.max_len];
        if counts.contains(&0) {
            return Err(PktError::Dimension(format!("all model counts must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(PktError::Dimension(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    /// Checks the large/small ordering a transfer pair must satisfy.
    pub fn validate_pair(large: &Self, small: &Self) -> Result<()> {
        large.validate()?;
        small.validate()?;
        if large.layers < small.layers || large.d_model < small.d_model || large.n_ffn < small.n_ffn {
            return Err(PktError::Dimension(format!(
                "source model must be at least as large as target: {large:?} vs {small:?}"
            )));
        }
        if large.vocab != small.vocab {
            return Err(PktError::Protocol(format!("vocabularies differ ({} vs {})", large.vocab, small.vocab)));
        }
        Ok(())
    }
}

/// The four per-layer matrices transfer methods touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Up,
    Down,
    V,
    O,
}

impl WeightKind {
    pub const ALL: [WeightKind; 4] = [WeightKind::Up, WeightKind::Down, WeightKind::V, WeightKind::O];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Up => "up",
            WeightKind::Down => "down",
            WeightKind::V => "v",
            WeightKind::O => "o",
        }
    }

    pub fn param_name(self) -> &'static str {
        match self {
            WeightKind::Up => "w_up",
            WeightKind::Down => "w_down",
            WeightKind::V => "wv",
            WeightKind::O => "wo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Linear maps act on column vectors: `q = W_q x`, `c = gelu(W_up x̂)`,
/// `F = W_down c`. Rows of `w_up` are FFN subkeys, columns of `w_down`
/// FFN subvalues, columns of `wo` attention subvalues.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn get(&self, kind: WeightKind) -> &Tensor<T> {
        match kind {
            WeightKind::Up => &self.w_up,
            WeightKind::Down => &self.w_down,
            WeightKind::V => &self.wv,
            WeightKind::O => &self.wo,
        }
    }

    pub fn get_mut(&mut self, kind: WeightKind) -> &mut Tensor<T> {
        match kind {
            WeightKind::Up => &mut self.w_up,
            WeightKind::Down => &mut self.w_down,
            WeightKind::V => &mut self.wv,
            WeightKind::O => &mut self.wo,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 6] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T = f32> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub unembed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
}

pub(crate) const INIT_STD: f64 = 0.02;

impl<T: Real> TransformerParams<T> {
    /// Seeded `N(0, 0.02²)` weights; final-norm gain starts at one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (b, d, n) = (config.vocab, config.d_model, config.n_ffn);
        let embed = Tensor::randn(&[b, d], INIT_STD, &mut rng);
        let unembed = Tensor::randn(&[b, d], INIT_STD, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wk: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wv: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wo: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_up: Tensor::randn(&[n, d], INIT_STD, &mut rng),
                w_down: Tensor::randn(&[d, n], INIT_STD, &mut rng),
            })
            .collect();
        Ok(TransformerParams { config, embed, unembed, layers, final_norm: Tensor::full(&[d], T::one()) })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        for (_, t) in p.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(p)
    }

    /// Stable parameter names in storage order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("unembed".to_string(), &self.unembed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, t) in layer.named() {
                out.push((format!("layers.{l}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed), ("unembed".to_string(), &mut self.unembed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer.named_mut() {
                out.push((format!("layers.{l}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config,
            embed: self.embed.cast(),
            unembed: self.unembed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian 64-bit value of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.named().iter().zip(other.named()).all(|((n1, a), (n2, b))| *n1 == n2 && a.bitwise_eq(b))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.named().into_iter().find(|(_, t)| !t.is_finite()) {
            Some(_) => Err(PktError::NonFinite("model parameters")),
            None => Ok(()),
        }
    }
}
