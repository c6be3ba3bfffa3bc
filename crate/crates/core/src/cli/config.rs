//! Experiment configuration.
//!
//! The text format is one `dotted.key = value` assignment per line, `#`
//! starting a comment. Every key must already exist in the defaults, so a
//! typo is an error rather than a silently ignored setting.
//!
//! ```text
//! seed = 3
//! paradigm = postpkt
//! lora.init = seeking
//! large.layers = 6   # depth of the source model
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attribution::LensMode;
use crate::data::{SplitSpec, WorldSpec};
use crate::error::{PktError, Result};
use crate::extraction::{DimReduction, ExtractionPlan, LayerStrategy, NeuronStrategy};
use crate::model::{ModelConfig, TrainOptions};
use crate::transfer::{LatenOptions, LoraInit, SlotPairing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Hypernetwork alignment, then injection.
    Prepkt,
    /// Seeking extraction, LoRA initialization, then fine-tuning.
    Postpkt,
    /// Closed-form width reduction, then injection.
    Unaligned,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Prepkt => "prepkt",
            Paradigm::Postpkt => "postpkt",
            Paradigm::Unaligned => "unaligned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub entities: usize,
    pub relations: usize,
    pub values: usize,
    pub extract: usize,
    pub align: usize,
    pub train: usize,
    pub eval: usize,
    pub large_only: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_ffn: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub large_epochs: usize,
    pub small_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup: usize,
    pub beta2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub layer_strategy: LayerStrategy,
    pub neuron_strategy: NeuronStrategy,
    /// Unset: `pca` for unaligned runs, `hypernetwork` for prepkt.
    pub reduce: Option<DimReduction>,
    pub fraction: f64,
    pub pairing: SlotPairing,
    pub lens: LensMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatenConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub d_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub init: LoraInit,
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Eval examples fed to both models for CKA.
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub paradigm: Paradigm,
    pub data: DataConfig,
    pub large: ShapeConfig,
    pub small: ShapeConfig,
    pub train: TrainConfig,
    pub extraction: ExtractionConfig,
    pub laten: LatenConfig,
    pub lora: LoraConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let split = SplitSpec::default();
        let laten = LatenOptions::default();
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            paradigm: Paradigm::Prepkt,
            data: DataConfig {
                entities: world.n_entities,
                relations: world.n_relations,
                values: world.n_values,
                extract: split.extract,
                align: split.align,
                train: split.train,
                eval: split.eval,
                large_only: split.large_only,
            },
            large: ShapeConfig { layers: 6, d_model: 128, n_ffn: 512, heads: 4 },
            small: ShapeConfig { layers: 4, d_model: 64, n_ffn: 256, heads: 2 },
            train: TrainConfig {
                large_epochs: 40,
                small_epochs: 70,
                lr: 3e-3,
                batch_size: 32,
                weight_decay: 0.0,
                warmup: 100,
                beta2: 0.95,
            },
            extraction: ExtractionConfig {
                layer_strategy: LayerStrategy::Attribution,
                neuron_strategy: NeuronStrategy::Attribution,
                reduce: None,
                fraction: 0.1,
                pairing: SlotPairing::RankMatched,
                lens: LensMode::FinalNorm,
            },
            laten: LatenConfig {
                steps: laten.steps,
                batch: laten.batch,
                lr: laten.lr,
                weight_decay: laten.weight_decay,
                lambda: laten.lambda,
                d_hidden: laten.d_hidden,
            },
            lora: LoraConfig { init: LoraInit::Pissa, rank: 16, epochs: 5, lr: 3e-4, batch_size: 32, warmup: 16 },
            analysis: AnalysisConfig { probes: 200 },
        }
    }
}

fn config_error(path: &str, detail: impl Into<String>) -> PktError {
    PktError::Config { path: path.to_string(), detail: detail.into() }
}

fn parse_scalar(raw: &str) -> Value {
    if let Some(s) = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        return Value::String(s.to_string());
    }
    match raw {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(v) = raw.parse::<u64>() {
        return Value::from(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        if v.is_finite() {
            return Value::from(v);
        }
    }
    Value::String(raw.to_string())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "section",
    }
}

/// Layered assignments over the serialized defaults.
struct Builder {
    root: Value,
}

impl Builder {
    fn new(base: &ExperimentConfig) -> Self {
        Builder { root: serde_json::to_value(base).expect("config serializes") }
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut value = parse_scalar(raw);
        let mut node = &mut self.root;
        for part in key.split('.') {
            node =
                node.as_object_mut().and_then(|o| o.get_mut(part)).ok_or_else(|| config_error(key, "unknown key"))?;
        }
        match (&*node, &value) {
            (Value::Object(_), _) => return Err(config_error(key, "is a section, not a value")),
            (Value::String(_), Value::Number(_) | Value::Bool(_)) => value = Value::String(raw.to_string()),
            (Value::Null, _) => {}
            (old, new) if type_name(old) != type_name(new) => {
                return Err(config_error(key, format!("expected a {}, got `{raw}`", type_name(old))));
            }
            _ => {}
        }
        *node = value;
        serde_json::from_value::<ExperimentConfig>(self.root.clone())
            .map(|_| ())
            .map_err(|e| config_error(key, e.to_string()))
    }

    fn build(self) -> Result<ExperimentConfig> {
        serde_json::from_value(self.root).map_err(|e| config_error("<root>", e.to_string()))
    }
}

impl ExperimentConfig {
    /// Parses the `key = value` format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().with_text(text)
    }

    pub fn with_text(&self, text: &str) -> Result<Self> {
        let mut b = Builder::new(self);
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| config_error(&format!("line {}", i + 1), "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(config_error(key, "assigned twice"));
            }
            b.set(key, raw.trim())?;
        }
        b.build()
    }

    /// Applies `(dotted key, raw value)` pairs, e.g. from command-line flags.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, String)>) -> Result<Self> {
        let mut b = Builder::new(self);
        for (key, raw) in pairs {
            b.set(key, &raw)?;
        }
        b.build()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PktError::Dependency(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, in the text format.
    pub fn to_text(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(o) => {
                    for (k, child) in o {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                Value::Null => out.push_str(&format!("# {prefix} =\n")),
                Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
                other => out.push_str(&format!("{prefix} = {other}\n")),
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, with the output directory blanked so
    /// the same experiment hashes the same wherever it runs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hash_json(&serde_json::to_value(&c).expect("config serializes"))
    }

    pub fn reduce(&self) -> DimReduction {
        self.extraction.reduce.unwrap_or(match self.paradigm {
            Paradigm::Prepkt => DimReduction::Hypernetwork,
            Paradigm::Postpkt | Paradigm::Unaligned => DimReduction::Pca,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.entities", self.data.entities),
            ("data.relations", self.data.relations),
            ("data.values", self.data.values),
            ("data.extract", self.data.extract),
            ("data.align", self.data.align),
            ("data.train", self.data.train),
            ("data.eval", self.data.eval),
            ("data.large_only", self.data.large_only),
            ("train.batch_size", self.train.batch_size),
            ("laten.batch", self.laten.batch),
            ("laten.d_hidden", self.laten.d_hidden),
            ("lora.rank", self.lora.rank),
            ("lora.batch_size", self.lora.batch_size),
            ("analysis.probes", self.analysis.probes),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(config_error(path, "must be positive"));
            }
        }
        for (name, s) in [("large", &self.large), ("small", &self.small)] {
            for (field, v) in [("layers", s.layers), ("d_model", s.d_model), ("n_ffn", s.n_ffn), ("heads", s.heads)] {
                if v == 0 {
                    return Err(config_error(&format!("{name}.{field}"), "must be positive"));
                }
            }
            if s.d_model % s.heads != 0 {
                return Err(config_error(&format!("{name}.heads"), "must divide d_model"));
            }
        }
        for (field, l, s) in [
            ("layers", self.large.layers, self.small.layers),
            ("d_model", self.large.d_model, self.small.d_model),
            ("n_ffn", self.large.n_ffn, self.small.n_ffn),
        ] {
            if s > l {
                return Err(config_error(&format!("small.{field}"), "exceeds the large model"));
            }
        }
        let f = self.extraction.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(config_error("extraction.fraction", "must lie in (0, 1]"));
        }
        for (path, v) in [("train.lr", self.train.lr), ("laten.lr", self.laten.lr), ("lora.lr", self.lora.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(path, "must be positive"));
            }
        }
        if !(self.train.beta2 > 0.0 && self.train.beta2 < 1.0) {
            return Err(config_error("train.beta2", "must lie in (0, 1)"));
        }
        if !(self.laten.lambda >= 0.0 && self.laten.lambda.is_finite()) {
            return Err(config_error("laten.lambda", "must be non-negative"));
        }
        if self.laten.batch > self.data.align {
            return Err(config_error("laten.batch", "exceeds data.align"));
        }
        let max_rank = self.small.d_model.min(self.small.n_ffn);
        if self.lora.rank > max_rank {
            return Err(config_error("lora.rank", format!("exceeds {max_rank}")));
        }
        if self.analysis.probes < 2 {
            return Err(config_error("analysis.probes", "CKA needs at least two probes"));
        }
        let reduce = self.reduce();
        match self.paradigm {
            Paradigm::Prepkt if reduce != DimReduction::Hypernetwork => {
                return Err(config_error("extraction.reduce", "prepkt aligns with the hypernetwork"));
            }
            Paradigm::Unaligned if matches!(reduce, DimReduction::Hypernetwork | DimReduction::None) => {
                return Err(config_error("extraction.reduce", "unaligned runs need a closed-form reduction"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn world(&self) -> WorldSpec {
        WorldSpec { n_entities: self.data.entities, n_relations: self.data.relations, n_values: self.data.values }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            extract: self.data.extract,
            align: self.data.align,
            train: self.data.train,
            eval: self.data.eval,
            large_only: self.data.large_only,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, large: bool, vocab: usize) -> ModelConfig {
        let (s, seed) = if large { (&self.large, self.seed * 2 + 1) } else { (&self.small, self.seed * 2 + 2) };
        ModelConfig { layers: s.layers, d_model: s.d_model, n_ffn: s.n_ffn, heads: s.heads, vocab, max_len: 8, seed }
    }

    pub fn train_options(&self, large: bool) -> TrainOptions {
        TrainOptions {
            epochs: if large { self.train.large_epochs } else { self.train.small_epochs },
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            weight_decay: self.train.weight_decay,
            seed: self.seed,
            warmup: self.train.warmup,
            beta2: self.train.beta2,
            ..TrainOptions::default()
        }
    }

    pub fn plan(&self) -> ExtractionPlan {
        ExtractionPlan {
            layer: self.extraction.layer_strategy,
            neuron: self.extraction.neuron_strategy,
            reduce: self.reduce(),
            fraction: self.extraction.fraction,
            seed: self.seed,
        }
    }

    pub fn laten_options(&self) -> LatenOptions {
        LatenOptions {
            steps: self.laten.steps,
            batch: self.laten.batch,
            lr: self.laten.lr,
            weight_decay: self.laten.weight_decay,
            lambda: self.laten.lambda,
            d_hidden: self.laten.d_hidden,
            fraction: self.extraction.fraction,
            pairing: self.extraction.pairing,
            lens: self.extraction.lens,
            seed: self.seed,
        }
    }

    pub fn lora_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.lora.epochs,
            lr: self.lora.lr,
            batch_size: self.lora.batch_size,
            weight_decay: 0.0,
            seed: self.seed,
            warmup: self.lora.warmup,
            beta2: self.train.beta2,
            ..TrainOptions::default()
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

pub(crate) fn hash_json(v: &Value) -> String {
    let digest = Sha256::digest(serde_json::to_vec(v).expect("JSON value serializes"));
    format!("{digest:x}")
}
