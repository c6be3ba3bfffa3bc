//! Command-line orchestration of the transfer pipeline.
//!
//! Each subcommand runs one stage against the artifact directory
//! `<out>/{data,models,scores,deltas,adapters,reports}`; `pipeline` runs
//! every stage of the configured paradigm and writes the final report.
//! Stages whose outputs already exist (digest-checked) are skipped.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

pub use commands::{Analysis, Metrics, Report, Session, StageOutcome, Status};
pub use config::{
    AnalysisConfig, DataConfig, ExperimentConfig, ExtractionConfig, LatenConfig, LoraConfig, Paradigm, ShapeConfig,
    TrainConfig,
};
pub use workspace::{file_digest, provenance, version, Keys, Workspace, DIRS};

use crate::error::{PktError, Result};

#[derive(Debug, Parser)]
#[command(name = "pkt", version, about = "Parametric knowledge transfer between toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its splits.
    GenData,
    /// Train the large and the small model.
    TrainModel,
    /// Score every neuron of both models on the extract split.
    Attribute,
    /// Extract the transfer delta from the large model.
    Extract,
    /// Map the delta to the small model's width.
    Align,
    /// Add the aligned delta to the small model.
    Inject,
    /// Attach LoRA adapters to the small model.
    LoraInit,
    /// Fine-tune the LoRA adapters on the train split.
    Finetune,
    /// Accuracy of the transferred and the base small model.
    Eval,
    /// Similarity and delta statistics.
    Analyze,
    /// Every stage in order, then the final report.
    Pipeline,
    /// Print the resolved configuration as JSON.
    ShowConfig,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainModel => "train-model",
            Command::Attribute => "attribute",
            Command::Extract => "extract",
            Command::Align => "align",
            Command::Inject => "inject",
            Command::LoraInit => "lora-init",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Pipeline => "pipeline",
            Command::ShowConfig => "show-config",
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// prepkt | postpkt | unaligned
    #[arg(long, global = true)]
    pub paradigm: Option<String>,
    /// top | bottom | random | attribution | sensitivity
    #[arg(long, global = true)]
    pub layer_strategy: Option<String>,
    /// random | importance | attribution
    #[arg(long, global = true)]
    pub neuron_strategy: Option<String>,
    /// pca | whitening | embedding_transform | hypernetwork
    #[arg(long, global = true)]
    pub reduce: Option<String>,
    /// LoRA rank (default 16).
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    /// Hypernetwork alignment steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Weight of the delta magnitude penalty during alignment.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Fraction of neurons extracted per layer (default 0.1).
    #[arg(long, global = true)]
    pub fraction: Option<f64>,
    /// Any other `key=value` assignment; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Flags {
    /// The config file (or defaults) with every flag applied on top.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| format!("\"{}\"", p.display())));
        push("paradigm", self.paradigm.clone());
        push("extraction.layer_strategy", self.layer_strategy.clone());
        push("extraction.neuron_strategy", self.neuron_strategy.clone());
        push("extraction.reduce", self.reduce.clone());
        push("lora.rank", self.rank.map(|v| v.to_string()));
        push("laten.steps", self.steps.map(|v| v.to_string()));
        push("laten.lambda", self.lambda.map(|v| v.to_string()));
        push("extraction.fraction", self.fraction.map(|v| v.to_string()));
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| PktError::Config {
                path: "--set".into(),
                detail: format!("expected KEY=VALUE, got `{s}`"),
            })?;
            pairs.push((k.trim(), v.trim().to_string()));
        }
        let cfg = base.with_overrides(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one parsed invocation and returns its JSON status record.
pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = cli.flags.resolve()?;
    match cli.command {
        Command::ShowConfig => Ok(serde_json::to_value(&cfg)?),
        Command::Pipeline => {
            let session = Session::open(cfg)?;
            let (report, stages) = session.pipeline()?;
            Ok(json!({
                "command": "pipeline",
                "report": session.report_path(),
                "stages": stages,
                "metrics": report.metrics,
            }))
        }
        other => {
            let session = Session::open(cfg)?;
            Ok(serde_json::to_value(session.run_command(other.name())?)?)
        }
    }
}

/// Machine-readable record of a failed invocation.
pub fn error_record(e: &PktError) -> Value {
    let mut rec = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    match e {
        PktError::Config { path, .. } => rec["error"]["field"] = json!(path),
        PktError::Dependency(p) | PktError::Locked(p) => rec["error"]["path"] = json!(p),
        _ => {}
    }
    rec
}

/// Entry point of the `pkt` binary; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string(&v).expect("status serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}
