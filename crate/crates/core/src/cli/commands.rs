use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{delta_stats, parametric_similarity, representation_similarity, DeltaStats, SimilarityReport};
use crate::attribution::{score_matrices, ScoreMatrices};
use crate::container::Container;
use crate::data::{examples, gen_corpus, make_splits, read_corpus_file, write_corpus_file, Example, Splits, Vocab};
use crate::error::{PktError, Result};
use crate::extraction::{
    extract, reduce_dim, seeking_extract, seeking_from_container, seeking_to_container, sensitivity, ExtractedDelta,
    LayerStrategy,
};
use crate::model::{accuracy, train, TransformerParams, WeightKind};
use crate::transfer::{
    attach_lora, inject, laten_locate, laten_train, lora_finetune, AlignedDelta, Hypernetwork, LoraModel,
};

use super::config::{ExperimentConfig, Paradigm};
use super::workspace::{provenance, Keys, Workspace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Done,
    Skipped,
}

/// What one command did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub command: String,
    pub status: Status,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eval_acc: f64,
    pub largeonly_acc: f64,
    pub base_acc: f64,
    pub base_largeonly_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub cka: SimilarityReport,
    pub parametric_similarity: Option<crate::analysis::ParametricReport>,
    pub delta_stats: DeltaStats,
}

/// Final pipeline report. Every field is a pure function of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub paradigm: Paradigm,
    pub seed: u64,
    pub metrics: Metrics,
    pub analysis: Analysis,
    /// Optimizer step counts per stage.
    pub timings: BTreeMap<String, usize>,
}

/// One configured run bound to its locked output directory.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub keys: Keys,
    ws: Workspace,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn details(c: &Container) -> &Value {
    &c.metadata["provenance"]["details"]
}

fn steps_of(c: &Container) -> usize {
    details(c)["steps"].as_u64().unwrap_or(0) as usize
}

impl Session {
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ws = Workspace::open(&cfg.out)?;
        let keys = Keys::new(&cfg);
        Ok(Session { cfg, keys, ws })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    fn prov(&self, stage: &str, key: &str, extra: Value) -> Value {
        provenance(&self.cfg, stage, key, extra)
    }

    fn not_for(&self, command: &str) -> PktError {
        PktError::Config {
            path: "paradigm".into(),
            detail: format!("`{command}` does not apply to {} runs", self.cfg.paradigm.name()),
        }
    }

    /// Runs `body` unless every output is already complete.
    fn stage(
        &self,
        command: &str,
        outputs: Vec<PathBuf>,
        body: impl FnOnce(&Self) -> Result<()>,
    ) -> Result<StageOutcome> {
        let status = if outputs.iter().all(|p| self.ws.is_complete(p)) {
            Status::Skipped
        } else {
            body(self)?;
            for p in &outputs {
                self.ws.finish(p)?;
            }
            Status::Done
        };
        Ok(StageOutcome { command: command.into(), status, artifacts: outputs })
    }

    fn write_container(&self, path: &Path, c: &Container) -> Result<()> {
        c.write(path)
    }

    fn read_container(&self, path: &Path) -> Result<Container> {
        self.ws.require(path)?;
        Container::read(path)
    }

    // artifact paths

    pub fn data_path(&self) -> PathBuf {
        self.ws.artifact("data", "corpus", &self.keys.data, "tsv")
    }

    pub fn model_path(&self, large: bool) -> PathBuf {
        if large {
            self.ws.artifact("models", "large", &self.keys.large, "pktc")
        } else {
            self.ws.artifact("models", "small", &self.keys.small, "pktc")
        }
    }

    pub fn scores_path(&self, large: bool) -> PathBuf {
        let stem = if large { "large" } else { "small" };
        self.ws.artifact("scores", stem, &self.keys.scores, "csv")
    }

    pub fn extract_path(&self) -> PathBuf {
        let stem = match self.cfg.paradigm {
            Paradigm::Prepkt => "seed-extract",
            Paradigm::Postpkt => "seeking",
            Paradigm::Unaligned => "extract",
        };
        self.ws.artifact("deltas", stem, &self.keys.extract, "pktc")
    }

    fn align_paths(&self) -> Vec<PathBuf> {
        match self.cfg.paradigm {
            Paradigm::Prepkt => vec![
                self.ws.artifact("adapters", "hyper", &self.keys.align, "pktc"),
                self.ws.artifact("reports", "laten", &self.keys.align, "json"),
            ],
            _ => vec![self.ws.artifact("deltas", "reduced", &self.keys.align, "pktc")],
        }
    }

    pub fn aligned_path(&self) -> PathBuf {
        self.ws.artifact("deltas", "aligned", &self.keys.inject, "pktc")
    }

    pub fn lora_init_path(&self) -> PathBuf {
        self.ws.artifact("adapters", "lora-init", &self.keys.lora_init, "pktc")
    }

    pub fn lora_path(&self) -> PathBuf {
        self.ws.artifact("adapters", "lora", &self.keys.finetune, "pktc")
    }

    /// The transferred small model the paradigm produces.
    pub fn final_model_path(&self) -> PathBuf {
        match self.cfg.paradigm {
            Paradigm::Postpkt => self.ws.artifact("models", "finetuned", &self.keys.finetune, "pktc"),
            _ => self.ws.artifact("models", "injected", &self.keys.inject, "pktc"),
        }
    }

    pub fn eval_path(&self) -> PathBuf {
        self.ws.artifact("reports", "eval", &self.keys.eval, "json")
    }

    pub fn analysis_path(&self) -> PathBuf {
        self.ws.artifact("reports", "analysis", &self.keys.analysis, "json")
    }

    pub fn similarity_csv_path(&self) -> PathBuf {
        self.ws.artifact("reports", "similarity", &self.keys.analysis, "csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.ws.artifact("reports", "report", &self.keys.config, "json")
    }

    // loaders

    fn load_data(&self) -> Result<(Vocab, Splits)> {
        let path = self.data_path();
        self.ws.require(&path)?;
        let (world, tagged) = read_corpus_file(&path)?;
        Ok((Vocab::new(&world), Splits::from_tagged(self.cfg.seed, &tagged)))
    }

    fn load_model(&self, path: &Path) -> Result<(TransformerParams<f32>, Container)> {
        let c = self.read_container(path)?;
        Ok((TransformerParams::from_container(&c)?, c))
    }

    fn load_scores(&self, large: bool, params: &TransformerParams<f32>) -> Result<ScoreMatrices> {
        let path = self.scores_path(large);
        self.ws.require(&path)?;
        let cfg = params.config;
        ScoreMatrices::from_csv(&fs::read_to_string(&path)?, cfg.layers, cfg.n_ffn, cfg.d_model)
    }

    fn seed_example(&self, splits: &Splits, vocab: &Vocab) -> Result<Example> {
        splits
            .train
            .first()
            .map(|f| Example::from_fact(f, vocab))
            .ok_or_else(|| PktError::Data("the train split is empty".into()))
    }

    // commands

    pub fn gen_data(&self) -> Result<StageOutcome> {
        let path = self.data_path();
        self.stage("gen-data", vec![path.clone()], |s| {
            let corpus = gen_corpus(s.cfg.seed, &s.cfg.world())?;
            let splits = make_splits(&corpus, &s.cfg.split_spec())?;
            write_corpus_file(&path, &corpus, &splits)
        })
    }

    pub fn train_model(&self) -> Result<StageOutcome> {
        let outputs = vec![self.model_path(true), self.model_path(false)];
        self.stage("train-model", outputs, |s| {
            let (vocab, splits) = s.load_data()?;
            for large in [true, false] {
                let path = s.model_path(large);
                if s.ws.is_complete(&path) {
                    continue;
                }
                let facts = if large { splits.large_training_set() } else { splits.small_training_set() };
                let mut p = TransformerParams::<f32>::init(s.cfg.model_config(large, vocab.size()))?;
                let opts = s.cfg.train_options(large);
                let rep = train(&mut p, &examples(&facts, &vocab), &opts)?;
                let key = if large { &s.keys.large } else { &s.keys.small };
                let extra = json!({"steps": rep.steps, "train_options": opts, "final_loss": rep.loss_curve.last()});
                s.write_container(&path, &p.to_container(s.prov("train-model", key, extra)))?;
                s.ws.finish(&path)?;
            }
            Ok(())
        })
    }

    pub fn attribute(&self) -> Result<StageOutcome> {
        let outputs = vec![self.scores_path(true), self.scores_path(false)];
        self.stage("attribute", outputs, |s| {
            let (vocab, splits) = s.load_data()?;
            let extract_set = examples(&splits.extract, &vocab);
            for large in [true, false] {
                let (p, _) = s.load_model(&s.model_path(large))?;
                score_matrices(&p, &extract_set, s.cfg.extraction.lens)?.write_csv(&s.scores_path(large))?;
            }
            Ok(())
        })
    }

    pub fn extract(&self) -> Result<StageOutcome> {
        let path = self.extract_path();
        self.stage("extract", vec![path.clone()], |s| {
            let (vocab, splits) = s.load_data()?;
            let extract_set = examples(&splits.extract, &vocab);
            let (large, _) = s.load_model(&s.model_path(true))?;
            let (small, _) = s.load_model(&s.model_path(false))?;
            let prov = |extra| s.prov("extract", &s.keys.extract, extra);
            let c = match s.cfg.paradigm {
                Paradigm::Unaligned => {
                    let scores = s.load_scores(true, &large)?;
                    let sens = match s.cfg.extraction.layer_strategy {
                        LayerStrategy::Sensitivity => Some(sensitivity(&large, &extract_set)?),
                        _ => None,
                    };
                    let delta = extract(&large, &small.config, &s.cfg.plan(), Some(&scores), sens.as_ref())?;
                    delta.to_container(prov(json!({})))
                }
                Paradigm::Prepkt => {
                    let seed = s.seed_example(&splits, &vocab)?;
                    let align_set = examples(&splits.align, &vocab);
                    if align_set.iter().any(|e| e.prompt == seed.prompt) {
                        return Err(PktError::Protocol("inference seed example belongs to the align set".into()));
                    }
                    let (delta, slots) = laten_locate(&large, &small, &seed, &s.cfg.laten_options())?;
                    delta.to_container(prov(json!({"slots": slots, "seed_prompt": seed.prompt})))
                }
                Paradigm::Postpkt => {
                    let sens = sensitivity(&large, &extract_set)?;
                    let blocks = seeking_extract(&large, &small.config, &sens)?;
                    seeking_to_container(&blocks, prov(json!({})))
                }
            };
            s.write_container(&path, &c)
        })
    }

    pub fn align(&self) -> Result<StageOutcome> {
        if self.cfg.paradigm == Paradigm::Postpkt {
            return Err(self.not_for("align"));
        }
        let outputs = self.align_paths();
        self.stage("align", outputs.clone(), |s| {
            let (large, _) = s.load_model(&s.model_path(true))?;
            let (small, _) = s.load_model(&s.model_path(false))?;
            let delta = ExtractedDelta::from_container(&s.read_container(&s.extract_path())?)?;
            match s.cfg.paradigm {
                Paradigm::Prepkt => {
                    let (vocab, splits) = s.load_data()?;
                    let opts = s.cfg.laten_options();
                    let seed = s.seed_example(&splits, &vocab)?;
                    let (hyper, report) = laten_train(
                        &large,
                        &small,
                        &examples(&splits.extract, &vocab),
                        &examples(&splits.align, &vocab),
                        &seed,
                        &opts,
                    )?;
                    let extra = json!({"steps": report.records.len(), "best_step": report.best_step, "options": opts});
                    s.write_container(&outputs[0], &hyper.to_container(s.prov("align", &s.keys.align, extra)))?;
                    write_json(&outputs[1], &report)
                }
                _ => {
                    let reduced =
                        reduce_dim(&delta, s.cfg.reduce(), &large.embed, Some(&small.embed), small.config.d_model)?;
                    let extra = json!({"reduce": s.cfg.reduce()});
                    s.write_container(&outputs[0], &reduced.to_container(s.prov("align", &s.keys.align, extra)))
                }
            }
        })
    }

    pub fn inject(&self) -> Result<StageOutcome> {
        if self.cfg.paradigm == Paradigm::Postpkt {
            return Err(self.not_for("inject"));
        }
        let outputs = vec![self.aligned_path(), self.final_model_path()];
        self.stage("inject", outputs.clone(), |s| {
            let (large, _) = s.load_model(&s.model_path(true))?;
            let (small, _) = s.load_model(&s.model_path(false))?;
            let aligned = match s.cfg.paradigm {
                Paradigm::Prepkt => {
                    let ec = s.read_container(&s.extract_path())?;
                    let delta = ExtractedDelta::from_container(&ec)?;
                    let slots: Vec<Vec<usize>> = serde_json::from_value(details(&ec)["slots"].clone())
                        .map_err(|e| PktError::container("metadata.provenance.details.slots", e.to_string()))?;
                    let hyper = Hypernetwork::from_container(&s.read_container(&s.align_paths()[0])?)?;
                    hyper.map(&delta, &slots)?
                }
                _ => {
                    let reduced = ExtractedDelta::from_container(&s.read_container(&s.align_paths()[0])?)?;
                    let small_scores = s.load_scores(false, &small)?;
                    AlignedDelta::from_extracted(
                        &reduced,
                        s.cfg.extraction.pairing,
                        &small.config,
                        &large.config,
                        Some(&small_scores),
                    )?
                }
            };
            let (injected, _) = inject(&small, &aligned)?;
            let prov = s.prov("inject", &s.keys.inject, json!({}));
            s.write_container(&outputs[0], &aligned.to_container(prov.clone()))?;
            s.write_container(&outputs[1], &injected.to_container(prov))
        })
    }

    pub fn lora_init(&self) -> Result<StageOutcome> {
        if self.cfg.paradigm != Paradigm::Postpkt {
            return Err(self.not_for("lora-init"));
        }
        let path = self.lora_init_path();
        self.stage("lora-init", vec![path.clone()], |s| {
            let (small, _) = s.load_model(&s.model_path(false))?;
            let blocks = seeking_from_container(&s.read_container(&s.extract_path())?)?;
            let model = attach_lora(&small, s.cfg.lora.init, s.cfg.lora.rank, Some(&blocks), s.cfg.seed)?;
            let extra = json!({"init": s.cfg.lora.init, "rank": s.cfg.lora.rank});
            s.write_container(&path, &model.to_container(s.prov("lora-init", &s.keys.lora_init, extra)))
        })
    }

    pub fn finetune(&self) -> Result<StageOutcome> {
        if self.cfg.paradigm != Paradigm::Postpkt {
            return Err(self.not_for("finetune"));
        }
        let outputs = vec![self.lora_path(), self.final_model_path()];
        self.stage("finetune", outputs.clone(), |s| {
            let (vocab, splits) = s.load_data()?;
            let (small, _) = s.load_model(&s.model_path(false))?;
            let mut model = LoraModel::from_container(&s.read_container(&s.lora_init_path())?, &small)?;
            let opts = s.cfg.lora_options();
            let rep = lora_finetune(&mut model, &examples(&splits.train, &vocab), &opts)?;
            let prov = s.prov("finetune", &s.keys.finetune, json!({"steps": rep.steps, "options": opts}));
            s.write_container(&outputs[0], &model.to_container(prov.clone()))?;
            s.write_container(&outputs[1], &model.merged().to_container(prov))
        })
    }

    pub fn eval(&self) -> Result<StageOutcome> {
        let path = self.eval_path();
        self.stage("eval", vec![path.clone()], |s| {
            let (vocab, splits) = s.load_data()?;
            let eval_set = examples(&splits.eval, &vocab);
            let large_only = examples(&splits.large_only, &vocab);
            let (small, _) = s.load_model(&s.model_path(false))?;
            let (fin, _) = s.load_model(&s.final_model_path())?;
            let metrics = Metrics {
                eval_acc: accuracy(&fin, &eval_set)?,
                largeonly_acc: accuracy(&fin, &large_only)?,
                base_acc: accuracy(&small, &eval_set)?,
                base_largeonly_acc: accuracy(&small, &large_only)?,
            };
            write_json(&path, &metrics)
        })
    }

    pub fn analyze(&self) -> Result<StageOutcome> {
        let outputs = vec![self.analysis_path(), self.similarity_csv_path()];
        self.stage("analyze", outputs.clone(), |s| {
            let (vocab, splits) = s.load_data()?;
            let (large, _) = s.load_model(&s.model_path(true))?;
            let (small, _) = s.load_model(&s.model_path(false))?;
            let (fin, _) = s.load_model(&s.final_model_path())?;
            let eval_set = examples(&splits.eval, &vocab);
            let probes = &eval_set[..s.cfg.analysis.probes.min(eval_set.len())];
            let cka = representation_similarity(&large, &fin, probes, &WeightKind::ALL)?;
            let (parametric, values) = match s.cfg.paradigm {
                Paradigm::Postpkt => {
                    let model = LoraModel::from_container(&s.read_container(&s.lora_path())?, &small)?;
                    let items: Vec<_> = model
                        .factors
                        .iter()
                        .map(|f| {
                            let l = f.layer;
                            let w = small.layers[l].get(f.kind).clone();
                            (l, f.kind, f.product(), w, model.base.layers[l].get(f.kind).clone())
                        })
                        .collect();
                    let mut values = Vec::new();
                    for l in 0..small.config.layers {
                        for kind in WeightKind::ALL {
                            let (a, b) = (fin.layers[l].get(kind), small.layers[l].get(kind));
                            values.extend(a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64) - (*y as f64)));
                        }
                    }
                    (Some(parametric_similarity(&items)?), values)
                }
                _ => (None, AlignedDelta::from_container(&s.read_container(&s.aligned_path())?)?.values()),
            };
            let sim = SimilarityReport::new(cka, parametric.clone());
            let analysis =
                Analysis { cka: sim.clone(), parametric_similarity: parametric, delta_stats: delta_stats(&values)? };
            write_json(&outputs[0], &analysis)?;
            fs::write(&outputs[1], sim.to_csv())?;
            Ok(())
        })
    }

    /// Every stage of the paradigm in order.
    pub fn stages(&self) -> Vec<&'static str> {
        let mut v = vec!["gen-data", "train-model", "attribute", "extract"];
        match self.cfg.paradigm {
            Paradigm::Postpkt => v.extend(["lora-init", "finetune"]),
            _ => v.extend(["align", "inject"]),
        }
        v.extend(["eval", "analyze"]);
        v
    }

    pub fn run_command(&self, name: &str) -> Result<StageOutcome> {
        match name {
            "gen-data" => self.gen_data(),
            "train-model" => self.train_model(),
            "attribute" => self.attribute(),
            "extract" => self.extract(),
            "align" => self.align(),
            "inject" => self.inject(),
            "lora-init" => self.lora_init(),
            "finetune" => self.finetune(),
            "eval" => self.eval(),
            "analyze" => self.analyze(),
            other => Err(PktError::Config { path: "command".into(), detail: format!("unknown command `{other}`") }),
        }
    }

    /// Runs (or resumes) the full chain and writes the final report.
    pub fn pipeline(&self) -> Result<(Report, Vec<StageOutcome>)> {
        let mut outcomes = Vec::new();
        let mut wall = BTreeMap::new();
        for stage in self.stages() {
            let t = Instant::now();
            outcomes.push(self.run_command(stage)?);
            wall.insert(stage.to_string(), t.elapsed().as_secs_f64());
        }
        let report = self.report()?;
        let path = self.report_path();
        write_json(&path, &report)?;
        self.ws.finish(&path)?;
        write_json(&self.ws.root().join("reports").join("timings.json"), &wall)?;
        fs::write(self.ws.artifact("reports", "config", &self.keys.config, "json"), self.cfg.to_json() + "\n")?;
        Ok((report, outcomes))
    }

    pub fn report(&self) -> Result<Report> {
        let metrics: Metrics = {
            self.ws.require(&self.eval_path())?;
            read_json(&self.eval_path())?
        };
        let analysis: Analysis = {
            self.ws.require(&self.analysis_path())?;
            read_json(&self.analysis_path())?
        };
        let mut timings = BTreeMap::new();
        timings.insert("train_large_steps".into(), steps_of(&self.read_container(&self.model_path(true))?));
        timings.insert("train_small_steps".into(), steps_of(&self.read_container(&self.model_path(false))?));
        let transfer = match self.cfg.paradigm {
            Paradigm::Prepkt => steps_of(&self.read_container(&self.align_paths()[0])?),
            Paradigm::Postpkt => steps_of(&self.read_container(&self.lora_path())?),
            Paradigm::Unaligned => 0,
        };
        timings.insert("transfer_steps".into(), transfer);
        Ok(Report {
            config_hash: self.keys.config.clone(),
            paradigm: self.cfg.paradigm,
            seed: self.cfg.seed,
            metrics,
            analysis,
            timings,
        })
    }
}
