//! Runs the full staged pipeline for each paradigm from a config text, the
//! same way the `pkt` binary does, and shows that a rerun skips every stage.

use pktlab::cli::{ExperimentConfig, Session};

const CONFIG: &str = "\
data.entities = 40
data.relations = 4
data.values = 60
data.extract = 8
data.align = 16
data.train = 40
data.eval = 20
data.large_only = 20
large.layers = 3
large.d_model = 32
large.n_ffn = 64
small.layers = 2
small.d_model = 16
small.n_ffn = 32
train.large_epochs = 80
train.small_epochs = 100
train.batch_size = 16
train.warmup = 20
laten.batch = 4
laten.d_hidden = 16
lora.rank = 4
lora.batch_size = 8
analysis.probes = 10
";

fn main() -> pktlab::Result<()> {
    for paradigm in ["unaligned", "prepkt", "postpkt"] {
        let out = std::env::temp_dir().join(format!("pktlab-pipeline-{paradigm}"));
        let cfg = ExperimentConfig::parse(CONFIG)?
            .with_overrides([("paradigm", paradigm.to_string()), ("out", format!("\"{}\"", out.display()))])?;
        let session = Session::open(cfg)?;
        let (report, stages) = session.pipeline()?;
        let m = &report.metrics;
        println!(
            "{paradigm:<9} eval {:.3} (base {:.3})  large-only {:.3} (base {:.3})  config {}",
            m.eval_acc,
            m.base_acc,
            m.largeonly_acc,
            m.base_largeonly_acc,
            &report.config_hash[..12]
        );
        let ran: Vec<String> = stages.iter().map(|s| format!("{}:{:?}", s.command, s.status)).collect();
        println!("          {}", ran.join(" "));
        let (_, again) = session.pipeline()?;
        println!(
            "          rerun: {} of {} stages skipped, report at {}",
            again.iter().filter(|s| s.status == pktlab::cli::Status::Skipped).count(),
            again.len(),
            session.report_path().display()
        );
    }
    Ok(())
}
