//! Trains the hypernetwork that maps large-model neurons into the small
//! model's parameter space, then injects the mapping of one held-out example.

mod common;

use pktlab::analysis::delta_stats;
use pktlab::model::accuracy;
use pktlab::transfer::{laten_infer_and_inject, laten_train, LatenOptions};

fn main() -> pktlab::Result<()> {
    let pair = common::trained_pair(0)?;
    let extract_set = pair.set(&pair.splits.extract);
    let align = pair.set(&pair.splits.align);
    let seed_example = pair.set(&pair.splits.train[..1]).remove(0);
    let eval = pair.set(&pair.splits.eval);
    let large_only = pair.set(&pair.splits.large_only);

    let opts = LatenOptions { steps: 8, batch: 8, d_hidden: 32, fraction: 0.25, ..LatenOptions::default() };
    let (hyper, report) = laten_train(&pair.large, &pair.small, &extract_set, &align, &seed_example, &opts)?;
    for r in &report.records {
        println!(
            "step {}: lm {:.4}  mse {:.3e}  align accuracy {:.3}",
            r.step, r.terms.lm_loss, r.terms.mse, r.align_acc
        );
    }
    println!("best step {} ({:.3})", report.best_step, report.best_align_acc);

    let (injected, aligned) = laten_infer_and_inject(&hyper, &pair.large, &pair.small, &seed_example, &align, &opts)?;
    let stats = delta_stats(&aligned.values())?;
    println!("injected {} values, range [{:.2e}, {:.2e}]", stats.count, stats.min, stats.max);
    for (name, m) in [("base small", &pair.small), ("injected", &injected)] {
        println!("{name:<11} eval {:.3}  large-only {:.3}", accuracy(m, &eval)?, accuracy(m, &large_only)?);
    }
    Ok(())
}
