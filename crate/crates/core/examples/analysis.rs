//! Compares the two models' sublayer representations with linear CKA and
//! summarizes how far fine-tuning moves the small model's weights.

mod common;

use pktlab::analysis::{delta_stats, representation_similarity, SimilarityReport};
use pktlab::model::{train, TrainOptions, WeightKind};

fn main() -> pktlab::Result<()> {
    let pair = common::trained_pair(0)?;
    let probe = pair.set(&pair.splits.eval[..24]);

    let cka = representation_similarity(&pair.large, &pair.small, &probe, &WeightKind::ALL)?;
    for e in &cka {
        println!("{:<4} large layer {} vs small layer {}: cka {:.3}", e.kind.name(), e.layer_a, e.layer_b, e.cka);
    }
    let report = SimilarityReport::new(cka, None);
    for (kind, mean) in &report.mean_cka {
        println!("mean {:<4} {mean:.3}", kind.name());
    }

    let mut tuned = pair.small.clone();
    let opts = TrainOptions { epochs: 2, lr: 1e-3, batch_size: 8, warmup: 2, ..TrainOptions::default() };
    train(&mut tuned, &pair.set(&pair.splits.train), &opts)?;
    let deltas: Vec<f64> = tuned
        .named()
        .iter()
        .zip(pair.small.named())
        .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) as f64).collect::<Vec<_>>())
        .collect();
    let s = delta_stats(&deltas)?;
    println!(
        "\n{} weight deltas in [{:.2e}, {:.2e}], mean {:.2e}; |d| > 0.002: {:.1}%, > 0.005: {:.1}%",
        s.count,
        s.min,
        s.max,
        s.mean,
        100.0 * s.frac_above_002,
        100.0 * s.frac_above_005
    );
    let peak = s.histogram.iter().max().copied().unwrap_or(1).max(1);
    for (i, &c) in s.histogram.iter().enumerate().step_by(4) {
        println!("  bin {i:>2} {}", "#".repeat((40 * c / peak) as usize));
    }
    print!("\n{}", report.to_csv().lines().take(4).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
