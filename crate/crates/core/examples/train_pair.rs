//! Trains a large and a small model on the same world and checkpoints them.
//! The large model sees the alias facts; the small one never does.

mod common;

use pktlab::model::{accuracy, load_checkpoint, save_checkpoint, TransformerParams};
use serde_json::json;

fn main() -> pktlab::Result<()> {
    let t = std::time::Instant::now();
    let pair = common::trained_pair(0)?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());

    let eval = pair.set(&pair.splits.eval);
    let large_only = pair.set(&pair.splits.large_only);
    for (name, m) in [("large", &pair.large), ("small", &pair.small)] {
        println!(
            "{name:<6} {:>6} params  eval {:.3}  large-only {:.3}",
            m.named().iter().map(|(_, t)| t.len()).sum::<usize>(),
            accuracy(m, &eval)?,
            accuracy(m, &large_only)?
        );
    }

    let path = std::env::temp_dir().join("pktlab-small.pktc");
    save_checkpoint(&pair.small, &path, json!({"seed": 0}))?;
    let back: TransformerParams<f32> = load_checkpoint(&path)?;
    assert!(back.bitwise_eq(&pair.small));
    println!("checkpoint {} round-trips, checksum {}", path.display(), &back.checksum()[..16]);
    Ok(())
}
