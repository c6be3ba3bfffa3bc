//! Fine-tunes low-rank adapters on the small model under the three
//! initializations and compares how much each adapter resembles the weight
//! it sits on.

mod common;

use pktlab::analysis::parametric_similarity;
use pktlab::extraction::{seeking_extract, sensitivity};
use pktlab::model::{accuracy, TrainOptions};
use pktlab::transfer::{attach_lora, lora_finetune, LoraInit};

fn main() -> pktlab::Result<()> {
    let pair = common::trained_pair(0)?;
    let train = pair.set(&pair.splits.train);
    let large_only = pair.set(&pair.splits.large_only);
    let eval = pair.set(&pair.splits.eval);
    let sens = sensitivity(&pair.large, &pair.set(&pair.splits.extract))?;
    let seeking = seeking_extract(&pair.large, &pair.small.config, &sens)?;
    let opts = TrainOptions { epochs: 5, lr: 3e-4, batch_size: 8, warmup: 4, ..TrainOptions::default() };

    println!(
        "base small: eval {:.3}  large-only {:.3}",
        accuracy(&pair.small, &eval)?,
        accuracy(&pair.small, &large_only)?
    );
    for init in [LoraInit::Random, LoraInit::Pissa, LoraInit::Seeking] {
        let mut m = attach_lora(&pair.small, init, 4, Some(&seeking), 0)?;
        let items: Vec<_> = m
            .factors
            .iter()
            .map(|f| {
                (
                    f.layer,
                    f.kind,
                    f.product(),
                    pair.small.layers[f.layer].get(f.kind).clone(),
                    m.base.layers[f.layer].get(f.kind).clone(),
                )
            })
            .collect();
        let sim = parametric_similarity(&items)?;
        let report = lora_finetune(&mut m, &train, &opts)?;
        let merged = m.merged();
        println!(
            "{:<8} cos(BA, W) {:.3}  loss {:.3} -> {:.3}  eval {:.3}  large-only {:.3}",
            init.name(),
            sim.mean_lora_vs_original,
            report.loss_curve[0],
            report.loss_curve[report.loss_curve.len() - 1],
            accuracy(&merged, &eval)?,
            accuracy(&merged, &large_only)?
        );
    }
    Ok(())
}
