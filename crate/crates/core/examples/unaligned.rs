//! Injects extracted neurons straight into the small model after a
//! closed-form width reduction. Without alignment this hurts.

mod common;

use pktlab::attribution::{score_matrices, LensMode};
use pktlab::extraction::{extract, reduce_dim, DimReduction, ExtractionPlan, LayerStrategy, NeuronStrategy};
use pktlab::model::accuracy;
use pktlab::transfer::{inject_unaligned, SlotPairing};

fn main() -> pktlab::Result<()> {
    let pair = common::trained_pair(0)?;
    let extract_set = pair.set(&pair.splits.extract);
    let eval = pair.set(&pair.splits.eval);
    let large_only = pair.set(&pair.splits.large_only);
    let scores_l = score_matrices(&pair.large, &extract_set, LensMode::FinalNorm)?;
    let scores_s = score_matrices(&pair.small, &extract_set, LensMode::FinalNorm)?;

    println!(
        "{:<22} eval {:.3}  large-only {:.3}",
        "base small",
        accuracy(&pair.small, &eval)?,
        accuracy(&pair.small, &large_only)?
    );
    for reduce in [DimReduction::Pca, DimReduction::Whitening, DimReduction::EmbeddingTransform] {
        let plan = ExtractionPlan {
            layer: LayerStrategy::Attribution,
            neuron: NeuronStrategy::Attribution,
            reduce,
            fraction: 0.25,
            seed: 0,
        };
        let delta = extract(&pair.large, &pair.small.config, &plan, Some(&scores_l), None)?;
        let reduced =
            reduce_dim(&delta, reduce, &pair.large.embed, Some(&pair.small.embed), pair.small.config.d_model)?;
        let injected =
            inject_unaligned(&pair.small, &reduced, &pair.large.config, SlotPairing::RankMatched, Some(&scores_s))?;
        println!(
            "{:<22} eval {:.3}  large-only {:.3}",
            format!("+ {}", reduce.name()),
            accuracy(&injected, &eval)?,
            accuracy(&injected, &large_only)?
        );
    }
    Ok(())
}
