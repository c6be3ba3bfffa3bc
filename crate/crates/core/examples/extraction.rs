//! Copies neurons out of the large model under each layer and neuron
//! strategy, and runs the sensitivity-based submatrix search.

mod common;

use pktlab::attribution::{score_matrices, LensMode, NeuronKind};
use pktlab::extraction::{
    extract, seeking_extract, sensitivity, DimReduction, ExtractionPlan, LayerStrategy, NeuronStrategy,
};

fn main() -> pktlab::Result<()> {
    let pair = common::trained_pair(0)?;
    let extract_set = pair.set(&pair.splits.extract);
    let scores = score_matrices(&pair.large, &extract_set, LensMode::FinalNorm)?;
    let sens = sensitivity(&pair.large, &extract_set)?;

    for layer in [
        LayerStrategy::Top,
        LayerStrategy::Bottom,
        LayerStrategy::Random,
        LayerStrategy::Attribution,
        LayerStrategy::Sensitivity,
    ] {
        for neuron in [NeuronStrategy::Random, NeuronStrategy::Importance, NeuronStrategy::Attribution] {
            let plan = ExtractionPlan { layer, neuron, reduce: DimReduction::Pca, fraction: 0.25, seed: 0 };
            let d = extract(&pair.large, &pair.small.config, &plan, Some(&scores), Some(&sens))?;
            let ffn = d.block(0, NeuronKind::Ffn).expect("one block per target layer");
            println!(
                "{:<12} {:<11} source layers {:?}  first ffn block: {} neurons {:?}",
                layer.name(),
                neuron.name(),
                d.blocks.iter().filter(|b| b.kind == NeuronKind::Ffn).map(|b| b.source_layer).collect::<Vec<_>>(),
                ffn.indices.len(),
                &ffn.indices[..4]
            );
        }
    }

    println!(
        "\nsensitivity layer scores {:?}",
        sens.layer_scores().iter().map(|s| format!("{s:.3e}")).collect::<Vec<_>>()
    );
    for b in seeking_extract(&pair.large, &pair.small.config, &sens)? {
        println!(
            "seeking layer {} -> {} {:<4} {:?} after {} rounds, mass {:.3e}",
            b.source_layer,
            b.target_layer,
            b.kind.name(),
            b.sub.extract.shape(),
            b.sub.iterations,
            b.sub.score
        );
    }
    Ok(())
}
