//! Ranks neurons of a trained model by how much their residual-stream
//! contribution raises the answer's log-probability, then reads the best
//! neuron's vector through the unembedding.

mod common;

use pktlab::attribution::{
    importance, layer_scores, logit_lens_readout, neuron_vector, score_matrices, top_layers, top_neurons, LensMode,
    NeuronId, NeuronKind,
};
use pktlab::model::forward;

fn main() -> pktlab::Result<()> {
    let pair = common::trained_pair(0)?;
    let extract = pair.set(&pair.splits.extract);
    let scores = score_matrices(&pair.large, &extract, LensMode::FinalNorm)?;

    for kind in [NeuronKind::Ffn, NeuronKind::Mhsa] {
        let m = scores.get(kind);
        let per_layer: Vec<String> = layer_scores(m).iter().map(|s| format!("{s:.3}")).collect();
        let layers = top_layers(m, pair.small.config.layers)?;
        println!("{:<4} layer scores [{}] -> keep layers {layers:?}", kind.name(), per_layer.join(", "));
        for &l in &layers {
            println!("     layer {l}: top neurons {:?}", top_neurons(m, l, 5)?);
        }
    }

    let ex = &extract[0];
    let pos = ex.prompt.len() - 1;
    let layer = top_layers(scores.get(NeuronKind::Ffn), 1)?[0];
    let index = top_neurons(scores.get(NeuronKind::Ffn), layer, 1)?[0];
    let id = NeuronId { layer, kind: NeuronKind::Ffn, index };
    let trace = forward(&pair.large, &ex.prompt, true)?.trace.expect("trace requested");
    let gain = importance(&pair.large, &trace, id, pos, ex.answer, LensMode::FinalNorm)?;
    let v = neuron_vector(&pair.large, &trace, id, pos)?;
    let readout = logit_lens_readout(&pair.large, &v, 5)?;
    println!("\nexample {:?} -> {}: ffn neuron {layer}.{index} adds {gain:+.4} nats", ex.prompt, ex.answer);
    println!("its vector reads as tokens {:?}", readout.iter().map(|r| r.token).collect::<Vec<_>>());

    let csv = scores.to_csv();
    println!("\nscore CSV: {} rows, header {:?}", csv.lines().count() - 1, csv.lines().next().unwrap_or(""));
    Ok(())
}
