mod common;

use common::*;
use pktlab::attribution::{importance, logit_lens_readout, top_layers, top_neurons, LensMode, NeuronId, NeuronKind};
use pktlab::model::forward;
use pktlab::model::TransformerParams;
use pktlab::Tensor;

#[test]
fn fast_scores_match_per_neuron_loop() {
    for (i, shape) in [(1, 8, 16, 2), (2, 16, 32, 4)].into_iter().enumerate() {
        let gap = attribution_gap(i as u64 + 20, shape);
        assert!(gap <= 1e-6, "gap {gap:e} on {shape:?}");
    }
}

#[test]
fn zero_vector_scores_exactly_zero() {
    assert!(zero_neuron_scores().iter().all(|&v| v == 0.0));
    let mut p: TransformerParams<f32> = random_model(config(1, 8, 16, 2, 12, 2), 0.3);
    p.layers[0].w_down.set_col(3, &[0.0; 8]);
    let trace = forward(&p, &[1, 2, 3], true).unwrap().trace.unwrap();
    for mode in [LensMode::FinalNorm, LensMode::Raw] {
        let id = NeuronId { layer: 0, kind: NeuronKind::Ffn, index: 3 };
        assert_eq!(importance(&p, &trace, id, 2, 5, mode).unwrap(), 0.0);
    }
}

#[test]
fn out_of_range_neuron_is_an_index_error() {
    let p: TransformerParams<f32> = random_model(config(1, 8, 16, 2, 12, 2), 0.3);
    let trace = forward(&p, &[1, 2], true).unwrap().trace.unwrap();
    let id = NeuronId { layer: 0, kind: NeuronKind::Mhsa, index: 8 };
    assert!(importance(&p, &trace, id, 1, 0, LensMode::Raw).is_err());
}

#[test]
fn zero_readout_breaks_ties_by_token_id() {
    let p: TransformerParams<f32> = random_model(config(1, 8, 16, 2, 12, 2), 0.3);
    let top = logit_lens_readout(&p, &[0.0; 8], 4).unwrap();
    assert_eq!(top.iter().map(|e| e.token).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert!(top.iter().all(|e| e.logit == 0.0));
}

#[test]
fn top_selection_orders() {
    let s = Tensor::<f64>::from_rows(&[[0.1, 0.5, 0.5], [2.0, -1.0, 0.0], [0.3, 0.3, 0.3]]);
    assert_eq!(top_layers(&s, 2).unwrap(), vec![0, 1]);
    assert_eq!(top_neurons(&s, 0, 2).unwrap(), vec![1, 2]);
    assert!(top_layers(&s, 4).is_err());
}
