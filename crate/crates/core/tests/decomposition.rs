mod common;

use common::*;
use pktlab::model::forward;
use pktlab::model::TransformerParams;

#[test]
fn neuron_sums_match_sublayer_outputs() {
    let o = criterion_decomposition();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn residual_identity_is_exact() {
    let p: TransformerParams<f32> = random_model(config(2, 16, 32, 4, 20, 5), 0.3);
    let trace = forward(&p, &[1, 4, 9, 2], true).unwrap().trace.unwrap();
    for lt in &trace.layers {
        for i in 0..4 {
            for r in 0..16 {
                let sum = lt.h_in.get(i, r) + lt.attn_out.get(i, r) + lt.ffn_out.get(i, r);
                let direct = lt.h_mid.get(i, r) + lt.ffn_out.get(i, r);
                assert_eq!(lt.h_out.get(i, r), direct);
                assert!((lt.h_out.get(i, r) - sum).abs() <= 1e-6 * sum.abs().max(1.0));
            }
        }
    }
}

#[test]
fn later_tokens_do_not_change_earlier_logits() {
    let p: TransformerParams<f64> = random_model(config(2, 8, 16, 2, 20, 6), 0.3);
    let a = forward(&p, &[3, 7, 1, 5], false).unwrap().logits;
    let b = forward(&p, &[3, 7, 12, 19], false).unwrap().logits;
    for t in 0..2 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert_ne!(a.row(2), b.row(2));
}
