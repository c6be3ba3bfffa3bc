mod common;

use common::*;
use pktlab::analysis::{cosine, delta_stats, linear_cka, paired_layer, representation_similarity};
use pktlab::model::TransformerParams;
use pktlab::model::WeightKind;
use pktlab::Tensor;

#[test]
fn cka_properties() {
    let o = criterion_cka();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn cka_rejects_degenerate_input() {
    let x = Tensor::<f64>::randn(&[10, 3], 1.0, &mut rng(1));
    assert!(linear_cka(&x, &Tensor::zeros(&[10, 3])).is_err());
    assert!(linear_cka(&x, &Tensor::zeros(&[9, 3])).is_err());
}

#[test]
fn model_against_itself_scores_one() {
    let p: TransformerParams<f32> = random_model(config(2, 8, 16, 2, 12, 4), 0.3);
    let probe = random_examples(12, 6, 3, 2);
    let entries = representation_similarity(&p, &p, &probe, &WeightKind::ALL).unwrap();
    assert_eq!(entries.len(), 8);
    assert!(entries.iter().all(|e| (e.cka - 1.0).abs() < 1e-6));
}

#[test]
fn proportional_layer_pairing() {
    assert_eq!((0..6).map(|l| paired_layer(l, 6, 4)).collect::<Vec<_>>(), vec![0, 1, 1, 2, 3, 3]);
    assert_eq!((0..4).map(|l| paired_layer(l, 4, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn cosine_extremes() {
    let a = Tensor::<f64>::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
    let b = Tensor::<f64>::from_rows(&[[0.0, 3.0], [-1.0, 0.0]]);
    assert!((cosine(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
    assert!(cosine(&a, &b).unwrap().unwrap().abs() < 1e-6);
    assert_eq!(cosine(&a, &Tensor::zeros(&[2, 2])).unwrap(), None);
}

#[test]
fn delta_stats_of_zeros() {
    let s = delta_stats(&[0.0; 10]).unwrap();
    assert_eq!((s.min, s.max, s.mean, s.frac_above_002, s.frac_above_005), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert_eq!(s.histogram[0], 10);
    assert!(delta_stats(&[]).is_err());
    assert!(delta_stats(&[f64::NAN]).is_err());
}
