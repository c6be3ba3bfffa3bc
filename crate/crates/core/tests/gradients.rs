mod common;

use common::*;

#[test]
fn hypernetwork_gradients_match_finite_differences() {
    let (e, name) = hyper_grad_error();
    assert!(e < 1e-3, "{name}: {e:e}");
}

#[test]
fn model_gradients_match_finite_differences() {
    let (e, name) = model_grad_error();
    assert!(e < 1e-3, "{name}: {e:e}");
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let (e, name) = lora_grad_error();
    assert!(e < 1e-3, "{name}: {e:e}");
}
