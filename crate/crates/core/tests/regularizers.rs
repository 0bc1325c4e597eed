mod common;

use dabs_core::objectives::loss::values;
use proptest::prelude::*;

#[test]
fn large_span_mask_weight_suppresses_on_span_gates() {
    let s = common::span_suppression(10.0, 1).unwrap();
    assert!(s.on_span < 0.05, "on-span gate mean {:.4}", s.on_span);
    // only the span is penalized
    assert!(s.off_span > s.on_span, "{s:?}");
}

#[test]
fn dominant_entropy_weight_flattens_fusion_gates() {
    let worst = common::fusion_uniformity(10.0, 1).unwrap();
    assert!(worst < 0.1, "max |g - 1/3| = {worst:.4}");
}

#[test]
fn gate_entropy_of_uniform_gate_is_minus_ln3() {
    let r = values::gate_entropy(&[1.0 / 3.0; 3]);
    assert!((r + 3f64.ln()).abs() < 1e-9, "{r}");
}

proptest! {
    #[test]
    fn sparsity_lies_between_zero_and_one(w in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let r = values::sparsity(&w);
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn sparsity_endpoints() {
    assert_eq!(values::sparsity(&[0.0; 7]), 0.0);
    assert_eq!(values::sparsity(&[1.0; 7]), 1.0);
}
