//! Finite-difference checks of every differentiable path, plus negative
//! controls that break one backward rule and must be caught.

use uniadapter_core::config::Activation;
use uniadapter_core::gradcheck::{check_names, run_gradcheck, TOLERANCE};
use uniadapter_tensor::OpKind;

#[test]
fn every_check_passes_with_relu() {
    let r = run_gradcheck(1, Activation::Relu, None).unwrap();
    assert!(r.passed(), "{}", r.render());
    assert_eq!(r.results.len(), check_names().len());
    assert!(r.results.iter().all(|c| c.params > 0));
}

#[test]
fn every_check_passes_with_gelu_and_another_seed() {
    let r = run_gradcheck(7, Activation::Gelu, None).unwrap();
    assert!(r.passed(), "{}", r.render());
}

#[test]
fn corrupted_rules_are_caught() {
    for (kind, must_fail) in [
        (OpKind::MatMul, "residual_bottleneck_adapter"),
        (OpKind::Relu, "uniadapter_crossmodal"),
        (OpKind::LayerNorm, "frozen_block_self_attention"),
        (OpKind::Attention, "frozen_block_cross_attention"),
        (OpKind::Softmax, "frame_weights"),
        (OpKind::CrossEntropy, "image_retrieval_loss"),
    ] {
        let r = run_gradcheck(1, Activation::Relu, Some(kind)).unwrap();
        let failed: Vec<&str> = r.failures().iter().map(|c| c.name).collect();
        assert!(failed.contains(&must_fail), "{kind}: {failed:?}");
        assert!(r.render().contains("deliberately corrupted"));
        assert!(r.failures().iter().all(|c| c.max_rel_err > TOLERANCE));
    }
}
