//! Reverse-mode gradients against central finite differences (h = 1e-5).

mod common;

use cetc_core::{ConvGeometry, Graph, Tensor};
use common::grad_cases::{end_to_end_worst, find_case, primitive_worst, END_TO_END_TOL, PRIMITIVE_TOL};

fn assert_primitive(name: &str) {
    let (err, detail) = primitive_worst(&find_case(name));
    assert!(err <= PRIMITIVE_TOL, "max rel err {err:e} ({detail})");
}

#[test]
fn conv2d_gradients() {
    assert_primitive("conv2d");
}

#[test]
fn conv2d_output_shape_example() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, w, None, ConvGeometry::new(2, 1)).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 4]);
}

#[test]
fn conv_transpose2d_gradients() {
    assert_primitive("conv_transpose2d s2");
    assert_primitive("conv_transpose2d 5x5 s4");
    assert_primitive("conv_transpose2d 4x4 s4");
}

#[test]
fn linear_gradients() {
    assert_primitive("linear");
}

#[test]
fn layer_norm_gradients() {
    assert_primitive("layer_norm");
}

#[test]
fn activation_gradients() {
    assert_primitive("relu");
    assert_primitive("gelu");
}

#[test]
fn cross_entropy_gradients() {
    assert_primitive("softmax_cross_entropy");
}

#[test]
fn cross_entropy_gradient_closed_form() {
    let mut g = Graph::new();
    let logits = g.variable(Tensor::new(&[2, 2], vec![0.5, -0.5, 2.0, 1.0]).unwrap());
    let loss = g.softmax_cross_entropy(logits, &[0, 1]).unwrap();
    let grad = g.backward(loss).unwrap().get(logits).unwrap().clone();
    for (row, label) in [(0usize, 0usize), (1, 1)] {
        let l = &g.value(logits).data()[row * 2..row * 2 + 2];
        let z = l[0].exp() + l[1].exp();
        for c in 0..2 {
            let p = l[c].exp() / z;
            let expected = (p - if c == label { 1.0 } else { 0.0 }) / 2.0;
            assert!((grad.data()[row * 2 + c] - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn window_attention_gradients() {
    assert_primitive("window_attention");
}

#[test]
fn data_movement_and_reduction_gradients() {
    for name in ["gather", "weighted_sum", "mean_tokens", "add"] {
        assert_primitive(name);
    }
}

#[test]
fn gelu_matches_normal_cdf_oracle() {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    for x in [-3.0, -1.0, -0.25, 0.0, 0.5, 1.0, 2.5] {
        let v = cetc_core::autograd::gelu(x);
        // statrs' erf is only good to ~2e-11 near |x| = 0.7
        assert!((v - x * n.cdf(x)).abs() < 1e-10, "gelu({x}) = {v:e}, oracle {:e}", x * n.cdf(x));
    }
    // tabulated Phi(-1)
    assert!((cetc_core::autograd::gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    assert!((cetc_core::autograd::gelu(1.0) - 0.841_345).abs() < 1e-6);
}

#[test]
fn end_to_end_tiny_model_gradients() {
    let (err, detail) = end_to_end_worst().unwrap();
    assert!(err <= END_TO_END_TOL, "{detail}");
}
