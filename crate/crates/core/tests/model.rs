//! Shape contract, conv adjointness, encoder independence and ensemble fusion.

mod common;

use cetc_core::encoder::SubEncoderId;
use cetc_core::{Cetc, EnsembleCoefficients, Graph, ModelConfig, Tensor};
use common::model_props::{
    adjoint_rel_err, convexity_violation, decoded_maps, decoder_grad, encoder_isolation, routing_ratios,
    shape_report, translation_error, unit_alpha_is_fsd1, ConvSpec, DECODER_SPECS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn shape_contract_at_224() {
    let r = shape_report(ModelConfig::desk(), 2);
    let cfg = ModelConfig::desk().encoder.out_channels();
    assert_eq!(r.encoder[0], [2, cfg[0], 112, 112]);
    assert_eq!(r.encoder[1], [2, cfg[1], 28, 28]);
    assert_eq!(r.encoder[2], [2, cfg[2], 56, 56]);
    for d in &r.decoder {
        assert_eq!(d[2..], [224, 224]);
    }
    assert_eq!(r.logits, [2, 2]);
    assert_eq!(r.tokens, [3136, 784, 196, 49]);
}

#[test]
fn tiny_and_micro_shapes() {
    let r = shape_report(ModelConfig::tiny(), 1);
    assert_eq!(r.tokens, [3136, 784, 196, 49]);
    assert_eq!(r.logits, [1, 2]);
    let r = shape_report(ModelConfig::micro(), 3);
    assert_eq!(r.tokens, [256, 64, 16, 4]);
    assert!(r.decoder.iter().all(|d| d[2..] == [32, 32]));
}

#[test]
fn wrong_input_size_is_a_shape_error() {
    let model = Cetc::new(ModelConfig::micro()).unwrap();
    let params = model.init_params(0).unwrap();
    let err = model
        .predict(&params, &Tensor::zeros(&[1, 3, 24, 24]), &EnsembleCoefficients::EQUAL)
        .unwrap_err();
    assert_eq!(err.kind(), "shape");
}

#[test]
fn adjoint_holds_for_decoder_geometries() {
    for spec in DECODER_SPECS {
        for seed in 0..3 {
            let e = adjoint_rel_err(spec, seed);
            assert!(e <= 1e-8, "{spec:?}: {e:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_holds_for_random_geometries(
        cin in 1usize..4, cout in 1usize..4, kernel in 1usize..6, stride in 1usize..5,
        padding in 0usize..3, extra in 0usize..9, seed in 0u64..1000,
    ) {
        prop_assume!(padding < kernel);
        let side = kernel + extra;
        let spec = ConvSpec { cin, cout, kernel, stride, padding, side };
        prop_assert!(adjoint_rel_err(spec, seed) <= 1e-8);
    }

    #[test]
    fn conv_shape_algebra(side in 4usize..30, kernel in 1usize..6, stride in 1usize..5, padding in 0usize..3) {
        prop_assume!(kernel <= side + 2 * padding);
        let spec = ConvSpec { cin: 1, cout: 1, kernel, stride, padding, side };
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 1, side, side]));
        let w = g.constant(Tensor::zeros(&[1, 1, kernel, kernel]));
        let y = g.conv2d(x, w, None, cetc_core::ConvGeometry::new(stride, padding)).unwrap();
        let out = (side + 2 * padding - kernel) / stride + 1;
        prop_assert_eq!(g.shape(y), &[1, 1, out, out][..]);
        let geom = cetc_core::ConvGeometry::new(stride, padding).with_output_padding(spec.output_padding());
        let back = g.conv_transpose2d(y, w, None, geom).unwrap();
        prop_assert_eq!(g.shape(back), &[1, 1, side, side][..]);
    }
}

#[test]
fn encoders_are_independent() {
    for which in SubEncoderId::ALL {
        for (name, max) in encoder_isolation(ModelConfig::micro(), which, 3) {
            let own = name.starts_with(&format!("ceb.{}.", which.key()));
            if own {
                assert!(max > 0.0, "{name} gets no gradient from its own map");
            } else {
                assert_eq!(max, 0.0, "{name} leaks into {which:?}");
            }
        }
    }
}

#[test]
fn perturbing_one_encoder_leaves_the_others_unchanged() {
    let model = Cetc::new(ModelConfig::micro()).unwrap();
    let params = model.init_params(1).unwrap();
    let mut bumped = params.clone();
    for (name, t) in bumped.iter_mut() {
        if name.starts_with("ceb.se2.") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
    }
    let input = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let maps = |p| {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let out = model.ceb.forward(&mut g, p, x).unwrap();
        out.as_array().map(|n| g.value(n).clone())
    };
    let (a, b) = (maps(&params), maps(&bumped));
    assert_eq!(a[0], b[0]);
    assert_eq!(a[2], b[2]);
    assert_ne!(a[1], b[1]);
}

#[test]
fn encoders_commute_with_aligned_translation() {
    for which in SubEncoderId::ALL {
        let e = translation_error(ModelConfig::micro(), which, 64, 2, 4);
        assert!(e <= 1e-12, "{which:?}: {e:e}");
    }
}

#[test]
fn zero_weights_give_zero_encoder_maps() {
    let model = Cetc::new(ModelConfig::micro()).unwrap();
    let mut params = model.init_params(0).unwrap();
    params.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
    let mut g = Graph::inference();
    let x = g.constant(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
    let out = model.ceb.forward(&mut g, &params, x).unwrap();
    assert!(out.as_array().iter().all(|&n| g.value(n).data().iter().all(|&v| v == 0.0)));
}

#[test]
fn unit_alpha_reproduces_fsd1_bitwise() {
    assert!(unit_alpha_is_fsd1(&decoded_maps(ModelConfig::micro(), 0)));
}

#[test]
fn fused_map_stays_inside_the_decoder_envelope() {
    let maps = decoded_maps(ModelConfig::micro(), 1);
    assert!(convexity_violation(&maps, 100, 9) <= 1e-12);
}

#[test]
fn gradient_routing_scales_with_alpha() {
    let maps = decoded_maps(ModelConfig::micro(), 2);
    let (ratios, worst) = routing_ratios(&maps);
    for (r, want) in ratios.iter().zip([0.0, 1.0, 2.0]) {
        assert!((r - want).abs() <= 1e-6, "ratios {ratios:?}");
    }
    assert!(worst <= 1e-6, "elementwise deviation {worst:e}");
}

#[test]
fn zero_weight_decoders_get_zero_gradient() {
    let maps = decoded_maps(ModelConfig::micro(), 3);
    let unit = EnsembleCoefficients::new(1.0, 0.0, 0.0).unwrap();
    for prefix in ["tdb.sd2.", "tdb.sd3.", "ceb.se2.", "ceb.se3."] {
        let g = decoder_grad(&maps, &unit, &unit, prefix);
        assert!(!g.is_empty());
        assert!(g.iter().all(|&v| v == 0.0), "{prefix}");
    }
    assert!(decoder_grad(&maps, &unit, &unit, "tdb.sd1.").iter().any(|&v| v != 0.0));
}
