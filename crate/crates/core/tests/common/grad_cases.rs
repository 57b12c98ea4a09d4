//! The finite-difference gradient suite: every differentiable primitive plus
//! the whole tiny model.

use cetc_core::autograd::Activation;
use cetc_core::transformer::build_shift_mask;
use cetc_core::{Cetc, ConvGeometry, EnsembleCoefficients, Graph, ModelConfig, NodeId, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, rel_err, FD_STEP};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 5;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub build: Build,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> PrimitiveCase {
    PrimitiveCase {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Relu inputs kept away from the kink so central differences are exact.
fn away_from_zero(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![Tensor::from_fn(&[40], |_| {
        let m = r.gen_range(0.1..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })]
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let mask = build_shift_mask(4, 4, 2, 1).expect("mask");
    vec![
        case(
            "conv2d",
            |r| vec![randn(&[2, 3, 8, 8], r), randn(&[4, 3, 3, 3], r), randn(&[4], r)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(2, 1)),
        ),
        case(
            "conv_transpose2d s2",
            |r| vec![randn(&[2, 3, 4, 4], r), randn(&[3, 2, 3, 3], r), randn(&[2], r)],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::new(2, 1).with_output_padding(1)),
        ),
        case(
            "conv_transpose2d 5x5 s4",
            |r| vec![randn(&[1, 2, 3, 3], r), randn(&[2, 2, 5, 5], r), randn(&[2], r)],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::new(4, 2).with_output_padding(3)),
        ),
        case(
            "conv_transpose2d 4x4 s4",
            |r| vec![randn(&[1, 2, 3, 3], r), randn(&[2, 3, 4, 4], r), randn(&[3], r)],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::new(4, 0)),
        ),
        case(
            "linear",
            |r| vec![randn(&[3, 2, 5], r), randn(&[4, 5], r), randn(&[4], r)],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "layer_norm",
            |r| vec![randn(&[2, 3, 6], r), randn(&[6], r), randn(&[6], r)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("relu", away_from_zero, |g, v| Ok(g.activation(v[0], Activation::Relu))),
        case("gelu", |r| vec![randn(&[40], r)], |g, v| Ok(g.activation(v[0], Activation::Gelu))),
        case(
            "softmax_cross_entropy",
            |r| vec![Tensor::randn(&[6, 2], 3.0, r)],
            |g, v| g.softmax_cross_entropy(v[0], &[0, 1, 1, 0, 1, 0]),
        ),
        case(
            "window_attention",
            |r| {
                vec![
                    randn(&[4, 2, 4, 3], r),
                    randn(&[4, 2, 4, 3], r),
                    randn(&[4, 2, 4, 3], r),
                    randn(&[2, 4, 4], r),
                ]
            },
            move |g, v| g.window_attention(v[0], v[1], v[2], Some(v[3]), Some(&mask), 0.5),
        ),
        case("gather", |r| vec![randn(&[2, 3, 4], r)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case(
            "weighted_sum",
            |r| vec![randn(&[3, 4], r), randn(&[3, 4], r), randn(&[3, 4], r)],
            |g, v| g.weighted_sum(&[(v[0], 0.2), (v[1], 0.6), (v[2], 0.2)]),
        ),
        case("mean_tokens", |r| vec![randn(&[2, 5, 3], r)], |g, v| g.mean_tokens(v[0])),
        case(
            "add",
            |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)],
            |g, v| g.add(v[0], v[1]),
        ),
    ]
}

pub fn find_case(name: &str) -> PrimitiveCase {
    primitive_cases()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no gradient case {name}"))
}

/// Worst relative error of one primitive over `SEEDS` seeds, 24 sampled entries per input.
pub fn primitive_worst(c: &PrimitiveCase) -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (c.inputs)(&mut rng);
        let report = check_inputs(&xs, &c.build, 24, &mut rng);
        if report.max_rel_err >= worst.0 {
            worst = (report.max_rel_err, format!("{} seed {seed}: {}", c.name, report.worst));
        }
    }
    worst
}

/// Full tiny model, cross-entropy loss, every parameter tensor sampled.
///
/// Central differences are only an oracle where the loss is smooth across
/// [p - h, p + h]; samples whose relu sign pattern changes inside that span are
/// skipped, and if a tensor has no smooth entry the evaluation point is redrawn.
pub fn end_to_end_worst() -> std::result::Result<(f64, String), String> {
    let model = Cetc::new(ModelConfig::tiny()).unwrap();
    let coeffs = EnsembleCoefficients::new(0.5, 0.3, 0.2).unwrap();
    let mut worst = (0.0f64, String::new());
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let found = (0..20).find_map(|_| check_tiny_point(&model, &coeffs, seed, &mut rng));
        let (err, detail) = found.ok_or_else(|| format!("seed {seed}: no smooth evaluation point found"))?;
        if err >= worst.0 {
            worst = (err, format!("seed {seed}: {detail}"));
        }
    }
    Ok(worst)
}

fn check_tiny_point(
    model: &Cetc,
    coeffs: &EnsembleCoefficients,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Option<(f64, String)> {
    let mut params = model.init_params(seed).unwrap();
    // zero-initialized biases put relu inputs exactly on the kink; move to a generic point
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let input = Tensor::randn(&[1, 3, 56, 56], 1.0, rng);
    let labels = [rng.gen_range(0..2)];
    let loss_of = |p: &ParamStore| {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let out = model.forward(&mut g, p, x, coeffs).unwrap();
        let loss = g.softmax_cross_entropy(out.logits, &labels).unwrap();
        (g, loss)
    };
    let (g, loss) = loss_of(&params);
    let grads = g.backward(loss).unwrap().param_grads(&g);
    assert_eq!(grads.len(), params.len());
    let mut worst = (0.0f64, String::new());
    for (name, value) in params.iter() {
        let mut checked = 0;
        for _ in 0..(2 * value.numel()).min(24) {
            if checked == 2 {
                break;
            }
            let j = rng.gen_range(0..value.numel());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            let (gp, lp) = loss_of(&plus);
            let (gm, lm) = loss_of(&minus);
            if relu_pattern_changes(&g, &gp) || relu_pattern_changes(&g, &gm) {
                continue;
            }
            checked += 1;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * FD_STEP);
            let a = grads[name].data()[j];
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
        if checked == 0 {
            return None;
        }
    }
    Some(worst)
}

/// True when some relu input changes sign between two evaluations of the same
/// graph, i.e. the loss is not smooth on the segment the difference spans.
fn relu_pattern_changes(a: &Graph, b: &Graph) -> bool {
    a.node_ids().any(|id| {
        a.op_name(id) == "relu"
            && a.value(id).data().iter().zip(b.value(id).data()).any(|(x, y)| (*x > 0.0) != (*y > 0.0))
    })
}
