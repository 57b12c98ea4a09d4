//! Shape, adjoint and ensemble properties of the assembled model.

use cetc_core::decoder::ensemble_sum;
use cetc_core::encoder::SubEncoderId;
use cetc_core::{Cetc, ConvGeometry, EnsembleCoefficients, Graph, ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One conv geometry; the transposed conv maps the conv output back to `side`.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub side: usize,
}

impl ConvSpec {
    /// Output padding that makes the transposed conv land on `side` again.
    pub fn output_padding(&self) -> usize {
        (self.side + 2 * self.padding - self.kernel) % self.stride
    }
}

/// The decoder geometries: 5x5 stride 4 and 5x5 stride 2 (SD2), 4x4 stride 4 (SD3).
pub const DECODER_SPECS: [ConvSpec; 3] = [
    ConvSpec { cin: 3, cout: 4, kernel: 5, stride: 4, padding: 2, side: 28 },
    ConvSpec { cin: 4, cout: 3, kernel: 5, stride: 2, padding: 2, side: 56 },
    ConvSpec { cin: 5, cout: 3, kernel: 4, stride: 4, padding: 0, side: 56 },
];

/// `|<conv(y), x> - <y, convT(x)>| / max(|.|, |.|)` with random `x`, `y`, `w`.
pub fn adjoint_rel_err(spec: ConvSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.side;
    let y = Tensor::randn(&[2, spec.cin, s, s], 1.0, &mut rng);
    let w = Tensor::randn(&[spec.cout, spec.cin, spec.kernel, spec.kernel], 1.0, &mut rng);
    let mut g = Graph::inference();
    let (yn, wn) = (g.constant(y.clone()), g.constant(w));
    let conv = g
        .conv2d(yn, wn, None, ConvGeometry::new(spec.stride, spec.padding))
        .unwrap();
    let x = Tensor::randn(g.shape(conv), 1.0, &mut rng);
    let xn = g.constant(x.clone());
    let geom = ConvGeometry::new(spec.stride, spec.padding).with_output_padding(spec.output_padding());
    let back = g.conv_transpose2d(xn, wn, None, geom).unwrap();
    assert_eq!(g.shape(back), y.shape(), "{spec:?}");
    let lhs = g.value(conv).dot(&x);
    let rhs = y.dot(g.value(back));
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

#[derive(Debug)]
pub struct ShapeReport {
    pub encoder: [Vec<usize>; 3],
    pub decoder: [Vec<usize>; 3],
    pub logits: Vec<usize>,
    pub tokens: Vec<usize>,
}

pub fn shape_report(config: ModelConfig, batch: usize) -> ShapeReport {
    let model = Cetc::new(config).unwrap();
    let params = model.init_params(0).unwrap();
    let c = &model.config;
    let input = Tensor::randn(
        &[batch, c.in_channels, c.image_size, c.image_size],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let mut g = Graph::inference();
    let x = g.constant(input);
    let out = model.forward(&mut g, &params, x, &EnsembleCoefficients::EQUAL).unwrap();
    let levels = model.tcb.encode_levels(&mut g, &params, out.fused).unwrap();
    ShapeReport {
        encoder: out.ceb.as_array().map(|n| g.shape(n).to_vec()),
        decoder: out.fsd.map(|n| g.shape(n).to_vec()),
        logits: g.shape(out.logits).to_vec(),
        tokens: levels.iter().map(|t| t.count()).collect(),
    }
}

/// A model with its three decoded maps for one random input.
pub struct DecodedMaps {
    pub model: Cetc,
    pub params: ParamStore,
    pub input: Tensor,
    pub fsd: [Tensor; 3],
}

pub fn decoded_maps(config: ModelConfig, seed: u64) -> DecodedMaps {
    let model = Cetc::new(config).unwrap();
    let params = model.init_params(seed).unwrap();
    let s = model.config.image_size;
    let input = Tensor::randn(&[2, model.config.in_channels, s, s], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let mut g = Graph::inference();
    let x = g.constant(input.clone());
    let ceb = model.ceb.forward(&mut g, &params, x).unwrap();
    let fsd = model.tdb.decode(&mut g, &params, ceb.as_array()).unwrap();
    DecodedMaps {
        fsd: fsd.map(|n| g.value(n).clone()),
        model,
        params,
        input,
    }
}

pub fn fuse(fsd: &[Tensor; 3], coeffs: &EnsembleCoefficients) -> Tensor {
    let mut g = Graph::inference();
    let ids = [0, 1, 2].map(|i| g.constant(fsd[i].clone()));
    let f = ensemble_sum(&mut g, ids, coeffs).unwrap();
    g.value(f).clone()
}

/// Whether the full forward with `(1, 0, 0)` feeds the transformer exactly FSD1.
pub fn unit_alpha_is_fsd1(maps: &DecodedMaps) -> bool {
    let mut g = Graph::inference();
    let x = g.constant(maps.input.clone());
    let coeffs = EnsembleCoefficients::new(1.0, 0.0, 0.0).unwrap();
    let out = maps.model.forward(&mut g, &maps.params, x, &coeffs).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(g.value(out.fused)) == bits(g.value(out.fsd[0])) && bits(g.value(out.fused)) == bits(&maps.fsd[0])
}

/// Largest excursion of the fused map outside the elementwise [min, max]
/// envelope of the three decoded maps over `draws` random convex weights.
pub fn convexity_violation(maps: &DecodedMaps, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        // uniform on the simplex via sorted uniforms
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u > v {
            std::mem::swap(&mut u, &mut v);
        }
        let coeffs = EnsembleCoefficients::new(u, v - u, 1.0 - v).unwrap();
        let fused = fuse(&maps.fsd, &coeffs);
        for (i, f) in fused.data().iter().enumerate() {
            let vals = [0, 1, 2].map(|k| maps.fsd[k].data()[i]);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(lo - f).max(f - hi);
        }
    }
    worst
}

/// Concatenated gradients of the cross-entropy loss with respect to every
/// parameter whose name starts with `prefix`. The transformer always sees the
/// map fused with `reference`, so only the fusion weight on the decoder path
/// differs between calls.
pub fn decoder_grad(maps: &DecodedMaps, coeffs: &EnsembleCoefficients, reference: &EnsembleCoefficients, prefix: &str) -> Vec<f64> {
    let model = &maps.model;
    let fixed = fuse(&maps.fsd, reference);
    let mut g = Graph::new();
    let x = g.constant(maps.input.clone());
    let ceb = model.ceb.forward(&mut g, &maps.params, x).unwrap();
    let fsd = model.tdb.decode(&mut g, &maps.params, ceb.as_array()).unwrap();
    let fused = ensemble_sum(&mut g, fsd, coeffs).unwrap();
    // value of `fixed`, gradient of `fused`
    let stop = g.detach(fused);
    let anchor = g.constant(fixed);
    let tcb_in = g.weighted_sum(&[(fused, 1.0), (anchor, 1.0), (stop, -1.0)]).unwrap();
    let logits = model.tcb.forward(&mut g, &maps.params, tcb_in).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0, 1]).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(&g);
    grads
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, t)| t.data().to_vec())
        .collect()
}

/// Max deviation of `grad(alpha) / grad(0.5)` from `alpha / 0.5` for SD1,
/// relative to the largest reference gradient entry. Also returns the
/// observed ratios (least-squares fit).
pub fn routing_ratios(maps: &DecodedMaps) -> (Vec<f64>, f64) {
    let with_alpha = |a: f64| EnsembleCoefficients::new(a, (1.0 - a) / 2.0, (1.0 - a) / 2.0).unwrap();
    let reference = with_alpha(0.5);
    let g_ref = decoder_grad(maps, &reference, &reference, "tdb.sd1.");
    let scale = g_ref.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 0.0, "reference SD1 gradient is zero");
    let norm2: f64 = g_ref.iter().map(|v| v * v).sum();
    let mut ratios = Vec::new();
    let mut worst = 0.0f64;
    for a in [0.0, 0.5, 1.0] {
        let ga = decoder_grad(maps, &with_alpha(a), &reference, "tdb.sd1.");
        ratios.push(ga.iter().zip(&g_ref).map(|(x, y)| x * y).sum::<f64>() / norm2);
        let expected = a / 0.5;
        for (x, y) in ga.iter().zip(&g_ref) {
            worst = worst.max((x - expected * y).abs() / scale);
        }
    }
    (ratios, worst)
}

/// Gradient of a loss on one encoder's map with respect to every parameter.
pub fn encoder_isolation(config: ModelConfig, which: SubEncoderId, seed: u64) -> Vec<(String, f64)> {
    let model = Cetc::new(config).unwrap();
    let params = model.init_params(seed).unwrap();
    let s = model.config.image_size;
    let input = Tensor::randn(&[1, 3, s, s], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut g = Graph::new();
    let x = g.constant(input);
    let out = model.ceb.forward(&mut g, &params, x).unwrap();
    let node = out.as_array()[which as usize];
    let loss = g.sum(node);
    g.backward(loss)
        .unwrap()
        .param_grads(&g)
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .collect()
}

/// Shifting the input right by the encoder's downsample factor shifts its
/// output right by one column; returns the max interior mismatch.
pub fn translation_error(config: ModelConfig, which: SubEncoderId, side: usize, margin: usize, seed: u64) -> f64 {
    let model = Cetc::new(config).unwrap();
    let params = model.init_params(seed).unwrap();
    let enc = &model.ceb.encoders[which as usize];
    let f = which.downsample_factor();
    let input = Tensor::randn(&[1, 3, side, side], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7));
    let mut moved = Tensor::zeros(input.shape());
    for c in 0..3 {
        for y in 0..side {
            for x in f..side {
                moved.set(&[0, c, y, x], input.get(&[0, c, y, x - f]));
            }
        }
    }
    let run = |t: &Tensor| {
        let mut g = Graph::inference();
        let x = g.constant(t.clone());
        let y = enc.forward(&mut g, &params, x).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(&input), run(&moved));
    let [_, ch, oh, ow] = a.dims4().unwrap();
    let mut worst = 0.0f64;
    for c in 0..ch {
        for y in margin..oh - margin {
            for x in margin..ow - margin - 1 {
                worst = worst.max((b.get(&[0, c, y, x + 1]) - a.get(&[0, c, y, x])).abs());
            }
        }
    }
    worst
}
