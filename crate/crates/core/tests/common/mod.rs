//! Independent oracles shared by the integration suites.

#![allow(dead_code)]

pub mod attention;
pub mod grad_cases;
pub mod model_props;
pub mod training;

use cetc_core::{Graph, NodeId, Result, Tensor};
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error used by every gradient check. The floor keeps entries
/// whose true gradient is ~0 from dividing rounding noise by ~0.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Reduces an arbitrary node to a scalar with fixed random weights so that
/// every output element contributes to the checked gradient.
pub fn project_to_scalar(g: &mut Graph, node: NodeId, weights: &Tensor) -> Result<NodeId> {
    if g.value(node).numel() == 1 {
        return g.reshape(node, &[]);
    }
    let n = g.value(node).numel();
    let flat = g.reshape(node, &[1, n])?;
    let w = g.constant(weights.clone().reshape(&[1, n])?);
    let y = g.linear(flat, w, None)?;
    Ok(g.sum(y))
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares reverse-mode gradients of `build` with central differences for
/// up to `per_input` randomly chosen entries of every input.
pub fn check_inputs<R: Rng>(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    per_input: usize,
    rng: &mut R,
) -> GradReport {
    let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> (Graph, Vec<NodeId>, NodeId, Tensor) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &ids).expect("forward");
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(g.shape(out)),
        };
        (g, ids, out, w)
    };

    let (g0, _, out0, _) = eval(inputs, None);
    let weights = Tensor::from_fn(g0.shape(out0), |_| rng.gen_range(-1.0..1.0));
    drop(g0);

    let (mut g, ids, out, _) = eval(inputs, Some(&weights));
    let loss = project_to_scalar(&mut g, out, &weights).expect("projection");
    let grads = g.backward(loss).expect("backward");

    let scalar = |vals: &[Tensor]| -> f64 {
        let (mut g, _, out, _) = eval(vals, Some(&weights));
        let loss = project_to_scalar(&mut g, out, &weights).expect("projection");
        g.value(loss).data()[0]
    };

    let mut report = GradReport::default();
    for (i, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        for j in sample(rng, n, per_input.min(n)).into_iter() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = format!("input {i} entry {j}: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}

/// Dense softmax attention of one head over one set of tokens, computed
/// directly from the definition.
pub fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], logit_bias: impl Fn(usize, usize) -> f64, scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + logit_bias(i, j))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (e, vj) in exps.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += e / total * x;
                }
            }
            out
        })
        .collect()
}

/// `y = x W^T + b` for a single row, written out longhand.
pub fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>() + b.map_or(0.0, |b| b.data()[r]))
        .collect()
}
