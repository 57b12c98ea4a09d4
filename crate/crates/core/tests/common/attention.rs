//! Window attention against dense per-token oracles that never touch the
//! gather-based layout code.

use cetc_core::transformer::{build_shift_mask, Tokens, WindowAttention};
use cetc_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{affine, dense_attention};

pub struct AttentionCase {
    pub attn: WindowAttention,
    pub params: ParamStore,
    pub input: Tensor,
    pub height: usize,
    pub width: usize,
}

/// Random weights (including a non-zero relative bias table) and tokens.
pub fn attention_case(seed: u64, side: usize, dim: usize, heads: usize, window: usize, shift: usize) -> AttentionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = WindowAttention::new("attn", dim, heads, window, shift);
    let mut params = ParamStore::new();
    attn.init(&mut params, &mut rng).unwrap();
    for name in [attn.table_name(), attn.qkv().bias_name(), attn.proj().bias_name()] {
        let t = params.get_mut(&name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let input = Tensor::randn(&[2, side * side, dim], 1.0, &mut rng);
    AttentionCase {
        attn,
        params,
        input,
        height: side,
        width: side,
    }
}

pub struct ModuleRun {
    pub output: Tensor,
    /// `(groups, heads, n, n)` softmax weights.
    pub probs: Vec<f64>,
}

pub fn run_module(c: &AttentionCase, shift: usize) -> ModuleRun {
    let mut g = Graph::new();
    let x = g.constant(c.input.clone());
    let t = Tokens::from_node(&g, x, c.height, c.width).unwrap();
    let out = c.attn.forward_with_shift(&mut g, &c.params, t, shift).unwrap();
    let att_node = g
        .node_ids()
        .find(|&id| g.op_name(id) == "window_attention")
        .expect("attention node");
    ModuleRun {
        output: g.value(out.node).clone(),
        probs: g.attention_probs(att_node).unwrap().to_vec(),
    }
}

/// Token-by-token reference. A token at `(y, x)` sits at `((y - s) mod H,
/// (x - s) mod W)` after the roll; it attends to every token in the same
/// shifted window whose wrap-around status matches on both axes. With `s = 0`
/// this is plain non-overlapping window attention.
pub fn oracle(c: &AttentionCase, shift: usize) -> Tensor {
    let a = &c.attn;
    let (h, w, d) = (c.height, c.width, a.dim);
    let (ws, heads) = (a.window, a.heads);
    let hd = d / heads;
    let side = 2 * ws - 1;
    let p = |n: String| c.params.get(&n).unwrap().clone();
    let (wqkv, bqkv) = (p(a.qkv().weight_name()), p(a.qkv().bias_name()));
    let (wp, bp) = (p(a.proj().weight_name()), p(a.proj().bias_name()));
    let table = p(a.table_name());
    let scale = 1.0 / (hd as f64).sqrt();
    let batch = c.input.shape()[0];

    let placed = |y: usize, x: usize| ((y + h - shift) % h, (x + w - shift) % w);
    let wrapped = |y: usize, x: usize| (y < shift, x < shift);
    let mut out = Tensor::zeros(c.input.shape());
    for b in 0..batch {
        let row = |t: usize| &c.input.data()[(b * h * w + t) * d..][..d];
        let qkv: Vec<Vec<f64>> = (0..h * w).map(|t| affine(row(t), &wqkv, Some(&bqkv))).collect();
        for t in 0..h * w {
            let (y, x) = (t / w, t % w);
            let (sy, sx) = placed(y, x);
            let members: Vec<usize> = (0..h * w)
                .filter(|&u| {
                    let (uy, ux) = placed(u / w, u % w);
                    uy / ws == sy / ws && ux / ws == sx / ws && wrapped(u / w, u % w) == wrapped(y, x)
                })
                .collect();
            let mut merged = Vec::with_capacity(d);
            for head in 0..heads {
                let slice = |u: usize, part: usize| qkv[u][part * d + head * hd..][..hd].to_vec();
                let q = vec![slice(t, 0)];
                let k: Vec<Vec<f64>> = members.iter().map(|&u| slice(u, 1)).collect();
                let v: Vec<Vec<f64>> = members.iter().map(|&u| slice(u, 2)).collect();
                let bias = |_: usize, j: usize| {
                    let (uy, ux) = placed(members[j] / w, members[j] % w);
                    let dy = sy % ws + ws - 1 - uy % ws;
                    let dx = sx % ws + ws - 1 - ux % ws;
                    table.data()[(dy * side + dx) * heads + head]
                };
                merged.extend(dense_attention(&q, &k, &v, bias, scale).remove(0));
            }
            let o = affine(&merged, &wp, Some(&bp));
            out.data_mut()[(b * h * w + t) * d..][..d].copy_from_slice(&o);
        }
    }
    out
}

/// Max abs difference between the module and the oracle.
pub fn oracle_error(seed: u64, side: usize, window: usize, shift: usize) -> f64 {
    let c = attention_case(seed, side, 8, 2, window, shift);
    run_module(&c, shift).output.max_abs_diff(&oracle(&c, shift))
}

/// Largest softmax weight on a masked pair and the largest deviation of a row
/// sum from 1, for a shifted layer.
pub fn masked_weight_stats(seed: u64, side: usize, window: usize, shift: usize) -> (f64, f64) {
    let c = attention_case(seed, side, 8, 2, window, shift);
    let run = run_module(&c, shift);
    let mask = build_shift_mask(side, side, window, shift).unwrap();
    let n = window * window;
    let windows = mask.shape()[0];
    let heads = c.attn.heads;
    let (mut masked_max, mut row_err) = (0.0f64, 0.0f64);
    for (gh, block) in run.probs.chunks(n * n).enumerate() {
        let win = (gh / heads) % windows;
        let m = &mask.data()[win * n * n..][..n * n];
        for (p, mv) in block.iter().zip(m) {
            if *mv != 0.0 {
                masked_max = masked_max.max(*p);
            }
        }
        for r in block.chunks(n) {
            row_err = row_err.max((r.iter().sum::<f64>() - 1.0).abs());
        }
    }
    (masked_max, row_err)
}
