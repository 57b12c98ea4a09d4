//! Numeric kernels behind the differentiable ops.
//!
//! Every kernel partitions its *output* across rayon tasks and reduces in a
//! fixed serial order inside each task, so results are bitwise identical for
//! any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Stride/padding geometry of a 2-D convolution or transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Only meaningful for transposed convolution; must be smaller than the stride.
    pub output_padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            output_padding: (0, 0),
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = (output_padding, output_padding);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "convolution stride must be >= 1, got {:?}",
                self.stride
            )));
        }
        if self.output_padding.0 >= self.stride.0 || self.output_padding.1 >= self.stride.1 {
            return Err(Error::InvalidArgument(format!(
                "output_padding {:?} must be smaller than stride {:?}",
                self.output_padding, self.stride
            )));
        }
        Ok(())
    }

    /// `floor((H + 2p - k) / s) + 1` per axis, or `None` when the window does not fit.
    pub fn conv_output_size(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let axis = |n: usize, p: usize, k: usize, s: usize| {
            (n + 2 * p).checked_sub(k).map(|span| span / s + 1)
        };
        Some((
            axis(input.0, self.padding.0, kernel.0, self.stride.0)?,
            axis(input.1, self.padding.1, kernel.1, self.stride.1)?,
        ))
    }

    /// `(H - 1) s - 2p + k + op` per axis, or `None` when the result is not positive.
    pub fn transposed_output_size(
        &self,
        input: (usize, usize),
        kernel: (usize, usize),
    ) -> Option<(usize, usize)> {
        let axis = |n: usize, p: usize, k: usize, s: usize, op: usize| {
            let full = n.checked_sub(1)? * s + k + op;
            full.checked_sub(2 * p).filter(|&v| v > 0)
        };
        Some((
            axis(input.0, self.padding.0, kernel.0, self.stride.0, self.output_padding.0)?,
            axis(input.1, self.padding.1, kernel.1, self.stride.1, self.output_padding.1)?,
        ))
    }
}

/// Shapes of one convolution: `x` is `(n, cin, ih, iw)`, the kernel is
/// `(cout, cin, kh, kw)` and the output `(n, cout, oh, ow)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub ih: usize,
    pub iw: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    /// Input row/column touched by output index `o` and kernel tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&v| v < limit)
    }
}

/// Direct convolution: `out[n,o] = sum_c x[n,c] * w[o,c]` over the sliding window.
pub(crate) fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let plane = d.oh * d.ow;
    let mut out = vec![0.0; d.n * d.cout * plane];
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, o) = (idx / d.cout, idx % d.cout);
        if let Some(b) = bias {
            dst.fill(b[o]);
        }
        for c in 0..d.cin {
            let src = &x[(n * d.cin + c) * d.ih * d.iw..][..d.ih * d.iw];
            let ker = &w[(o * d.cin + c) * d.kh * d.kw..][..d.kh * d.kw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = ker[ky * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let Some(iy) = ConvDims::src(oy, ky, sh, ph, d.ih) else {
                            continue;
                        };
                        let row = &src[iy * d.iw..][..d.iw];
                        let drow = &mut dst[oy * d.ow..][..d.ow];
                        for (ox, dv) in drow.iter_mut().enumerate() {
                            if let Some(ix) = ConvDims::src(ox, kx, sw, pw, d.iw) {
                                *dv += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input: scatters `g` (shaped
/// like the convolution output) back onto an `(n, cin, ih, iw)` map. This is
/// also the forward pass of the transposed convolution.
pub(crate) fn conv_backward_input(g: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let iplane = d.ih * d.iw;
    let oplane = d.oh * d.ow;
    let mut dx = vec![0.0; d.n * d.cin * iplane];
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    dx.par_chunks_mut(iplane).enumerate().for_each(|(idx, dst)| {
        let (n, c) = (idx / d.cin, idx % d.cin);
        for o in 0..d.cout {
            let gsrc = &g[(n * d.cout + o) * oplane..][..oplane];
            let ker = &w[(o * d.cin + c) * d.kh * d.kw..][..d.kh * d.kw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = ker[ky * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let Some(iy) = ConvDims::src(oy, ky, sh, ph, d.ih) else {
                            continue;
                        };
                        let grow = &gsrc[oy * d.ow..][..d.ow];
                        let drow = &mut dst[iy * d.iw..][..d.iw];
                        for (ox, gv) in grow.iter().enumerate() {
                            if let Some(ix) = ConvDims::src(ox, kx, sw, pw, d.iw) {
                                drow[ix] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub(crate) fn conv_backward_weight(x: &[f64], g: &[f64], d: &ConvDims) -> Vec<f64> {
    let ksize = d.cin * d.kh * d.kw;
    let oplane = d.oh * d.ow;
    let mut dw = vec![0.0; d.cout * ksize];
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    dw.par_chunks_mut(ksize).enumerate().for_each(|(o, dst)| {
        for n in 0..d.n {
            let gsrc = &g[(n * d.cout + o) * oplane..][..oplane];
            for c in 0..d.cin {
                let src = &x[(n * d.cin + c) * d.ih * d.iw..][..d.ih * d.iw];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = 0.0;
                        for oy in 0..d.oh {
                            let Some(iy) = ConvDims::src(oy, ky, sh, ph, d.ih) else {
                                continue;
                            };
                            let row = &src[iy * d.iw..][..d.iw];
                            let grow = &gsrc[oy * d.ow..][..d.ow];
                            for (ox, gv) in grow.iter().enumerate() {
                                if let Some(ix) = ConvDims::src(ox, kx, sw, pw, d.iw) {
                                    acc += gv * row[ix];
                                }
                            }
                        }
                        dst[(c * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

/// Per-channel sums of an `(n, channels, plane)` buffer.
pub(crate) fn channel_sums(g: &[f64], n: usize, channels: usize, plane: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            (0..n)
                .map(|b| g[(b * channels + c) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect()
}

/// `out[m, o] = sum_k x[m, k] * w[o, k] (+ b[o])`.
pub(crate) fn matmul_xwt(x: &[f64], w: &[f64], bias: Option<&[f64]>, m: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * o];
    out.par_chunks_mut(o).enumerate().for_each(|(row, dst)| {
        let xr = &x[row * k..][..k];
        for (j, dv) in dst.iter_mut().enumerate() {
            let wr = &w[j * k..][..k];
            let mut acc = bias.map_or(0.0, |b| b[j]);
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *dv = acc;
        }
    });
    out
}

/// `dx[m, k] = sum_o g[m, o] * w[o, k]`.
pub(crate) fn matmul_gw(g: &[f64], w: &[f64], m: usize, k: usize, o: usize) -> Vec<f64> {
    let mut dx = vec![0.0; m * k];
    dx.par_chunks_mut(k).enumerate().for_each(|(row, dst)| {
        let gr = &g[row * o..][..o];
        for (j, gv) in gr.iter().enumerate() {
            if *gv == 0.0 {
                continue;
            }
            let wr = &w[j * k..][..k];
            for (d, wv) in dst.iter_mut().zip(wr) {
                *d += gv * wv;
            }
        }
    });
    dx
}

/// `dw[o, k] = sum_m g[m, o] * x[m, k]`.
pub(crate) fn matmul_gtx(g: &[f64], x: &[f64], m: usize, k: usize, o: usize) -> Vec<f64> {
    let mut dw = vec![0.0; o * k];
    dw.par_chunks_mut(k).enumerate().for_each(|(j, dst)| {
        for row in 0..m {
            let gv = g[row * o + j];
            if gv == 0.0 {
                continue;
            }
            let xr = &x[row * k..][..k];
            for (d, xv) in dst.iter_mut().zip(xr) {
                *d += gv * xv;
            }
        }
    });
    dw
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Shapes for the fused windowed attention kernel. `q`, `k`, `v` are
/// `(groups, heads, tokens, head_dim)`; `groups = batch * windows`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub groups: usize,
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
    /// Number of distinct masks; group `g` uses mask `g % windows`.
    pub windows: usize,
}

/// Returns `(output, probabilities)`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: Option<&[f64]>,
    mask: Option<&[f64]>,
    scale: f64,
    d: &AttnDims,
) -> (Vec<f64>, Vec<f64>) {
    let (n, hd) = (d.tokens, d.head_dim);
    let mut probs = vec![0.0; d.groups * d.heads * n * n];
    let mut out = vec![0.0; d.groups * d.heads * n * hd];
    probs
        .par_chunks_mut(n * n)
        .zip(out.par_chunks_mut(n * hd))
        .enumerate()
        .for_each(|(gh, (p, o))| {
            let (grp, head) = (gh / d.heads, gh % d.heads);
            let qs = &q[gh * n * hd..][..n * hd];
            let ks = &k[gh * n * hd..][..n * hd];
            let vs = &v[gh * n * hd..][..n * hd];
            let bias = bias.map(|b| &b[head * n * n..][..n * n]);
            let mask = mask.map(|m| &m[(grp % d.windows) * n * n..][..n * n]);
            for i in 0..n {
                let qi = &qs[i * hd..][..hd];
                let row = &mut p[i * n..][..n];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &ks[j * hd..][..hd];
                    let mut acc = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    *s = acc * scale
                        + bias.map_or(0.0, |b| b[i * n + j])
                        + mask.map_or(0.0, |m| m[i * n + j]);
                }
                softmax_in_place(row);
                let orow = &mut o[i * hd..][..hd];
                for (j, pv) in row.iter().enumerate() {
                    let vj = &vs[j * hd..][..hd];
                    for (ov, vv) in orow.iter_mut().zip(vj) {
                        *ov += pv * vv;
                    }
                }
            }
        });
    (out, probs)
}

/// Gradients `(dq, dk, dv, dlogits)` of the fused attention given the saved
/// probabilities. `dlogits` is per `(group, head)` and lets the caller reduce
/// the bias gradient.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    scale: f64,
    d: &AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, hd) = (d.tokens, d.head_dim);
    let len = d.groups * d.heads * n * hd;
    let mut dq = vec![0.0; len];
    let mut dk = vec![0.0; len];
    let mut dv = vec![0.0; len];
    let mut ds = vec![0.0; d.groups * d.heads * n * n];
    dq.par_chunks_mut(n * hd)
        .zip(dk.par_chunks_mut(n * hd))
        .zip(dv.par_chunks_mut(n * hd))
        .zip(ds.par_chunks_mut(n * n))
        .enumerate()
        .for_each(|(gh, (((dq, dk), dv), ds))| {
            let qs = &q[gh * n * hd..][..n * hd];
            let ks = &k[gh * n * hd..][..n * hd];
            let vs = &v[gh * n * hd..][..n * hd];
            let p = &probs[gh * n * n..][..n * n];
            let go = &g[gh * n * hd..][..n * hd];
            for i in 0..n {
                let gi = &go[i * hd..][..hd];
                let prow = &p[i * n..][..n];
                // dP[i, j] = <dO_i, V_j>; dS = P * (dP - <dP, P>_row)
                let srow = &mut ds[i * n..][..n];
                let mut dot = 0.0;
                for (j, sv) in srow.iter_mut().enumerate() {
                    let vj = &vs[j * hd..][..hd];
                    let mut acc = 0.0;
                    for (a, b) in gi.iter().zip(vj) {
                        acc += a * b;
                    }
                    *sv = acc;
                    dot += acc * prow[j];
                }
                for (sv, pv) in srow.iter_mut().zip(prow) {
                    *sv = pv * (*sv - dot);
                }
                for (j, pv) in prow.iter().enumerate() {
                    let dvj = &mut dv[j * hd..][..hd];
                    for (a, b) in dvj.iter_mut().zip(gi) {
                        *a += pv * b;
                    }
                }
            }
            for i in 0..n {
                let srow = &ds[i * n..][..n];
                let qi = &qs[i * hd..][..hd];
                for (j, sv) in srow.iter().enumerate() {
                    let s = sv * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &ks[j * hd..][..hd];
                    let dqi = &mut dq[i * hd..][..hd];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += s * b;
                    }
                    let dkj = &mut dk[j * hd..][..hd];
                    for (a, b) in dkj.iter_mut().zip(qi) {
                        *a += s * b;
                    }
                }
            }
        });
    (dq, dk, dv, ds)
}
