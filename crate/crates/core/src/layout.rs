//! Index maps for the data-movement ops (permutes, cyclic shifts, window
//! partitioning, patch merging, head splitting, nearest upsampling).
//!
//! Each builder returns `index` such that `out[i] = input[index[i]]`; the
//! graph runs them through a single gather op whose backward is a
//! scatter-add.

use crate::error::{Error, Result};

pub fn permute(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(shape.len(), perm.len());
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    for _ in 0..numel {
        index.push(counter.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            if counter[axis] < out_shape[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
    (out_shape, index)
}

/// `(b, h*w, d)` tokens: `out[y, x] = in[(y + shift) mod h, (x + shift) mod w]`,
/// i.e. the grid is rolled by `-shift` on both axes. A negative `shift` undoes it.
pub fn cyclic_shift(b: usize, h: usize, w: usize, d: usize, shift: isize) -> Vec<usize> {
    let wrap = |v: usize, n: usize| (v as isize + shift).rem_euclid(n as isize) as usize;
    let mut index = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let src = (bi * h + wrap(y, h)) * w + wrap(x, w);
                index.extend((0..d).map(|c| src * d + c));
            }
        }
    }
    index
}

fn check_divisible(op: &'static str, h: usize, w: usize, ws: usize) -> Result<()> {
    if ws == 0 || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
        return Err(Error::shape(
            op,
            format!("grid {h}x{w} is not divisible by window size {ws}"),
        ));
    }
    Ok(())
}

/// `(b, h*w, d)` → `(b * nW, ws*ws, d)` with windows in row-major order per image.
pub fn window_partition(b: usize, h: usize, w: usize, d: usize, ws: usize) -> Result<Vec<usize>> {
    check_divisible("window_partition", h, w, ws)?;
    let mut index = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                for ty in 0..ws {
                    for tx in 0..ws {
                        let src = (bi * h + wy * ws + ty) * w + wx * ws + tx;
                        index.extend((0..d).map(|c| src * d + c));
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(b: usize, h: usize, w: usize, d: usize, ws: usize) -> Result<Vec<usize>> {
    check_divisible("window_reverse", h, w, ws)?;
    let (nwx, n) = (w / ws, ws * ws);
    let nw = (h / ws) * nwx;
    let mut index = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let win = bi * nw + (y / ws) * nwx + x / ws;
                let tok = (y % ws) * ws + x % ws;
                let src = win * n + tok;
                index.extend((0..d).map(|c| src * d + c));
            }
        }
    }
    Ok(index)
}

/// `(g, n, 3 * heads * hd)` packed `[q | k | v]` → `(g, heads, n, hd)` for `part` in 0..3.
pub fn split_heads(g: usize, n: usize, heads: usize, hd: usize, part: usize) -> Vec<usize> {
    let row = 3 * heads * hd;
    let mut index = Vec::with_capacity(g * n * heads * hd);
    for gi in 0..g {
        for h in 0..heads {
            for t in 0..n {
                let base = (gi * n + t) * row + part * heads * hd + h * hd;
                index.extend(base..base + hd);
            }
        }
    }
    index
}

/// `(g, heads, n, hd)` → `(g, n, heads * hd)`.
pub fn merge_heads(g: usize, n: usize, heads: usize, hd: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(g * n * heads * hd);
    for gi in 0..g {
        for t in 0..n {
            for h in 0..heads {
                let base = ((gi * heads + h) * n + t) * hd;
                index.extend(base..base + hd);
            }
        }
    }
    index
}

/// `(b, h*w, d)` → `(b, (h/2)*(w/2), 4d)`. The four neighbours are concatenated
/// in the order (0,0), (1,0), (0,1), (1,1) as (row offset, column offset).
pub fn patch_merge(b: usize, h: usize, w: usize, d: usize) -> Result<Vec<usize>> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::shape(
            "patch_merging",
            format!("token grid {h}x{w} must have even sides"),
        ));
    }
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut index = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in OFFSETS {
                    let src = (bi * h + 2 * y + dy) * w + 2 * x + dx;
                    index.extend((0..d).map(|c| src * d + c));
                }
            }
        }
    }
    Ok(index)
}

/// Nearest-neighbour upsampling of an `(n, c, h, w)` map by an integer factor.
pub fn upsample_nearest(n: usize, c: usize, h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (oh, ow) = (h * factor, w * factor);
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                index.push((plane * h + y / factor) * w + x / factor);
            }
        }
    }
    index
}

/// Maps each token pair `(i, j)` of a `ws x ws` window to the row of the
/// `(2ws-1)^2` relative-position table addressed by their offset.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let n = ws * ws;
    let side = 2 * ws - 1;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / ws, i % ws);
        for j in 0..n {
            let (yj, xj) = (j / ws, j % ws);
            let dy = yi + ws - 1 - yj;
            let dx = xi + ws - 1 - xj;
            index.push(dy * side + dx);
        }
    }
    index
}

/// Gathers a `((2ws-1)^2, heads)` bias table into `(heads, n, n)` logit offsets.
pub fn relative_bias_gather(ws: usize, heads: usize) -> Vec<usize> {
    let rel = relative_position_index(ws);
    let mut index = Vec::with_capacity(heads * rel.len());
    for h in 0..heads {
        index.extend(rel.iter().map(|&r| r * heads + h));
    }
    index
}
