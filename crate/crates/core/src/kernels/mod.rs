//! Slice-level kernels. The autodiff graph owns shapes and dispatch; these
//! functions only move numbers.

pub mod batchnorm;
pub mod conv;
pub mod pool;

use crate::tensor::Element;

/// `out[n, c, i, j] = x[n, c, i / s, j / s]`.
pub fn nn_interpolate<E: Element>(x: &[E], nc: usize, h: usize, w: usize, s: usize) -> Vec<E> {
    let (ho, wo) = (h * s, w * s);
    let mut out = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let row = &plane[(i / s) * w..(i / s + 1) * w];
            for j in 0..wo {
                out.push(row[j / s]);
            }
        }
    }
    out
}

/// Sums each replicated `s × s` block back onto its source pixel.
pub fn nn_interpolate_backward<E: Element>(
    dout: &[E],
    nc: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<E> {
    let (ho, wo) = (h * s, w * s);
    let mut dx = vec![E::zero(); nc * h * w];
    for p in 0..nc {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let d = &mut dst[(i / s) * w + j / s];
                *d = *d + src[i * wo + j];
            }
        }
    }
    dx
}

/// Stacks `[N, Ci, H, W]` blocks along the channel axis.
pub fn concat_channels<E: Element>(parts: &[&[E]], channels: &[usize], n: usize, hw: usize) -> Vec<E> {
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (part, &c) in parts.iter().zip(channels) {
            out.extend_from_slice(&part[b * c * hw..(b + 1) * c * hw]);
        }
    }
    out
}

/// Channels `[start, start + len)` of an `[N, C, H, W]` buffer.
pub fn slice_channels<E: Element>(x: &[E], n: usize, c: usize, hw: usize, start: usize, len: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    out
}

/// Output channel `o` reads input channel `o % c`, repeating the block `times` times.
pub fn tile_channels<E: Element>(x: &[E], n: usize, c: usize, hw: usize, times: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(n * c * times * hw);
    for b in 0..n {
        let sample = &x[b * c * hw..(b + 1) * c * hw];
        for _ in 0..times {
            out.extend_from_slice(sample);
        }
    }
    out
}

pub fn tile_channels_backward<E: Element>(dout: &[E], n: usize, c: usize, hw: usize, times: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); n * c * hw];
    for b in 0..n {
        let dst = &mut dx[b * c * hw..(b + 1) * c * hw];
        for t in 0..times {
            let src = &dout[(b * times + t) * c * hw..][..c * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    dx
}

/// Source channel for each output channel of a shuffle with `groups` groups:
/// view channels as `(groups, C / groups)`, transpose, flatten.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    (0..c).map(|o| (o % groups) * per + o / groups).collect()
}

/// `out[:, o] = x[:, perm[o]]`.
pub fn gather_channels<E: Element>(x: &[E], n: usize, hw: usize, perm: &[usize]) -> Vec<E> {
    let c = perm.len();
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for &src in perm {
            out.extend_from_slice(&x[(b * c + src) * hw..(b * c + src + 1) * hw]);
        }
    }
    out
}

pub fn scatter_channels<E: Element>(dout: &[E], n: usize, hw: usize, perm: &[usize]) -> Vec<E> {
    let c = perm.len();
    let mut dx = vec![E::zero(); dout.len()];
    for b in 0..n {
        for (o, &src) in perm.iter().enumerate() {
            dx[(b * c + src) * hw..(b * c + src + 1) * hw]
                .copy_from_slice(&dout[(b * c + o) * hw..(b * c + o + 1) * hw]);
        }
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
