//! Grouped 2-d cross-correlation via im2col + GEMM, with a direct path for
//! depthwise kernels.

use crate::error::{Error, Result};
use crate::tensor::{dims4, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dConfig {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dConfig {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig::new(1, 0, 1)
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

/// Output extent of a sliding window, `floor((len + 2·pad − k) / stride) + 1`.
pub fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], cfg: Conv2dConfig) -> Result<Self> {
        let [n, cin, h, w] = dims4(x, "conv2d")?;
        let [cout, cg, kh, kw] = dims4(weight, "conv2d")?;
        if cfg.stride == 0 {
            return Err(Error::config("conv2d stride must be at least 1"));
        }
        if cfg.groups == 0 || cin % cfg.groups != 0 || cout % cfg.groups != 0 {
            return Err(Error::config(format!(
                "conv2d groups={} must divide Cin={cin} and Cout={cout}",
                cfg.groups
            )));
        }
        if cg != cin / cfg.groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {cg} input channels per group, input provides {} (Cin={cin}, groups={})",
                    cin / cfg.groups,
                    cfg.groups
                ),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square and non-empty, got {kh}x{kw}"),
            ));
        }
        let hout = out_extent(h, kh, cfg.stride, cfg.padding);
        let wout = out_extent(w, kw, cfg.stride, cfg.padding);
        let (Some(hout), Some(wout)) = (hout, wout) else {
            return Err(Error::config(format!(
                "conv2d window {kh} does not fit {h}x{w} input with padding {}",
                cfg.padding
            )));
        };
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride: cfg.stride,
            pad: cfg.padding,
            groups: cfg.groups,
            hout,
            wout,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.hout, self.wout]
    }

    fn cg(&self) -> usize {
        self.cin / self.groups
    }

    fn og(&self) -> usize {
        self.cout / self.groups
    }

    fn depthwise(&self) -> bool {
        self.cg() == 1
    }

    /// Multiply-accumulates ×2, bias excluded.
    pub fn flops(&self) -> u64 {
        2 * (self.k * self.k * self.cg() * self.cout * self.hout * self.wout * self.n) as u64
    }
}

fn im2col<E: Element>(x: &[E], g: &ConvGeom, group: usize, col: &mut [E]) {
    let (cg, k, hw) = (g.cg(), g.k, g.hout * g.wout);
    let cols = g.n * hw;
    for c in 0..cg {
        let ic = group * cg + c;
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[n * hw..(n + 1) * hw];
                    for oh in 0..g.hout {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        let out_row = &mut dst[oh * g.wout..(oh + 1) * g.wout];
                        if ih < 0 || ih >= g.h as isize {
                            out_row.fill(E::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * g.w..][..g.w];
                        for (ow, v) in out_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            *v = if iw < 0 || iw >= g.w as isize {
                                E::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<E: Element>(col: &[E], g: &ConvGeom, group: usize, dx: &mut [E]) {
    let (cg, k, hw) = (g.cg(), g.k, g.hout * g.wout);
    let cols = g.n * hw;
    for c in 0..cg {
        let ic = group * cg + c;
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * hw..(n + 1) * hw];
                    for oh in 0..g.hout {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * g.w..][..g.w];
                        for ow in 0..g.wout {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] = dst[iw as usize] + src[oh * g.wout + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<E: Element>(x: &[E], weight: &[E], bias: Option<&[E]>, g: &ConvGeom) -> Vec<E> {
    let hw = g.hout * g.wout;
    let mut out = vec![E::zero(); g.n * g.cout * hw];
    if g.depthwise() {
        depthwise_forward(x, weight, g, &mut out);
    } else {
        let (cg, og, kk) = (g.cg(), g.og(), g.k * g.k);
        let cols = g.n * hw;
        let mut col = vec![E::zero(); cg * kk * cols];
        let mut tmp = vec![E::zero(); og * cols];
        for group in 0..g.groups {
            im2col(x, g, group, &mut col);
            let w_g = &weight[group * og * cg * kk..(group + 1) * og * cg * kk];
            E::gemm(og, cg * kk, cols, w_g, false, &col, false, E::zero(), &mut tmp);
            for o in 0..og {
                let oc = group * og + o;
                for n in 0..g.n {
                    out[(n * g.cout + oc) * hw..][..hw]
                        .copy_from_slice(&tmp[o * cols + n * hw..][..hw]);
                }
            }
        }
    }
    if let Some(bias) = bias {
        for n in 0..g.n {
            for (oc, &b) in bias.iter().enumerate() {
                for v in &mut out[(n * g.cout + oc) * hw..][..hw] {
                    *v = *v + b;
                }
            }
        }
    }
    out
}

fn depthwise_forward<E: Element>(x: &[E], weight: &[E], g: &ConvGeom, out: &mut [E]) {
    let (k, mult, hw) = (g.k, g.og(), g.hout * g.wout);
    for n in 0..g.n {
        for oc in 0..g.cout {
            let ic = oc / mult;
            let plane = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            let wk = &weight[oc * k * k..(oc + 1) * k * k];
            let dst = &mut out[(n * g.cout + oc) * hw..][..hw];
            for oh in 0..g.hout {
                for kh in 0..k {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..][..g.w];
                    let wrow = &wk[kh * k..(kh + 1) * k];
                    for ow in 0..g.wout {
                        let base = (ow * g.stride) as isize - g.pad as isize;
                        let mut acc = E::zero();
                        for (kw, &wv) in wrow.iter().enumerate() {
                            let iw = base + kw as isize;
                            if iw >= 0 && iw < g.w as isize {
                                acc = acc + wv * src[iw as usize];
                            }
                        }
                        dst[oh * g.wout + ow] = dst[oh * g.wout + ow] + acc;
                    }
                }
            }
        }
    }
}

/// Gradients requested by the caller; `None` entries are skipped.
pub struct ConvGrads<E> {
    pub dx: Option<Vec<E>>,
    pub dweight: Option<Vec<E>>,
    pub dbias: Option<Vec<E>>,
}

pub fn backward<E: Element>(
    x: &[E],
    weight: &[E],
    dout: &[E],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<E> {
    let hw = g.hout * g.wout;
    let dbias = need[2].then(|| {
        let mut db = vec![E::zero(); g.cout];
        for n in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dout[(n * g.cout + oc) * hw..][..hw].iter().copied().sum::<E>();
            }
        }
        db
    });
    if !need[0] && !need[1] {
        return ConvGrads {
            dx: None,
            dweight: None,
            dbias,
        };
    }
    let mut dx = need[0].then(|| vec![E::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![E::zero(); weight.len()]);
    if g.depthwise() {
        depthwise_backward(x, weight, dout, g, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let (cg, og, kk) = (g.cg(), g.og(), g.k * g.k);
        let cols = g.n * hw;
        let mut col = vec![E::zero(); cg * kk * cols];
        let mut dy = vec![E::zero(); og * cols];
        for group in 0..g.groups {
            for o in 0..og {
                let oc = group * og + o;
                for n in 0..g.n {
                    dy[o * cols + n * hw..][..hw]
                        .copy_from_slice(&dout[(n * g.cout + oc) * hw..][..hw]);
                }
            }
            let wrange = group * og * cg * kk..(group + 1) * og * cg * kk;
            if let Some(dw) = dw.as_deref_mut() {
                im2col(x, g, group, &mut col);
                E::gemm(og, cols, cg * kk, &dy, false, &col, true, E::one(), &mut dw[wrange.clone()]);
            }
            if let Some(dx) = dx.as_deref_mut() {
                E::gemm(cg * kk, og, cols, &weight[wrange], true, &dy, false, E::zero(), &mut col);
                col2im_add(&col, g, group, dx);
            }
        }
    }
    ConvGrads {
        dx,
        dweight: dw,
        dbias,
    }
}

fn depthwise_backward<E: Element>(
    x: &[E],
    weight: &[E],
    dout: &[E],
    g: &ConvGeom,
    mut dx: Option<&mut [E]>,
    mut dw: Option<&mut [E]>,
) {
    let (k, mult, hw) = (g.k, g.og(), g.hout * g.wout);
    for n in 0..g.n {
        for oc in 0..g.cout {
            let ic = oc / mult;
            let plane_off = (n * g.cin + ic) * g.h * g.w;
            let dy = &dout[(n * g.cout + oc) * hw..][..hw];
            for oh in 0..g.hout {
                for kh in 0..k {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let row_off = plane_off + ih as usize * g.w;
                    for ow in 0..g.wout {
                        let gy = dy[oh * g.wout + ow];
                        if gy == E::zero() {
                            continue;
                        }
                        let base = (ow * g.stride) as isize - g.pad as isize;
                        for kw in 0..k {
                            let iw = base + kw as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let xi = row_off + iw as usize;
                            let wi = (oc * k + kh) * k + kw;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] = dw[wi] + gy * x[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + gy * weight[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], cfg: Conv2dConfig) -> Vec<f64> {
        let g = ConvGeom::new(&xs, &ws, cfg).unwrap();
        forward(x, w, None, &g)
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let out = run(&[1., 2., 3., 4.], [1, 1, 2, 2], &[2.], [1, 1, 1, 1], Conv2dConfig::default());
        assert_eq!(out, vec![2., 4., 6., 8.]);
    }

    #[test]
    fn window_sum() {
        let out = run(&[1.0; 9], [1, 1, 3, 3], &[1.0; 9], [1, 1, 3, 3], Conv2dConfig::default());
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn rejects_bad_groups() {
        let err = ConvGeom::new(&[1, 3, 4, 4], &[4, 1, 3, 3], Conv2dConfig::new(1, 1, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let err = ConvGeom::new(&[1, 3, 4, 4], &[4, 2, 3, 3], Conv2dConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn rejects_oversized_window() {
        let err = ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 5, 5], Conv2dConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn flops_closed_form() {
        let g = ConvGeom::new(&[1, 16, 40, 40], &[32, 16, 3, 3], Conv2dConfig::new(1, 1, 1)).unwrap();
        assert_eq!(g.flops(), 14_745_600);
    }
}
