//! Max and average pooling over square windows, including extended windows
//! whose size exceeds the stride.

use crate::error::{Error, Result};
use crate::kernels::conv::out_extent;
use crate::tensor::{dims4, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub kind: PoolKind,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolConfig {
    pub fn new(kind: PoolKind, k: usize, stride: usize, padding: usize) -> Self {
        PoolConfig {
            kind,
            k,
            stride,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub hout: usize,
    pub wout: usize,
    pub cfg: PoolConfig,
}

impl PoolGeom {
    pub fn new(x: &[usize], cfg: PoolConfig) -> Result<Self> {
        let [n, c, h, w] = dims4(x, "pool2d")?;
        if cfg.k == 0 || cfg.stride == 0 {
            return Err(Error::config("pool2d window and stride must be at least 1"));
        }
        let (Some(hout), Some(wout)) = (
            out_extent(h, cfg.k, cfg.stride, cfg.padding),
            out_extent(w, cfg.k, cfg.stride, cfg.padding),
        ) else {
            return Err(Error::config(format!(
                "pool2d window {} does not fit {h}x{w} input with padding {}",
                cfg.k, cfg.padding
            )));
        };
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            hout,
            wout,
            cfg,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.hout, self.wout]
    }

    /// In-bounds index range of the window along one axis.
    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.cfg.stride) as isize - self.cfg.padding as isize;
        let end = start + self.cfg.k as isize;
        (start.max(0) as usize, end.min(len as isize).max(0) as usize)
    }
}

/// Saved state for the backward pass.
#[derive(Clone, Debug)]
pub enum PoolSaved {
    /// Flat input index selected by each output element.
    Argmax(Vec<usize>),
    /// Number of in-bounds elements under each output window.
    Counts(Vec<u32>),
}

pub fn forward<E: Element>(x: &[E], g: &PoolGeom) -> Result<(Vec<E>, PoolSaved)> {
    let planes = g.n * g.c;
    let ohw = g.hout * g.wout;
    let mut out = vec![E::zero(); planes * ohw];
    match g.cfg.kind {
        PoolKind::Max => {
            let mut argmax = vec![0usize; out.len()];
            for p in 0..planes {
                let base = p * g.h * g.w;
                for oh in 0..g.hout {
                    let (h0, h1) = g.span(oh, g.h);
                    for ow in 0..g.wout {
                        let (w0, w1) = g.span(ow, g.w);
                        let mut best: Option<(usize, E)> = None;
                        // strict comparison keeps the first maximum in row-major order
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                let idx = base + ih * g.w + iw;
                                if best.map_or(true, |(_, b)| x[idx] > b) {
                                    best = Some((idx, x[idx]));
                                }
                            }
                        }
                        let Some((idx, v)) = best else {
                            return Err(Error::config(format!(
                                "max pool window at output ({oh}, {ow}) covers only padding"
                            )));
                        };
                        let o = p * ohw + oh * g.wout + ow;
                        out[o] = v;
                        argmax[o] = idx;
                    }
                }
            }
            Ok((out, PoolSaved::Argmax(argmax)))
        }
        PoolKind::Avg => {
            let mut counts = vec![0u32; out.len()];
            for p in 0..planes {
                let base = p * g.h * g.w;
                for oh in 0..g.hout {
                    let (h0, h1) = g.span(oh, g.h);
                    for ow in 0..g.wout {
                        let (w0, w1) = g.span(ow, g.w);
                        let count = (h1.saturating_sub(h0) * w1.saturating_sub(w0)) as u32;
                        let o = p * ohw + oh * g.wout + ow;
                        counts[o] = count;
                        if count == 0 {
                            continue;
                        }
                        let mut acc = E::zero();
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                acc = acc + x[base + ih * g.w + iw];
                            }
                        }
                        out[o] = acc / E::of(f64::from(count));
                    }
                }
            }
            Ok((out, PoolSaved::Counts(counts)))
        }
    }
}

pub fn backward<E: Element>(dout: &[E], saved: &PoolSaved, g: &PoolGeom) -> Vec<E> {
    let mut dx = vec![E::zero(); g.n * g.c * g.h * g.w];
    match saved {
        PoolSaved::Argmax(argmax) => {
            for (&idx, &gy) in argmax.iter().zip(dout) {
                dx[idx] = dx[idx] + gy;
            }
        }
        PoolSaved::Counts(counts) => {
            let ohw = g.hout * g.wout;
            for p in 0..g.n * g.c {
                let base = p * g.h * g.w;
                for oh in 0..g.hout {
                    let (h0, h1) = g.span(oh, g.h);
                    for ow in 0..g.wout {
                        let o = p * ohw + oh * g.wout + ow;
                        if counts[o] == 0 {
                            continue;
                        }
                        let (w0, w1) = g.span(ow, g.w);
                        let share = dout[o] / E::of(f64::from(counts[o]));
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                let i = base + ih * g.w + iw;
                                dx[i] = dx[i] + share;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(x: &[f64], shape: [usize; 4], cfg: PoolConfig) -> Result<Vec<f64>> {
        let g = PoolGeom::new(&shape, cfg)?;
        forward(x, &g).map(|(out, _)| out)
    }

    #[test]
    fn max_and_avg_of_two_by_two() {
        let x = [1., 2., 3., 4.];
        assert_eq!(pool(&x, [1, 1, 2, 2], PoolConfig::new(PoolKind::Max, 2, 2, 0)).unwrap(), vec![4.]);
        assert_eq!(pool(&x, [1, 1, 2, 2], PoolConfig::new(PoolKind::Avg, 2, 2, 0)).unwrap(), vec![2.5]);
    }

    #[test]
    fn extended_window_halves_even_input() {
        let g = PoolGeom::new(&[1, 1, 8, 8], PoolConfig::new(PoolKind::Avg, 4, 2, 1)).unwrap();
        assert_eq!(g.out_shape(), [1, 1, 4, 4]);
    }

    #[test]
    fn avg_excludes_padding() {
        // corner window of a 4x4 ones input with pad 1 sees 3x3 real cells
        let out = pool(&[1.0; 16], [1, 1, 4, 4], PoolConfig::new(PoolKind::Avg, 4, 2, 1)).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_padding_window() {
        let x = [1.0; 4];
        let shape = [1, 1, 2, 2];
        let avg = pool(&x, shape, PoolConfig::new(PoolKind::Avg, 2, 3, 2)).unwrap();
        assert_eq!(avg[0], 0.0);
        let err = pool(&x, shape, PoolConfig::new(PoolKind::Max, 2, 3, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let x = [5., 5., 5., 5.];
        let g = PoolGeom::new(&[1, 1, 2, 2], PoolConfig::new(PoolKind::Max, 2, 2, 0)).unwrap();
        let (_, saved) = forward(&x, &g).unwrap();
        let dx = backward(&[1.0], &saved, &g);
        assert_eq!(dx, vec![1., 0., 0., 0.]);
    }
}
