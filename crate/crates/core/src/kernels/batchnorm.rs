use crate::tensor::Element;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

/// Per-channel statistics saved by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnSaved<E> {
    pub xhat: Vec<E>,
    pub inv_std: Vec<E>,
    pub train: bool,
}

/// Batch statistics (mean, biased variance) per channel of an `[N, C, H, W]` input.
pub fn batch_stats<E: Element>(x: &[E], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..n {
            ss += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    (mean, var)
}

/// Normalizes with the given statistics and applies the affine transform.
#[allow(clippy::too_many_arguments)]
pub fn normalize<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[E],
    beta: &[E],
    train: bool,
) -> (Vec<E>, BnSaved<E>) {
    let mut out = vec![E::zero(); x.len()];
    let mut xhat = vec![E::zero(); x.len()];
    let inv_std: Vec<E> = var.iter().map(|v| E::of(1.0 / (v + BN_EPS).sqrt())).collect();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let mu = E::of(mean[ch]);
            let (is, gm, bt) = (inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    (out, BnSaved { xhat, inv_std, train })
}

pub struct BnGrads<E> {
    pub dx: Vec<E>,
    pub dgamma: Vec<E>,
    pub dbeta: Vec<E>,
}

pub fn backward<E: Element>(
    dout: &[E],
    saved: &BnSaved<E>,
    gamma: &[E],
    n: usize,
    c: usize,
    hw: usize,
) -> BnGrads<E> {
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    let mut dx = vec![E::zero(); dout.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let dy = dout[i].f64();
                sum_dy += dy;
                sum_dy_xhat += dy * saved.xhat[i].f64();
            }
        }
        dgamma[ch] = E::of(sum_dy_xhat);
        dbeta[ch] = E::of(sum_dy);
        let g = gamma[ch].f64();
        let is = saved.inv_std[ch].f64();
        if saved.train {
            let m = (n * hw) as f64;
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let v = dout[i].f64() - mean_dy - saved.xhat[i].f64() * mean_dy_xhat;
                    dx[i] = E::of(g * is * v);
                }
            }
        } else {
            let scale = E::of(g * is);
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] = dout[i] * scale;
                }
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}
