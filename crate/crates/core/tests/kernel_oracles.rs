//! Convolution and pooling against direct loop implementations.

use pnk::graph::Graph;
use pnk::kernels::conv::Conv2dConfig;
use pnk::kernels::pool::{PoolConfig, PoolKind};
use pnk::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 100;

mod common;
use common::{idx4, naive_conv, naive_pool};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_direct_loops() {
    for case in 0..CASES {
        let mut r = ChaCha8Rng::seed_from_u64(case);
        let groups = [1, 1, 2, 3][r.gen_range(0..4)];
        let depthwise = r.gen_bool(0.25);
        let cin = if depthwise { r.gen_range(1..5) } else { groups * r.gen_range(1..4) };
        let groups = if depthwise { cin } else { groups };
        let cout = groups * r.gen_range(1..4);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let s = r.gen_range(1..3);
        let p = r.gen_range(0..=k / 2);
        let h = r.gen_range(k..k + 7);
        let w = r.gen_range(k..k + 7);
        let n = r.gen_range(1..3);
        let x = Tensor::<f64>::randn(&[n, cin, h, w], &mut r);
        let wt = Tensor::<f64>::randn(&[cout, cin / groups, k, k], &mut r);
        let bias = Tensor::<f64>::randn(&[cout], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(&x), g.leaf(&wt), g.leaf(&bias));
        let out = g.conv2d(xv, wv, Some(bv), Conv2dConfig::new(s, p, groups)).unwrap();
        let expect = naive_conv(&x, &wt, Some(bias.data()), s, p, groups);
        let err = max_abs_diff(g.value(out), &expect);
        assert!(err <= 1e-12, "case {case}: {err} (k={k} s={s} p={p} groups={groups})");
    }
}

#[test]
fn pooling_matches_direct_loops() {
    for case in 0..CASES {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + case);
        let kind = if case % 2 == 0 { PoolKind::Max } else { PoolKind::Avg };
        let (k, s, p) = [(2, 2, 0), (3, 1, 1), (4, 2, 1), (5, 1, 2), (3, 2, 1)][r.gen_range(0..5)];
        let h = r.gen_range(k..k + 6);
        let w = r.gen_range(k..k + 6);
        let x = Tensor::<f64>::randn(&[r.gen_range(1..3), r.gen_range(1..4), h, w], &mut r);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let out = g.pool2d(xv, PoolConfig::new(kind, k, s, p)).unwrap();
        let err = max_abs_diff(g.value(out), &naive_pool(&x, kind, k, s, p));
        assert!(err <= 1e-12, "case {case}: {err} ({kind:?} k={k} s={s} p={p})");
    }
}

#[test]
fn nn_interpolate_matches_index_map() {
    for case in 0..CASES {
        let mut r = ChaCha8Rng::seed_from_u64(2000 + case);
        let s = r.gen_range(1..4);
        let d = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6)];
        let x = Tensor::<f64>::randn(&d, &mut r);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let out = g.nn_interpolate(xv, s).unwrap();
        let od = [d[0], d[1], d[2] * s, d[3] * s];
        assert_eq!(g.shape(out), &od);
        for b in 0..d[0] {
            for c in 0..d[1] {
                for y in 0..od[2] {
                    for xx in 0..od[3] {
                        assert_eq!(g.value(out)[idx4(&od, b, c, y, xx)], x.data()[idx4(&d, b, c, y / s, xx / s)]);
                    }
                }
            }
        }
    }
}

/// A single-pixel impulse must land where geometry says, which catches
/// transposed or shifted indexing that gradient checks cannot see.
#[test]
fn impulse_response_is_spatially_aligned() {
    let mut x = Tensor::<f64>::zeros(&[1, 1, 9, 7]);
    x.data_mut()[2 * 7 + 5] = 1.0;
    let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0; // centre tap
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(&x), g.leaf(&w));
    let same = g.conv2d(xv, wv, None, Conv2dConfig::new(1, 1, 1)).unwrap();
    assert_eq!(g.value(same)[2 * 7 + 5], 1.0);
    assert_eq!(g.value(same).iter().sum::<f64>(), 1.0);
    let down = g.conv2d(xv, wv, None, Conv2dConfig::new(2, 1, 1)).unwrap();
    assert_eq!(g.shape(down), &[1, 1, 5, 4]);
    // output (1, 2) sees input (2, 4) through the centre tap; the impulse is at (2, 5)
    assert_eq!(g.value(down).iter().sum::<f64>(), 0.0);
    let up = g.nn_interpolate(xv, 2).unwrap();
    let v = g.value(up);
    assert_eq!(v[4 * 14 + 10] + v[4 * 14 + 11] + v[5 * 14 + 10] + v[5 * 14 + 11], 4.0);
}
