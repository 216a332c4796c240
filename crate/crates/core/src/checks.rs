//! Named finite-difference checks for every op and block, in 64-bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    Activation, AlphaMode, Bottleneck, BranchSource, ConvKind, CspBlock, CspEntry, Esd, EsdVariant, EsdWindows,
    GsConv, GsVariant, UpsampleSpec,
};
use crate::boxes::Annotation;
use crate::detector::{assign_targets, compute_loss, Head, HeadMode, HeadSpec, LossWeights};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::graph::{BnStats, Graph, Var};
use crate::kernels::conv::Conv2dConfig;
use crate::kernels::pool::{PoolConfig, PoolKind};
use crate::necks::PyramidFeatures;
use crate::params::{Builder, Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

pub const CHECK_NAMES: &[&str] = &[
    "conv2d",
    "conv2d_depthwise",
    "maxpool",
    "maxpool_k4s2",
    "avgpool",
    "avgpool_k4s2",
    "nn_interpolate",
    "sni_upsample",
    "batchnorm",
    "batchnorm_eval",
    "channel_shuffle",
    "silu",
    "leaky_relu",
    "concat_slice_tile",
    "gsconv",
    "gse1",
    "gse2",
    "esd1",
    "esd2",
    "bottleneck",
    "csp_block",
    "loss",
    "head_loss",
    "head_loss_decoupled",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, r).with_requires_grad(true)
}

/// Distinct values at least 0.05 apart, so no max-pool window is near a tie.
fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    v.shuffle(r);
    Tensor::from_vec(shape, v).expect("sized").with_requires_grad(true)
}

/// Values with `|x| ≥ 0.1`, away from the leaky-ReLU kink.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, r);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t.with_requires_grad(true)
}

fn op_case(
    leaves: Vec<Tensor<f64>>,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    let mut fwd = |ls: &[Tensor<f64>]| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, out, vars))
    };
    gradcheck(&leaves, &mut fwd, GradcheckConfig { seed, ..Default::default() })
}

/// Gradcheck of a parameterized block with respect to its input and every
/// parameter. One-dimensional parameters (biases, BN affine terms) are
/// jittered away from their initial constants first.
fn block_case<B>(
    seed: u64,
    input: Tensor<f64>,
    build: impl FnOnce(&mut Builder<'_, f64>) -> Result<B>,
    forward: impl Fn(&B, &mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let mut store = ParamStore::<f64>::new();
    let block = build(&mut Builder::new(&mut store, seed))?;
    let mut r = rng(seed ^ 0x5eed);
    for p in store.params_mut() {
        if p.ndim() == 1 {
            let jitter = Tensor::<f64>::uniform(p.shape(), -0.3, 0.3, &mut r);
            for (v, j) in p.data_mut().iter_mut().zip(jitter.data()) {
                *v += j;
            }
        }
    }
    let mut leaves = vec![input];
    leaves.extend(store.params().iter().cloned());
    let mut fwd = |ls: &[Tensor<f64>]| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut s = store.clone();
        for (p, l) in s.params_mut().iter_mut().zip(&ls[1..]) {
            *p = l.clone();
        }
        let mut ctx = Ctx::new(&mut s, Mode::Train);
        ctx.graph.set_check_finite(true);
        let x = ctx.input(ls[0].clone());
        let mut vars = vec![x];
        vars.extend(ctx.bind_all());
        let out = forward(&block, &mut ctx, x)?;
        Ok((ctx.into_graph(), out, vars))
    };
    gradcheck(&leaves, &mut fwd, GradcheckConfig { seed, ..Default::default() })
}

fn head_gts() -> Vec<Vec<Annotation>> {
    vec![
        vec![Annotation {
            class_id: 1,
            bbox: [2.0, 3.0, 11.0, 12.5],
        }],
        vec![
            Annotation {
                class_id: 2,
                bbox: [9.0, 1.0, 15.0, 6.0],
            },
            Annotation {
                class_id: 0,
                bbox: [1.0, 9.0, 5.5, 15.0],
            },
        ],
    ]
}

fn head_case(seed: u64, mode: HeadMode) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let spec = HeadSpec {
        mode,
        num_classes: 3,
        channels: vec![4],
        width: 8,
        act: Activation::Silu,
    };
    let targets = assign_targets(&head_gts(), 16, &[8], 3)?;
    block_case(
        seed,
        randn(&[2, 4, 2, 2], &mut r),
        |b| Head::build(b, &spec),
        |h, ctx, x| {
            let preds = h.forward(ctx, &PyramidFeatures::new(vec![(8, x)]))?;
            Ok(compute_loss(ctx, &preds, &targets, LossWeights::default())?.0)
        },
    )
}

/// Runs one named check at one seed.
pub fn run_check(name: &str, seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let act = Activation::Silu;
    match name {
        "conv2d" => op_case(
            vec![randn(&[2, 3, 6, 6], &mut r), randn(&[4, 3, 3, 3], &mut r), randn(&[4], &mut r)],
            seed,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dConfig::new(2, 1, 1)),
        ),
        "conv2d_depthwise" => op_case(
            vec![randn(&[2, 4, 6, 6], &mut r), randn(&[4, 1, 5, 5], &mut r), randn(&[4], &mut r)],
            seed,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dConfig::new(1, 2, 4)),
        ),
        "maxpool" => op_case(vec![separated(&[2, 3, 6, 6], &mut r)], seed, |g, v| {
            g.pool2d(v[0], PoolConfig::new(PoolKind::Max, 2, 2, 0))
        }),
        "maxpool_k4s2" => op_case(vec![separated(&[2, 3, 8, 8], &mut r)], seed, |g, v| {
            g.pool2d(v[0], PoolConfig::new(PoolKind::Max, 4, 2, 1))
        }),
        "avgpool" => op_case(vec![randn(&[2, 3, 5, 5], &mut r)], seed, |g, v| {
            g.pool2d(v[0], PoolConfig::new(PoolKind::Avg, 3, 1, 1))
        }),
        "avgpool_k4s2" => op_case(vec![randn(&[2, 3, 8, 8], &mut r)], seed, |g, v| {
            g.pool2d(v[0], PoolConfig::new(PoolKind::Avg, 4, 2, 1))
        }),
        "nn_interpolate" => op_case(vec![randn(&[2, 3, 3, 3], &mut r)], seed, |g, v| g.nn_interpolate(v[0], 2)),
        "sni_upsample" => op_case(vec![randn(&[2, 3, 3, 3], &mut r)], seed, |g, v| {
            crate::blocks::sni_upsample(g, v[0], UpsampleSpec::new(2, AlphaMode::Area)?)
        }),
        "batchnorm" => op_case(
            vec![randn(&[4, 3, 3, 3], &mut r), randn(&[3], &mut r), randn(&[3], &mut r)],
            seed,
            |g, v| Ok(g.batchnorm2d(v[0], v[1], v[2], BnStats::Batch)?.0),
        ),
        "batchnorm_eval" => op_case(
            vec![randn(&[2, 3, 3, 3], &mut r), randn(&[3], &mut r), randn(&[3], &mut r)],
            seed,
            |g, v| {
                let stats = BnStats::Running {
                    mean: &[0.1, -0.2, 0.3],
                    var: &[0.5, 1.5, 2.0],
                };
                Ok(g.batchnorm2d(v[0], v[1], v[2], stats)?.0)
            },
        ),
        "channel_shuffle" => op_case(vec![randn(&[2, 8, 3, 3], &mut r)], seed, |g, v| g.channel_shuffle(v[0], 4)),
        "silu" => op_case(vec![randn(&[2, 3, 4, 4], &mut r)], seed, |g, v| g.silu(v[0])),
        "leaky_relu" => op_case(vec![off_zero(&[2, 3, 4, 4], &mut r)], seed, |g, v| g.leaky_relu(v[0])),
        "concat_slice_tile" => op_case(
            vec![randn(&[2, 2, 3, 3], &mut r), randn(&[2, 4, 3, 3], &mut r)],
            seed,
            |g, v| {
                let t = g.tile_channels(v[0], 2)?;
                let s = g.add(t, v[1])?;
                let m = g.mul_scalar(s, 0.75)?;
                let c = g.concat_channels(&[m, v[0], v[1]])?;
                g.slice_channels(c, 1, 7)
            },
        ),
        "gsconv" | "gse1" | "gse2" => {
            let variant = match name {
                "gsconv" => GsVariant::Base,
                "gse1" => GsVariant::E1,
                _ => GsVariant::E2,
            };
            block_case(
                seed,
                randn(&[2, 4, 8, 8], &mut r),
                |b| GsConv::build(b, variant, 4, 8, BranchSource::Main, act),
                |m, ctx, x| m.forward(ctx, x),
            )
        }
        "esd1" | "esd2" => {
            let variant = if name == "esd1" { EsdVariant::I } else { EsdVariant::II };
            block_case(
                seed,
                separated(&[2, 4, 8, 8], &mut r),
                |b| Esd::build(b, variant, 4, 8, EsdWindows::default(), act),
                |m, ctx, x| m.forward(ctx, x),
            )
        }
        "bottleneck" => block_case(
            seed,
            randn(&[2, 8, 5, 5], &mut r),
            |b| Bottleneck::build(b, 8, ConvKind::Plain, true, act),
            |m, ctx, x| m.forward(ctx, x),
        ),
        "csp_block" => block_case(
            seed,
            randn(&[2, 8, 4, 4], &mut r),
            |b| CspBlock::build(b, 8, 8, 1, CspEntry::Unit(ConvKind::Gse1), ConvKind::Plain, true, act),
            |m, ctx, x| m.forward(ctx, x),
        ),
        "loss" => {
            // two images on a single-cell grid
            let gts = vec![
                vec![Annotation {
                    class_id: 1,
                    bbox: [1.0, 2.0, 6.0, 7.5],
                }],
                vec![],
            ];
            let targets = assign_targets(&gts, 8, &[8], 3)?;
            op_case(vec![randn(&[2, 8, 1, 1], &mut r)], seed, move |g, v| {
                let mut store = ParamStore::new();
                let mut ctx = Ctx::new(&mut store, Mode::Eval);
                std::mem::swap(&mut ctx.graph, g);
                let out = compute_loss(&mut ctx, &[v[0]], &targets, LossWeights::default());
                std::mem::swap(&mut ctx.graph, g);
                Ok(out?.0)
            })
        }
        "head_loss" => head_case(seed, HeadMode::Coupled),
        "head_loss_decoupled" => head_case(seed, HeadMode::Decoupled),
        _ => Err(Error::usage(format!(
            "unknown check {name:?}; valid names: all, {}",
            CHECK_NAMES.join(", ")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs `name` (or every check for `"all"`) over seeds `0..seeds`.
pub fn run_suite(name: &str, seeds: usize) -> Result<Vec<SuiteRow>> {
    let names: Vec<&str> = if name == "all" {
        CHECK_NAMES.to_vec()
    } else if CHECK_NAMES.contains(&name) {
        vec![name]
    } else {
        return Err(Error::usage(format!(
            "unknown check {name:?}; valid names: all, {}",
            CHECK_NAMES.join(", ")
        )));
    };
    names
        .into_iter()
        .map(|n| {
            let mut row = SuiteRow {
                name: n.to_string(),
                seeds,
                checked: 0,
                max_rel_error: 0.0,
                failures: 0,
            };
            for seed in 0..seeds as u64 {
                let rep = run_check(n, seed)?;
                row.checked += rep.checked;
                row.max_rel_error = row.max_rel_error.max(rep.max_rel_error);
                row.failures += usize::from(!rep.passed);
            }
            Ok(row)
        })
        .collect()
}

pub fn format_table(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<22} {:>5} {:>7} {:>12}  status\n", "check", "seeds", "coords", "max_rel_err");
    for r in rows {
        s.push_str(&format!(
            "{:<22} {:>5} {:>7} {:>12.3e}  {}\n",
            r.name,
            r.seeds,
            r.checked,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_valid_ones() {
        match run_suite("nope", 1) {
            Err(Error::Usage(m)) => assert!(m.contains("sni_upsample")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_check_runs_once() {
        for name in CHECK_NAMES {
            let r = run_check(name, 0).unwrap();
            assert!(r.passed, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }
}
