//! Central finite-difference gradient checks.
//!
//! The function under test maps a list of leaf tensors to an output node.
//! The scalar probe is `Σ out ⊙ r` for a fixed random `r`, so every output
//! element contributes a distinct upstream gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Coordinates probed per leaf; larger leaves are subsampled.
    pub max_coords_per_leaf: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            rtol: 1e-3,
            atol: 1e-6,
            max_coords_per_leaf: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Largest `|a − n| / max(|a|, |n|)` among coordinates above the absolute floor.
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub passed: bool,
}

/// A forward function: builds a fresh graph from the (possibly perturbed)
/// leaves and returns it with the output node and the leaf nodes, in order.
pub type Forward<'a> = dyn FnMut(&[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> + 'a;

fn probe(graph: &Graph<f64>, out: Var, weights: &[f64]) -> f64 {
    graph.value(out).iter().zip(weights).map(|(a, b)| a * b).sum()
}

pub fn gradcheck(leaves: &[Tensor<f64>], f: &mut Forward<'_>, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut graph, out, leaf_vars) = f(leaves)?;
    if leaf_vars.len() != leaves.len() {
        return Err(Error::usage("forward returned a different number of leaves"));
    }
    let weights: Vec<f64> = Tensor::<f64>::uniform(graph.shape(out), -1.0, 1.0, &mut rng).into_data();
    let loss = graph.weighted_sum(out, &weights)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaf_vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| graph.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(graph);

    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let mut worst_ratio = 0.0;
    let mut perturbed: Vec<Tensor<f64>> = leaves.to_vec();
    for (l, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let coords: Vec<usize> = if leaf.numel() <= cfg.max_coords_per_leaf {
            (0..leaf.numel()).collect()
        } else {
            let mut c = sample(&mut rng, leaf.numel(), cfg.max_coords_per_leaf).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = leaf.data()[i];
            perturbed[l].data_mut()[i] = orig + cfg.step;
            let (g, o, _) = f(&perturbed)?;
            let plus = probe(&g, o, &weights);
            perturbed[l].data_mut()[i] = orig - cfg.step;
            let (g, o, _) = f(&perturbed)?;
            let minus = probe(&g, o, &weights);
            perturbed[l].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[l][i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ratio = diff / (cfg.atol + cfg.rtol * scale);
            if scale > cfg.atol {
                report.max_rel_error = report.max_rel_error.max(diff / scale);
            }
            if ratio > worst_ratio {
                worst_ratio = ratio;
                report.worst = Some(Mismatch {
                    leaf: l,
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
            report.checked += 1;
        }
    }
    report.passed = worst_ratio <= 1.0;
    Ok(report)
}
