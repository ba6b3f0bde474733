//! Central-finite-difference gradient oracle. Runs at f64 with step 1e-5;
//! relative error uses `|a-n| / max(|a|, |n|, 1e-8)` elementwise.
//!
//! Central differences of a loss of magnitude ~1 carry cancellation noise of
//! roughly `machine_eps / step` ≈ 2e-11 in absolute terms, so gradient
//! coordinates below `FD_NOISE_FLOOR` cannot support a meaningful relative
//! comparison; `check_param_gradients` compares those absolutely instead.

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_DENOM_FLOOR: f64 = 1e-8;
/// Gradient magnitude below which finite differences are noise-dominated.
pub const FD_NOISE_FLOOR: f64 = 1e-6;
/// Absolute agreement required for noise-dominated coordinates.
pub const FD_NOISE_ABS_TOL: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_DENOM_FLOOR)
}

/// Check analytic gradients of a scalar-valued graph builder against central
/// finite differences. `build` receives differentiable leaves for `inputs`
/// and must return a scalar node. Returns the max relative error over all
/// input coordinates (or a random subset of `coords_per_input` if given).
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    coords_per_input: Option<usize>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        ids.iter().map(|&id| g.grad(id).unwrap_or_else(|| Tensor::zeros(g.shape(id).to_vec()))).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match coords_per_input {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[c], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check against registered parameters: `loss` evaluates
/// the model at the current parameter values, `analytic` holds gradients
/// already accumulated into the set. Samples `coords_per_param` coordinates
/// from every parameter and returns (worst error, name of worst parameter).
pub fn check_param_gradients(
    params: &mut ParamSet<f64>,
    loss: impl Fn(&ParamSet<f64>) -> Result<f64>,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<(f64, String)> {
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.value(id).numel();
        let coords: Vec<usize> = if coords_per_param < n {
            sample(rng, n, coords_per_param).into_vec()
        } else {
            (0..n).collect()
        };
        for c in coords {
            let orig = params.value(id).data()[c];
            params.value_mut(id).data_mut()[c] = orig + FD_STEP;
            let up = loss(params)?;
            params.value_mut(id).data_mut()[c] = orig - FD_STEP;
            let down = loss(params)?;
            params.value_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = params.grad(id).data()[c];
            if analytic.abs() < FD_NOISE_FLOOR && numeric.abs() < FD_NOISE_FLOOR {
                // below the FD noise floor: relative comparison is meaningless
                assert!(
                    (analytic - numeric).abs() <= FD_NOISE_ABS_TOL,
                    "noise-floor coordinate disagrees absolutely: {analytic} vs {numeric}"
                );
                continue;
            }
            let e = rel_err(analytic, numeric);
            if e > worst {
                worst = e;
                worst_name = params.entry(id).name.clone();
            }
        }
    }
    Ok((worst, worst_name))
}

/// Fill a tensor with uniform values in [-1, 1).
pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}
