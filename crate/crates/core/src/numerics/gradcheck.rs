//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference probe campaign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub probes: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// turning round-off into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences at `probes` randomly chosen input coordinates.
pub fn check_gradients<F, R>(
    build: F,
    inputs: &[Tensor],
    step: f64,
    probes: usize,
    rng: &mut R,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + step;
        let plus = eval(&work)?;
        work[which].data_mut()[flat] = orig - step;
        let minus = eval(&work)?;
        work[which].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[which].data()[flat], numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probes,
    })
}
