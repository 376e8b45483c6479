//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward kernels it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Number of coordinates to probe; every coordinate is probed when the
    /// inputs have fewer than this.
    pub coordinates: usize,
    /// Relative errors divide by `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
    /// Added to every analytic gradient before comparison. Only useful as a
    /// negative control.
    pub perturb_analytic: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coordinates: 100,
            floor: 1e-6,
            seed: 0,
            perturb_analytic: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error < self.tolerance)
    }
}

fn evaluate<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.data(out)[0])
}

/// Compares backprop gradients of the scalar produced by `build` against
/// central differences, over a random subset of the coordinates of every
/// input that has `requires_grad` set.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad)
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    if coords.is_empty() {
        return Err(Error::Input("no input requires a gradient".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked: Vec<(usize, usize)> = if coords.len() <= cfg.coordinates {
        coords
    } else {
        let mut idx = sample(&mut rng, coords.len(), cfg.coordinates).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut work = inputs.to_vec();
    let mut checks = Vec::with_capacity(picked.len());
    for (input, element) in picked {
        let analytic = g.grad(ids[input]).map_or(0.0, |gr| gr[element]) + cfg.perturb_analytic;
        let original = work[input].data()[element];
        work[input].data_mut()[element] = original + cfg.step;
        let plus = evaluate(&build, &work)?;
        work[input].data_mut()[element] = original - cfg.step;
        let minus = evaluate(&build, &work)?;
        work[input].data_mut()[element] = original;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        checks.push(CoordinateCheck {
            input,
            element,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / denom,
        });
    }
    Ok(GradCheckReport {
        checks,
        tolerance: cfg.tolerance,
    })
}
