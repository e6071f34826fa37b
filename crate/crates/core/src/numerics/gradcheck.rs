//! Central-difference verification of graph gradients.

use super::{Graph, Rng, Tensor, Var};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub tol: f64,
    /// Coordinates checked; every coordinate is checked when there are fewer.
    pub samples: usize,
    /// Seed of the subsample draw.
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            tol: 1e-4,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub worst: Option<Coordinate>,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients of `f` against central differences
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, and must
/// return a scalar loss. The coordinates checked are drawn uniformly without
/// replacement from all parameter elements using [`Rng`] seeded with
/// `cfg.seed`, then visited in ascending flat order.
pub fn finite_diff_check<F>(params: &[Tensor], cfg: &FdConfig, f: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    ensure!(
        cfg.step > 0.0 && cfg.step.is_finite(),
        Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {}",
            cfg.step
        ))
    );
    ensure!(
        !params.is_empty(),
        Error::InvalidArgument("no parameters to check".into())
    );

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    ensure!(
        g.value(loss).is_finite(),
        Error::NonFinite("loss at the unperturbed point".into())
    );
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    drop(g);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let flat: Vec<usize> = if total <= cfg.samples {
        (0..total).collect()
    } else {
        Rng::new(cfg.seed).sample_indices(total, cfg.samples)
    };

    let eval = |shifted: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = shifted.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: Option<Coordinate> = None;
    for &c in &flat {
        let param = offsets.partition_point(|&o| o <= c) - 1;
        let index = c - offsets[param];
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + cfg.step;
        let up = eval(&work)?;
        work[param].data_mut()[index] = orig - cfg.step;
        let down = eval(&work)?;
        work[param].data_mut()[index] = orig;
        ensure!(
            up.is_finite() && down.is_finite(),
            Error::NonFinite(format!("loss at perturbed coordinate {param}:{index}"))
        );
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[param].data()[index];
        let rel_err = relative_error(a, numeric);
        if worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
            worst = Some(Coordinate {
                param,
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
    Ok(FdReport {
        max_rel_err,
        pass: max_rel_err < cfg.tol,
        checked: flat.len(),
        worst,
    })
}
