//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Tensor};
use super::optim::Parameter;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are judged on absolute error instead.
    pub floor: f64,
    /// Coordinates checked per parameter group; `None` checks all of them.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            sample: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

fn bind<'g>(g: &'g Graph, params: &[Parameter], differentiable: bool) -> Result<Vec<Tensor<'g>>> {
    params
        .iter()
        .map(|p| {
            if differentiable {
                g.param(p.value.clone(), &p.shape)
            } else {
                g.constant(p.value.clone(), &p.shape)
            }
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of `f` at `params` against
/// `(f(p+h) − f(p−h)) / 2h` coordinate by coordinate.
pub fn grad_check<F>(f: F, params: &[Parameter], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let bound = bind(&g, params, true)?;
        let loss = f(&g, &bound)?;
        loss.backward()?;
        bound
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let eval = |ps: &[Parameter]| -> Result<f64> {
        let g = Graph::no_grad();
        let bound = bind(&g, ps, false)?;
        Ok(f(&g, &bound)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.sample {
            Some(k) if k < p.numel() => sample(&mut rng, p.numel(), k).into_vec(),
            _ => (0..p.numel()).collect(),
        };
        let mut report = GroupReport {
            name: p.name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for &i in &coords {
            let x0 = p.value[i];
            work[pi].value[i] = x0 + cfg.h;
            let fp = eval(&work)?;
            work[pi].value[i] = x0 - cfg.h;
            let fm = eval(&work)?;
            work[pi].value[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[pi][i];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, cfg.floor));
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
        }
        groups.push(report);
    }

    let max_rel_error = groups.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        checked: groups.iter().map(|r| r.checked).sum(),
        passed: max_rel_error < cfg.tol,
        groups,
    })
}
