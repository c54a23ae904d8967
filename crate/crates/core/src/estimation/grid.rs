//! Exhaustive profile search and the per-alpha driver.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::PatientParams;
use crate::real::Real;

use super::benders::benders_solve;
use super::subproblem::{check_kinetics, Evaluator};
use super::{
    geometric, EstimateResult, EstimationConfig, EstimationDiagnostics, EstimationError, ObservationSeries, PriorSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grid,
    Benders,
}

/// Product grid searched by [`mle_grid`]. `k_values` must be ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationGrid<R> {
    pub alphas: Vec<R>,
    pub b_values: Vec<R>,
    pub k_values: Vec<R>,
}

/// The coarse elimination-rate mesh of `cfg`.
pub fn k_mesh<R: Real>(cfg: &EstimationConfig<R>) -> Vec<R> {
    geometric(cfg.domains.k_range.0, cfg.domains.k_range.1, cfg.k_mesh_points)
}

/// Splits the mesh intervals adjacent to `mesh[idx]` into `factor` log-spaced
/// pieces each. The result is ascending and contains `mesh[idx]` exactly.
pub fn refine_mesh<R: Real>(mesh: &[R], idx: usize, factor: usize) -> Vec<R> {
    let factor = factor.max(1);
    let mut out = Vec::new();
    if idx > 0 {
        let seg = geometric(mesh[idx - 1], mesh[idx], factor + 1);
        out.extend_from_slice(&seg[..factor]);
    }
    out.push(mesh[idx]);
    if idx + 1 < mesh.len() {
        let seg = geometric(mesh[idx], mesh[idx + 1], factor + 1);
        out.extend_from_slice(&seg[1..]);
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Scored<R> {
    pub key: (usize, usize, R),
    pub value: R,
    pub theta: [R; 3],
}

/// Higher value wins; ties go to the smaller `(alpha index, b index, k)`.
pub(crate) fn better<R: Real>(a: &Scored<R>, b: &Option<Scored<R>>) -> bool {
    match b {
        None => true,
        Some(b) => match a.value.partial_cmp(&b.value) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Equal) => {
                (a.key.0, a.key.1) < (b.key.0, b.key.1) || ((a.key.0, a.key.1) == (b.key.0, b.key.1) && a.key.2 < b.key.2)
            }
            _ => false,
        },
    }
}

fn to_result<R: Real>(
    s: &Scored<R>,
    alphas: &[R],
    b_values: &[R],
    cfg: &EstimationConfig<R>,
    diag: EstimationDiagnostics,
) -> EstimateResult<R> {
    let params = PatientParams {
        alpha: alphas[s.key.0],
        k: s.key.2,
        b: b_values[s.key.1],
        y0: s.theta[0],
        yb0: s.theta[1],
        yb: s.theta[2],
    };
    let log_prior = PriorSpec::default().log_density(&params, &cfg.domains);
    EstimateResult {
        params,
        log_likelihood: s.value,
        log_posterior: s.value + log_prior,
        diagnostics: diag,
    }
}

fn check_inputs<R: Real>(obs: &ObservationSeries<R>, cfg: &EstimationConfig<R>) -> Result<(), EstimationError> {
    obs.validate()?;
    cfg.validate()?;
    if obs.observations.is_empty() {
        return Err(EstimationError::InvalidInput("at least one reading is required".into()));
    }
    Ok(())
}

/// Maximum-likelihood search over a product grid with one refinement pass
/// around the incumbent elimination rate.
pub fn mle_grid<R: Real>(
    obs: &ObservationSeries<R>,
    grid: &EstimationGrid<R>,
    cfg: &EstimationConfig<R>,
) -> Result<EstimateResult<R>, EstimationError> {
    let start = Instant::now();
    check_inputs(obs, cfg)?;
    if grid.alphas.is_empty() || grid.b_values.is_empty() || grid.k_values.is_empty() {
        return Err(EstimationError::InvalidInput("empty grid".into()));
    }
    if grid.k_values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EstimationError::InvalidInput("k values must be strictly ascending".into()));
    }
    for &a in &grid.alphas {
        for &b in &grid.b_values {
            for &k in &grid.k_values {
                check_kinetics(a, b, k, &cfg.domains)?;
            }
        }
    }
    let ev = Evaluator::new(obs, cfg, None);
    let mut diag = EstimationDiagnostics {
        low_information: obs.low_information(),
        ..Default::default()
    };
    let mut best: Option<Scored<R>> = None;
    let mut best_k_idx = 0usize;
    for (ai, &alpha) in grid.alphas.iter().enumerate() {
        for (ki, &k) in grid.k_values.iter().enumerate() {
            let x = ev.x_path(alpha, k);
            for (bi, &b) in grid.b_values.iter().enumerate() {
                let fit = ev.fit_path(&x, b, false)?;
                diag.lp_solves += fit.solves;
                diag.iterations += 1;
                if let Some(v) = fit.value {
                    let s = Scored {
                        key: (ai, bi, k),
                        value: v,
                        theta: fit.theta,
                    };
                    if better(&s, &best) {
                        best = Some(s);
                        best_k_idx = ki;
                    }
                }
            }
        }
    }
    let Some(coarse) = best else {
        return Err(EstimationError::Failed("no grid point is compatible with the state bounds".into()));
    };
    let ai = coarse.key.0;
    let alpha = grid.alphas[ai];
    for k in refine_mesh(&grid.k_values, best_k_idx, cfg.k_refine) {
        let x = ev.x_path(alpha, k);
        for (bi, &b) in grid.b_values.iter().enumerate() {
            let fit = ev.fit_path(&x, b, false)?;
            diag.lp_solves += fit.solves;
            diag.iterations += 1;
            if let Some(v) = fit.value {
                let s = Scored {
                    key: (ai, bi, k),
                    value: v,
                    theta: fit.theta,
                };
                if better(&s, &best) {
                    best = Some(s);
                }
            }
        }
    }
    diag.wall_time_s = start.elapsed().as_secs_f64();
    Ok(to_result(&best.unwrap(), &grid.alphas, &grid.b_values, cfg, diag))
}

/// Best estimate over every `alpha` in the declared set, searching `(k, b)` per
/// alpha with the chosen inner method.
pub fn mle_estimate<R: Real>(
    obs: &ObservationSeries<R>,
    method: Method,
    cfg: &EstimationConfig<R>,
) -> Result<EstimateResult<R>, EstimationError> {
    let start = Instant::now();
    check_inputs(obs, cfg)?;
    let ks = k_mesh(cfg);
    let alphas = cfg.domains.alpha_set.clone();
    let mut diag = EstimationDiagnostics {
        low_information: obs.low_information(),
        ..Default::default()
    };
    let mut best: Option<Scored<R>> = None;
    let mut last_err = None;
    for (ai, &alpha) in alphas.iter().enumerate() {
        let inner = match method {
            Method::Grid => {
                let grid = EstimationGrid {
                    alphas: vec![alpha],
                    b_values: cfg.b_mesh.clone(),
                    k_values: ks.clone(),
                };
                mle_grid(obs, &grid, cfg).map(|r| {
                    let bi = cfg.b_mesh.iter().position(|&b| b == r.params.b).unwrap_or(0);
                    (
                        Scored {
                            key: (ai, bi, r.params.k),
                            value: r.log_likelihood,
                            theta: [r.params.y0, r.params.yb0, r.params.yb],
                        },
                        r.diagnostics,
                    )
                })
            }
            Method::Benders => benders_solve(obs, alpha, cfg.epsilon, &ks, &cfg.b_mesh, cfg).map(|o| {
                (
                    Scored {
                        key: (ai, o.b_index, o.k),
                        value: o.value,
                        theta: o.theta,
                    },
                    o.diagnostics,
                )
            }),
        };
        match inner {
            Ok((s, d)) => {
                diag.absorb(&d);
                if better(&s, &best) {
                    best = Some(s);
                }
            }
            Err(EstimationError::Failed(m)) => last_err = Some(m),
            Err(e) => return Err(e),
        }
    }
    let Some(best) = best else {
        return Err(EstimationError::Failed(
            last_err.unwrap_or_else(|| "no alpha produced a feasible fit".into()),
        ));
    };
    diag.wall_time_s = start.elapsed().as_secs_f64();
    Ok(to_result(&best, &alphas, &cfg.b_mesh, cfg, diag))
}
