//! Benders decomposition over a finite `(k, b)` candidate set for one `alpha`.
//!
//! The master keeps every cut returned by the subproblem dual. Optimality cuts
//! bound the profiled log-likelihood from above as an affine function of the
//! heparin path; feasibility cuts exclude candidates whose state boxes cannot be
//! met. Each iteration evaluates the candidate with the largest cut bound and
//! stops once the best evaluated value is within `epsilon` of that bound. A
//! second stage repeats the loop on a refined elimination-rate mesh around the
//! incumbent, reusing all cuts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::real::Real;

use super::grid::refine_mesh;
use super::subproblem::{check_kinetics, Cut, Evaluator};
use super::{EstimationConfig, EstimationDiagnostics, EstimationError, ObservationSeries};

/// Bounds after one master iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTrace {
    /// 0 for the coarse mesh, 1 for the refined mesh.
    pub stage: usize,
    pub iteration: usize,
    /// Best evaluated value so far.
    pub lower: f64,
    /// Master bound before the iteration's evaluation.
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BendersOutcome<R> {
    pub k: R,
    pub b: R,
    pub b_index: usize,
    /// Profiled log-likelihood at the incumbent.
    pub value: R,
    /// `(y0, yb0, yb)` at the incumbent.
    pub theta: [R; 3],
    /// Final master bound; `value <= upper` and `upper - value <= epsilon`.
    pub upper: R,
    pub trace: Vec<BoundTrace>,
    pub diagnostics: EstimationDiagnostics,
}

struct StoredCut<R> {
    feasibility: bool,
    constant: R,
    /// `lambda . x(k)` per candidate `k`.
    dots: Vec<R>,
    lambda: Vec<R>,
}

struct Incumbent<R> {
    ki_value: R,
    bi: usize,
    value: R,
    theta: [R; 3],
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Runs the decomposition for a fixed `alpha`.
pub fn benders_solve<R: Real>(
    obs: &ObservationSeries<R>,
    alpha: R,
    epsilon: R,
    k_candidates: &[R],
    b_candidates: &[R],
    cfg: &EstimationConfig<R>,
) -> Result<BendersOutcome<R>, EstimationError> {
    let start = Instant::now();
    obs.validate()?;
    cfg.gammas.validate()?;
    if obs.observations.is_empty() {
        return Err(EstimationError::InvalidInput("at least one reading is required".into()));
    }
    if !(epsilon > R::zero()) {
        return Err(EstimationError::InvalidInput("epsilon must be positive".into()));
    }
    if k_candidates.is_empty() || b_candidates.is_empty() {
        return Err(EstimationError::InvalidInput("empty candidate set".into()));
    }
    if k_candidates.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EstimationError::InvalidInput("k candidates must be strictly ascending".into()));
    }
    for &b in b_candidates {
        for &k in k_candidates {
            check_kinetics(alpha, b, k, &cfg.domains)?;
        }
    }
    let ev = Evaluator::new(obs, cfg, None);
    let mut cuts: Vec<StoredCut<R>> = Vec::new();
    let mut diag = EstimationDiagnostics {
        low_information: obs.low_information(),
        ..Default::default()
    };
    let mut trace = Vec::new();
    let mut incumbent: Option<Incumbent<R>> = None;

    let mut ks: Vec<R> = k_candidates.to_vec();
    let stages = if ks.len() > 1 && cfg.k_refine > 1 { 2 } else { 1 };
    let mut upper_final = R::infinity();
    let mut total_iter = 0usize;

    for stage in 0..stages {
        if stage == 1 {
            let inc = incumbent.as_ref().expect("stage 0 ends with an incumbent");
            let idx = ks.iter().position(|&k| k == inc.ki_value).unwrap_or(0);
            ks = refine_mesh(&ks, idx, cfg.k_refine);
        }
        let xs: Vec<Vec<R>> = ks.iter().map(|&k| ev.x_path(alpha, k)).collect();
        for c in cuts.iter_mut() {
            c.dots = xs.iter().map(|x| dot(&c.lambda, x)).collect();
        }
        // Exact values for candidates evaluated in this stage: Some(Some(v)) feasible, Some(None) infeasible.
        let mut known: Vec<Option<Option<R>>> = vec![None; ks.len() * b_candidates.len()];
        if let Some(inc) = incumbent.as_ref() {
            if let Some(ki) = ks.iter().position(|&k| k == inc.ki_value) {
                known[inc.bi * ks.len() + ki] = Some(Some(inc.value));
            }
        }
        let slack = cfg.lp.feas * R::lit(100.0);
        let mut iteration = 0usize;
        loop {
            // Master: best bound over candidates not excluded.
            let mut arg: Option<(usize, usize, R)> = None;
            for bi in 0..b_candidates.len() {
                let b = b_candidates[bi];
                'cand: for ki in 0..ks.len() {
                    let ub = match known[bi * ks.len() + ki] {
                        Some(None) => continue,
                        Some(Some(v)) => v,
                        None => {
                            let mut ub = R::infinity();
                            for c in &cuts {
                                let v = c.constant + b * c.dots[ki];
                                if c.feasibility {
                                    if v > slack {
                                        continue 'cand;
                                    }
                                } else {
                                    ub = ub.min(v);
                                }
                            }
                            ub
                        }
                    };
                    if arg.map_or(true, |(_, _, best)| ub > best) {
                        arg = Some((bi, ki, ub));
                    }
                }
            }
            let Some((bi, ki, ub)) = arg else {
                if incumbent.is_none() {
                    return Err(EstimationError::Failed(format!(
                        "no candidate is compatible with the state bounds at alpha = {alpha}"
                    )));
                }
                upper_final = incumbent.as_ref().unwrap().value;
                break;
            };
            let lbd = incumbent.as_ref().map_or(R::neg_infinity(), |i| i.value);
            if incumbent.is_some() && lbd >= ub - epsilon {
                upper_final = ub.max(lbd);
                trace.push(BoundTrace {
                    stage,
                    iteration,
                    lower: lbd.f64(),
                    upper: ub.max(lbd).f64(),
                });
                break;
            }
            if known[bi * ks.len() + ki].is_some() {
                // An evaluated candidate tops the master only if it is the incumbent.
                upper_final = ub;
                break;
            }
            iteration += 1;
            total_iter += 1;
            if total_iter > cfg.max_benders_iterations {
                return Err(EstimationError::IterationLimit {
                    iterations: total_iter,
                    gap: (ub - lbd).f64(),
                });
            }
            let (k, b) = (ks[ki], b_candidates[bi]);
            let fit = ev.fit_path(&xs[ki], b, true)?;
            diag.lp_solves += fit.solves;
            diag.iterations += 1;
            match fit.value {
                Some(v) => {
                    known[bi * ks.len() + ki] = Some(Some(v));
                    let replace = match incumbent.as_ref() {
                        None => true,
                        Some(i) => v > i.value || (v == i.value && (bi, k) < (i.bi, i.ki_value)),
                    };
                    if replace {
                        incumbent = Some(Incumbent {
                            ki_value: k,
                            bi,
                            value: v,
                            theta: fit.theta,
                        });
                    }
                }
                None => known[bi * ks.len() + ki] = Some(None),
            }
            if let Some(cut) = fit.cut {
                let (feasibility, constant, lambda) = match cut {
                    Cut::Optimality { constant, lambda } => {
                        diag.optimality_cuts += 1;
                        (false, constant, lambda)
                    }
                    Cut::Feasibility { constant, lambda } => {
                        diag.feasibility_cuts += 1;
                        (true, constant, lambda)
                    }
                };
                let dots = xs.iter().map(|x| dot(&lambda, x)).collect();
                cuts.push(StoredCut {
                    feasibility,
                    constant,
                    dots,
                    lambda,
                });
            }
            let lower = incumbent.as_ref().map_or(f64::NEG_INFINITY, |i| i.value.f64());
            trace.push(BoundTrace {
                stage,
                iteration,
                lower,
                upper: ub.f64(),
            });
        }
    }
    let inc = incumbent.expect("loop exits with an incumbent");
    diag.wall_time_s = start.elapsed().as_secs_f64();
    Ok(BendersOutcome {
        k: inc.ki_value,
        b: b_candidates[inc.bi],
        b_index: inc.bi,
        value: inc.value,
        theta: inc.theta,
        upper: upper_final,
        trace,
        diagnostics: diag,
    })
}
