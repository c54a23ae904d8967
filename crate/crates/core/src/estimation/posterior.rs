//! Posterior evaluation and the profile-weighted scenario table.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{KineticMode, PatientParams};
use crate::real::Real;

use super::subproblem::Evaluator;
use super::{
    geometric, EstimateResult, EstimationConfig, EstimationDiagnostics, EstimationError, ObservationSeries, PriorSpec,
};

/// Log posterior (up to the evidence) of a fully specified parameter vector;
/// minus infinity when the implied states leave their boxes.
pub fn log_posterior_at<R: Real>(
    obs: &ObservationSeries<R>,
    params: &PatientParams<R>,
    prior: &PriorSpec<R>,
    cfg: &EstimationConfig<R>,
) -> Result<R, EstimationError> {
    obs.validate()?;
    params.validate(&cfg.domains)?;
    prior.validate(&cfg.domains)?;
    let lp = prior.log_density(params, &cfg.domains);
    if lp == R::neg_infinity() {
        return Ok(lp);
    }
    let ev = Evaluator::new(obs, cfg, None);
    let x = ev.x_path(params.alpha, params.k);
    Ok(match ev.value_at(&x, params.b, &[params.y0, params.yb0, params.yb]) {
        Some(v) => v + lp,
        None => R::neg_infinity(),
    })
}

/// `exp(log posterior - map_value)`, clipped to `[0, 1]`. `map_value` must be the
/// log posterior at the MAP.
pub fn scaled_posterior<R: Real>(
    obs: &ObservationSeries<R>,
    params: &PatientParams<R>,
    prior: &PriorSpec<R>,
    map_value: R,
    cfg: &EstimationConfig<R>,
) -> Result<R, EstimationError> {
    let v = log_posterior_at(obs, params, prior, cfg)?;
    if v == R::neg_infinity() {
        return Ok(R::zero());
    }
    Ok((v - map_value).exp().min(R::one()).max(R::zero()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry<R> {
    pub alpha: R,
    pub b: R,
    /// Profiled parameters; `None` when no elimination rate fits the record.
    pub params: Option<PatientParams<R>>,
    /// Profile log posterior; `None` stands for minus infinity.
    pub log_weight: Option<R>,
    /// `exp(log_weight - max log_weight)`.
    pub raw_weight: R,
    /// `raw_weight / sum(raw_weight)`.
    pub weight: R,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTable<R> {
    pub scenarios: Vec<ScenarioEntry<R>>,
    /// Index of the highest-weight scenario (first on ties).
    pub map_index: usize,
    pub max_log_weight: R,
    pub diagnostics: EstimationDiagnostics,
}

impl<R: Real> ScenarioTable<R> {
    /// Single scenario with weight one.
    pub fn singleton(params: PatientParams<R>) -> Self {
        Self {
            scenarios: vec![ScenarioEntry {
                alpha: params.alpha,
                b: params.b,
                params: Some(params),
                log_weight: Some(R::zero()),
                raw_weight: R::one(),
                weight: R::one(),
            }],
            map_index: 0,
            max_log_weight: R::zero(),
            diagnostics: EstimationDiagnostics::default(),
        }
    }

    pub fn map_params(&self) -> PatientParams<R> {
        self.scenarios[self.map_index].params.expect("the MAP scenario is feasible")
    }

    /// Scenarios with positive weight, paired with their normalized weight.
    pub fn weighted(&self) -> impl Iterator<Item = (&PatientParams<R>, R)> {
        self.scenarios
            .iter()
            .filter(|s| s.weight > R::zero())
            .filter_map(|s| s.params.as_ref().map(|p| (p, s.weight)))
    }

    /// Rebuilds raw and normalized weights from the log weights.
    pub fn normalize(&mut self) -> Result<(), EstimationError> {
        let mut best: Option<(usize, R)> = None;
        for (i, s) in self.scenarios.iter().enumerate() {
            if let Some(v) = s.log_weight {
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        let Some((mi, mx)) = best else {
            return Err(EstimationError::Failed("every scenario is incompatible with the record".into()));
        };
        let mut total = R::zero();
        for s in self.scenarios.iter_mut() {
            s.raw_weight = s.log_weight.map_or(R::zero(), |v| (v - mx).exp());
            total += s.raw_weight;
        }
        for s in self.scenarios.iter_mut() {
            s.weight = s.raw_weight / total;
        }
        self.map_index = mi;
        self.max_log_weight = mx;
        Ok(())
    }
}

struct KPoint<R> {
    k: R,
    value: Option<R>,
    theta: [R; 3],
    modes: Vec<KineticMode>,
}

struct ProfileSearch<'e, 'a, R> {
    ev: &'e Evaluator<'a, R>,
    prior: &'e PriorSpec<R>,
    cfg: &'e EstimationConfig<R>,
    alpha: R,
    b: R,
    solves: usize,
    evals: usize,
}

impl<R: Real> ProfileSearch<'_, '_, R> {
    fn eval(&mut self, k: R) -> Result<KPoint<R>, EstimationError> {
        let (x, modes) = self.ev.model.x_path(&self.ev.obs.doses, self.alpha, k, self.ev.x_max);
        let fit = self.ev.fit_path(&x, self.b, false)?;
        self.solves += fit.solves;
        self.evals += 1;
        let kp = self.prior.log_kinetic(self.b, k, &self.cfg.domains);
        let value = fit.value.map(|v| v + kp).filter(|v| *v > R::neg_infinity());
        Ok(KPoint {
            k,
            value,
            theta: fit.theta,
            modes,
        })
    }

    fn score(p: &KPoint<R>) -> R {
        p.value.unwrap_or(R::neg_infinity())
    }

    /// Golden-section maximization on `[lo, hi]` (concave when the mode sequence is fixed).
    fn golden(&mut self, lo: R, hi: R) -> Result<Vec<KPoint<R>>, EstimationError> {
        let phi = (R::lit(5.0).sqrt() - R::one()) / R::lit(2.0);
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut pc = self.eval(c)?;
        let mut pd = self.eval(d)?;
        let mut out = Vec::new();
        let tol = R::lit(1e-7) * hi;
        for _ in 0..60 {
            if (b - a) <= tol {
                break;
            }
            if Self::score(&pc) >= Self::score(&pd) {
                b = d;
                d = c;
                out.push(std::mem::replace(&mut pd, pc));
                c = b - phi * (b - a);
                pc = self.eval(c)?;
            } else {
                a = c;
                c = d;
                out.push(std::mem::replace(&mut pc, pd));
                d = a + phi * (b - a);
                pd = self.eval(d)?;
            }
        }
        out.push(pc);
        out.push(pd);
        Ok(out)
    }

    fn run(&mut self) -> Result<Option<KPoint<R>>, EstimationError> {
        let (klo, khi) = self.prior.k.support(self.cfg.domains.k_range);
        let mesh = geometric(klo, khi, self.cfg.k_mesh_points);
        let mut pts = Vec::with_capacity(mesh.len());
        for &k in &mesh {
            pts.push(self.eval(k)?);
        }
        let pick = |pts: &[KPoint<R>]| -> Option<usize> {
            let mut best: Option<usize> = None;
            for (i, p) in pts.iter().enumerate() {
                if let Some(v) = p.value {
                    if best.map_or(true, |j| v > pts[j].value.unwrap()) {
                        best = Some(i);
                    }
                }
            }
            best
        };
        let Some(bi) = pick(&pts) else {
            return Ok(None);
        };
        let mut cands: Vec<KPoint<R>> = Vec::new();
        for (l, r) in [(bi.wrapping_sub(1), bi), (bi, bi + 1)] {
            if l >= pts.len() || r >= pts.len() {
                continue;
            }
            if pts[l].modes == pts[r].modes {
                cands.extend(self.golden(pts[l].k, pts[r].k)?);
            } else {
                let sub = geometric(pts[l].k, pts[r].k, self.cfg.k_refine.max(1) + 1);
                for &k in &sub[1..sub.len() - 1] {
                    cands.push(self.eval(k)?);
                }
            }
        }
        let base = pts.swap_remove(bi);
        let mut best = base;
        for c in cands {
            if let Some(v) = c.value {
                let bv = best.value.unwrap();
                if v > bv || (v == bv && c.k < best.k) {
                    best = c;
                }
            }
        }
        Ok(Some(best))
    }
}

/// Profile posterior weights over the `(alpha, b)` scenario grid.
///
/// Each scenario's weight is the posterior maximized over the elimination rate
/// (geometric mesh plus refinement next to the best mesh point) and over
/// `(y0, yb0, yb)` (inside the LP). Scenarios are evaluated in parallel; the
/// result does not depend on the evaluation order.
pub fn scenario_table<R: Real>(
    obs: &ObservationSeries<R>,
    alphas: &[R],
    b_values: &[R],
    prior: &PriorSpec<R>,
    cfg: &EstimationConfig<R>,
) -> Result<ScenarioTable<R>, EstimationError> {
    let start = Instant::now();
    obs.validate()?;
    cfg.validate()?;
    prior.validate(&cfg.domains)?;
    if obs.observations.is_empty() {
        return Err(EstimationError::InvalidInput("at least one reading is required".into()));
    }
    if alphas.is_empty() || b_values.is_empty() {
        return Err(EstimationError::InvalidInput("empty scenario grid".into()));
    }
    for &a in alphas {
        if !cfg.domains.contains_alpha(a) {
            return Err(EstimationError::InvalidInput(format!("alpha {a} is not in the declared set")));
        }
    }
    for &b in b_values {
        if !(b >= cfg.domains.b_range.0 && b <= cfg.domains.b_range.1) {
            return Err(EstimationError::InvalidInput(format!("b {b} outside the declared range")));
        }
    }
    let ev = Evaluator::new(obs, cfg, Some(prior));
    let grid: Vec<(R, R)> = alphas
        .iter()
        .flat_map(|&a| b_values.iter().map(move |&b| (a, b)))
        .collect();
    let results: Vec<Result<(ScenarioEntry<R>, usize, usize), EstimationError>> = grid
        .par_iter()
        .map(|&(alpha, b)| {
            let empty = ScenarioEntry {
                alpha,
                b,
                params: None,
                log_weight: None,
                raw_weight: R::zero(),
                weight: R::zero(),
            };
            if prior.b.log_density(b, cfg.domains.b_range) == R::neg_infinity() {
                return Ok((empty, 0, 0));
            }
            let mut search = ProfileSearch {
                ev: &ev,
                prior,
                cfg,
                alpha,
                b,
                solves: 0,
                evals: 0,
            };
            let best = search.run()?;
            let entry = match best {
                None => empty,
                Some(p) => ScenarioEntry {
                    alpha,
                    b,
                    params: Some(PatientParams {
                        alpha,
                        k: p.k,
                        b,
                        y0: p.theta[0],
                        yb0: p.theta[1],
                        yb: p.theta[2],
                    }),
                    log_weight: p.value,
                    raw_weight: R::zero(),
                    weight: R::zero(),
                },
            };
            Ok((entry, search.solves, search.evals))
        })
        .collect();
    let mut scenarios = Vec::with_capacity(results.len());
    let mut diag = EstimationDiagnostics {
        low_information: obs.low_information(),
        ..Default::default()
    };
    for r in results {
        let (e, solves, evals) = r?;
        diag.lp_solves += solves;
        diag.iterations += evals;
        scenarios.push(e);
    }
    let mut table = ScenarioTable {
        scenarios,
        map_index: 0,
        max_log_weight: R::zero(),
        diagnostics: diag,
    };
    table.normalize()?;
    table.diagnostics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(table)
}

/// Maximum a posteriori estimate over the declared alpha set and `cfg.b_mesh`.
pub fn map_estimate<R: Real>(
    obs: &ObservationSeries<R>,
    prior: &PriorSpec<R>,
    cfg: &EstimationConfig<R>,
) -> Result<EstimateResult<R>, EstimationError> {
    let table = scenario_table(obs, &cfg.domains.alpha_set, &cfg.b_mesh, prior, cfg)?;
    let params = table.map_params();
    let ev = Evaluator::new(obs, cfg, None);
    let x = ev.x_path(params.alpha, params.k);
    let ll = ev
        .value_at(&x, params.b, &[params.y0, params.yb0, params.yb])
        .ok_or_else(|| EstimationError::Failed("MAP point violates the state bounds".into()))?;
    Ok(EstimateResult {
        params,
        log_likelihood: ll,
        log_posterior: table.max_log_weight,
        diagnostics: table.diagnostics,
    })
}
