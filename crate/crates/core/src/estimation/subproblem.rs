//! Profile fit of `theta = (y0, yb0, yb)` for a fixed heparin path.
//!
//! The primal problem is
//!
//! ```text
//! min_theta  sum_i w_i |r_i - g_i' theta|      (readings and Laplace prior terms)
//! s.t.       l_s <= G_s theta + b H_s <= u_s   (state boxes, theta boxes)
//! ```
//!
//! and the LP handed to the simplex kernel is its Lagrangian dual: one column
//! per L1 term with bounds `[-w_i, w_i]`, a pair of nonnegative columns per box,
//! and three equality rows. The row multipliers of the dual are `theta`. State
//! boxes are added only for states the current `theta` violates.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::dynamics::Domains;
use crate::lp::{solve_lp, LpProblem, LpStatus, Sense, Tolerances};
use crate::real::Real;

use super::response::AffineModel;
use super::{ComponentPrior, EstimationConfig, EstimationError, ObservationSeries, PriorSpec};

static PROFILE_GAP_BITS: AtomicU64 = AtomicU64::new(0);

/// Largest `|primal(theta) - dual optimum|` seen by any profile fit in this process.
pub fn profile_gap_max() -> f64 {
    f64::from_bits(PROFILE_GAP_BITS.load(Ordering::Relaxed))
}

fn record_gap(g: f64) {
    let g = if g.is_finite() { g.max(0.0) } else { f64::MAX };
    PROFILE_GAP_BITS.fetch_max(g.to_bits(), Ordering::Relaxed);
}

/// Boxes and L1 terms the prior puts on `theta`.
#[derive(Debug, Clone)]
pub(crate) struct ThetaPrior<R> {
    pub lo: [R; 3],
    pub hi: [R; 3],
    /// `(direction, center, weight)` for a term `weight * |direction . theta - center|`.
    pub l1: Vec<([R; 3], R, R)>,
    /// Sum of the log-density constants.
    pub log_const: R,
}

impl<R: Real> ThetaPrior<R> {
    /// Plain likelihood: `theta` ranges over `[0, y_max]^3`, no density terms.
    pub fn flat(y_max: R) -> Self {
        Self {
            lo: [R::zero(); 3],
            hi: [y_max; 3],
            l1: Vec::new(),
            log_const: R::zero(),
        }
    }

    pub fn from_spec(prior: &PriorSpec<R>, y_max: R) -> Self {
        let mut out = Self::flat(y_max);
        let dom = (R::zero(), y_max);
        for (j, c) in prior.theta().iter().enumerate() {
            let (lo, hi) = c.support(dom);
            out.lo[j] = lo;
            out.hi[j] = hi;
            match *c {
                ComponentPrior::Domain | ComponentPrior::Uniform { .. } => out.log_const -= (hi - lo).ln(),
                ComponentPrior::Laplace { center, scale } => {
                    let mut e = [R::zero(); 3];
                    e[j] = R::one();
                    out.l1.push((e, center, R::one() / scale));
                    out.log_const -= (R::lit(2.0) * scale).ln();
                }
            }
        }
        if let Some(s) = prior.initial_tie {
            for j in 0..2 {
                let mut e = [R::zero(); 3];
                e[j] = R::one();
                e[2] = -R::one();
                out.l1.push((e, R::zero(), R::one() / s));
                out.log_const -= (R::lit(2.0) * s).ln();
            }
        }
        out
    }
}

/// Bound on the profiled value as an affine function of `x`.
#[derive(Debug, Clone)]
pub(crate) enum Cut<R> {
    /// `value(alpha, k, b) <= constant + b * lambda . x(alpha, k)`.
    Optimality { constant: R, lambda: Vec<R> },
    /// Feasible `(alpha, k, b)` satisfy `constant + b * lambda . x(alpha, k) <= 0`.
    Feasibility { constant: R, lambda: Vec<R> },
}

#[derive(Debug, Clone)]
pub(crate) struct Fit<R> {
    /// Profiled log-likelihood plus the theta prior; `None` when no theta fits the boxes.
    pub value: Option<R>,
    pub theta: [R; 3],
    pub cut: Option<Cut<R>>,
    pub solves: usize,
}

#[derive(Clone, Copy)]
enum Col<R> {
    /// Reading at hour `t`, or a prior term when `t == usize::MAX`.
    Term { t: usize, target_const: R },
    BoxLow { state: State },
    BoxHigh { state: State },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum State {
    Theta(usize),
    Y(usize),
    Yb(usize),
}

pub(crate) struct Evaluator<'a, R> {
    pub obs: &'a ObservationSeries<R>,
    pub model: AffineModel<R>,
    pub prior: ThetaPrior<R>,
    pub y_max: R,
    pub x_max: R,
    pub tol: Tolerances<R>,
    obs_const: R,
}

impl<'a, R: Real> Evaluator<'a, R> {
    pub fn new(
        obs: &'a ObservationSeries<R>,
        cfg: &EstimationConfig<R>,
        prior: Option<&PriorSpec<R>>,
    ) -> Self {
        let y_max = cfg.domains.y_max;
        let n = R::from_usize(obs.observations.len()).unwrap();
        Self {
            obs,
            model: AffineModel::new(cfg.gammas, obs.horizon()),
            prior: prior.map_or_else(|| ThetaPrior::flat(y_max), |p| ThetaPrior::from_spec(p, y_max)),
            y_max,
            x_max: cfg.domains.x_max,
            tol: cfg.lp,
            obs_const: n * (R::lit(2.0) * obs.noise_scale).ln(),
        }
    }

    pub fn x_path(&self, alpha: R, k: R) -> Vec<R> {
        self.model.x_path(&self.obs.doses, alpha, k, self.x_max).0
    }

    /// Log-likelihood of a fully specified parameter vector (no LP).
    pub fn value_at(&self, x: &[R], b: R, th: &[R; 3]) -> Option<R> {
        let (hy, hb) = self.model.response(x);
        let slack = self.tol.feas;
        for t in 0..x.len() {
            let y = AffineModel::dot3(&self.model.gy[t], th) + b * hy[t];
            let yb = AffineModel::dot3(&self.model.gb[t], th) + b * hb[t];
            if y < -slack || y > self.y_max + slack || yb < -slack || yb > self.y_max + slack {
                return None;
            }
        }
        let w = R::one() / self.obs.noise_scale;
        let sum: R = self
            .obs
            .observations
            .iter()
            .map(|&(t, v)| w * (v - AffineModel::dot3(&self.model.gy[t], th) - b * hy[t]).abs())
            .sum();
        Some(-sum - self.obs_const)
    }

    pub fn y_path(&self, x: &[R], b: R, th: &[R; 3]) -> Vec<R> {
        let (hy, _) = self.model.response(x);
        (0..x.len())
            .map(|t| AffineModel::dot3(&self.model.gy[t], th) + b * hy[t])
            .collect()
    }

    pub fn fit_path(&self, x: &[R], b: R, want_cut: bool) -> Result<Fit<R>, EstimationError> {
        let (hy, hb) = self.model.response(x);
        let horizon = x.len() - 1;
        let w = R::one() / self.obs.noise_scale;
        let mut lazy: Vec<State> = Vec::new();
        let mut solves = 0usize;
        let g_of = |s: State| -> [R; 3] {
            match s {
                State::Theta(j) => {
                    let mut e = [R::zero(); 3];
                    e[j] = R::one();
                    e
                }
                State::Y(t) => self.model.gy[t],
                State::Yb(t) => self.model.gb[t],
            }
        };
        let h_of = |s: State| -> R {
            match s {
                State::Theta(_) => R::zero(),
                State::Y(t) => b * hy[t],
                State::Yb(t) => b * hb[t],
            }
        };
        let (lo_of, hi_of) = (
            |s: State| match s {
                State::Theta(j) => self.prior.lo[j],
                _ => R::zero(),
            },
            |s: State| match s {
                State::Theta(j) => self.prior.hi[j],
                _ => self.y_max,
            },
        );

        loop {
            let mut cols: Vec<Col<R>> = Vec::new();
            let mut acol: Vec<[R; 3]> = Vec::new();
            let mut cost = Vec::new();
            let mut lower = Vec::new();
            let mut upper = Vec::new();
            let boxes = (0..3).map(State::Theta).chain(lazy.iter().copied());
            for s in boxes {
                let g = g_of(s);
                let h = h_of(s);
                cols.push(Col::BoxLow { state: s });
                acol.push(g);
                cost.push(lo_of(s) - h);
                lower.push(R::zero());
                upper.push(R::infinity());
                cols.push(Col::BoxHigh { state: s });
                acol.push([-g[0], -g[1], -g[2]]);
                cost.push(-(hi_of(s) - h));
                lower.push(R::zero());
                upper.push(R::infinity());
            }
            for &(e, c, wj) in &self.prior.l1 {
                cols.push(Col::Term {
                    t: usize::MAX,
                    target_const: c,
                });
                acol.push(e);
                cost.push(c);
                lower.push(-wj);
                upper.push(wj);
            }
            for &(t, v) in &self.obs.observations {
                cols.push(Col::Term { t, target_const: v });
                acol.push(self.model.gy[t]);
                cost.push(v - b * hy[t]);
                lower.push(-w);
                upper.push(w);
            }
            let n = cols.len();
            let mut a = vec![R::zero(); 3 * n];
            for (j, g) in acol.iter().enumerate() {
                for i in 0..3 {
                    a[i * n + j] = g[i];
                }
            }
            let lp = LpProblem::new(Sense::Maximize, cost, a, vec![R::zero(); 3], lower, upper)?;
            let sol = solve_lp(&lp, &self.tol)?;
            solves += 1;
            match sol.status {
                LpStatus::Infeasible => {
                    return Err(EstimationError::Failed("profile dual reported infeasible".into()));
                }
                LpStatus::Unbounded => {
                    let d = sol.ray.expect("unbounded solutions carry a ray");
                    let cut = if want_cut {
                        let mut constant = R::zero();
                        let mut cy = vec![R::zero(); horizon + 1];
                        let mut cb = vec![R::zero(); horizon + 1];
                        for (c, &dj) in cols.iter().zip(&d) {
                            if dj == R::zero() {
                                continue;
                            }
                            match *c {
                                Col::Term { t, target_const, .. } => {
                                    constant += dj * target_const;
                                    if t != usize::MAX {
                                        cy[t] -= dj;
                                    }
                                }
                                Col::BoxLow { state } => {
                                    constant += dj * lo_of(state);
                                    add_state(&mut cy, &mut cb, state, -dj);
                                }
                                Col::BoxHigh { state } => {
                                    constant -= dj * hi_of(state);
                                    add_state(&mut cy, &mut cb, state, dj);
                                }
                            }
                        }
                        Some(Cut::Feasibility {
                            constant,
                            lambda: self.model.adjoint(&cy, &cb),
                        })
                    } else {
                        None
                    };
                    return Ok(Fit {
                        value: None,
                        theta: [R::zero(); 3],
                        cut,
                        solves,
                    });
                }
                LpStatus::Optimal => {}
            }
            let mut th = [sol.duals[0], sol.duals[1], sol.duals[2]];
            for j in 0..3 {
                th[j] = th[j].max(self.prior.lo[j]).min(self.prior.hi[j]);
            }
            let slack = self.tol.feas * R::lit(10.0);
            let mut added = false;
            for t in 1..=horizon {
                for s in [State::Y(t), State::Yb(t)] {
                    let v = AffineModel::dot3(&g_of(s), &th) + h_of(s);
                    if (v < -slack || v > self.y_max + slack) && !lazy.contains(&s) {
                        lazy.push(s);
                        added = true;
                    }
                }
            }
            if added {
                continue;
            }
            let dual_opt = sol.objective;
            let l1_sum: R = self
                .obs
                .observations
                .iter()
                .map(|&(t, v)| w * (v - AffineModel::dot3(&self.model.gy[t], &th) - b * hy[t]).abs())
                .sum::<R>()
                + self.prior.l1.iter().map(|&(e, c, wj)| wj * (AffineModel::dot3(&e, &th) - c).abs()).sum::<R>();
            record_gap((l1_sum - dual_opt).abs().f64());
            let value = -l1_sum - self.obs_const + self.prior.log_const;
            let cut = if want_cut {
                let mut constant = -self.obs_const + self.prior.log_const;
                let mut cy = vec![R::zero(); horizon + 1];
                let mut cb = vec![R::zero(); horizon + 1];
                for (c, &v) in cols.iter().zip(&sol.x) {
                    if v == R::zero() {
                        continue;
                    }
                    match *c {
                        Col::Term { t, target_const, .. } => {
                            constant -= v * target_const;
                            if t != usize::MAX {
                                cy[t] += v;
                            }
                        }
                        Col::BoxLow { state } => {
                            constant -= v * lo_of(state);
                            add_state(&mut cy, &mut cb, state, v);
                        }
                        Col::BoxHigh { state } => {
                            constant += v * hi_of(state);
                            add_state(&mut cy, &mut cb, state, -v);
                        }
                    }
                }
                Some(Cut::Optimality {
                    constant,
                    lambda: self.model.adjoint(&cy, &cb),
                })
            } else {
                None
            };
            return Ok(Fit {
                value: Some(value),
                theta: th,
                cut,
                solves,
            });
        }
    }
}

fn add_state<R: Real>(cy: &mut [R], cb: &mut [R], s: State, v: R) {
    match s {
        State::Theta(_) => {}
        State::Y(t) => cy[t] += v,
        State::Yb(t) => cb[t] += v,
    }
}

/// Profiled likelihood at fixed `(alpha, b, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodValue<R> {
    /// Maximized log-likelihood in nats; `None` stands for minus infinity.
    pub value: Option<R>,
    /// Maximizing `(yb, y0, yb0)`.
    pub profiled: Option<(R, R, R)>,
    /// Fitted aPTT path `y_0..=y_T`; empty when infeasible.
    pub y_path: Vec<R>,
}

impl<R: Real> LikelihoodValue<R> {
    pub fn value_or_neg_inf(&self) -> R {
        self.value.unwrap_or(R::neg_infinity())
    }
}

pub(crate) fn check_kinetics<R: Real>(alpha: R, b: R, k: R, d: &Domains<R>) -> Result<(), EstimationError> {
    if !d.contains_alpha(alpha) {
        return Err(EstimationError::InvalidInput(format!("alpha {alpha} is not in the declared set")));
    }
    if !(b >= d.b_range.0 && b <= d.b_range.1) {
        return Err(EstimationError::InvalidInput(format!("b {b} outside the declared range")));
    }
    if !(k >= d.k_range.0 && k <= d.k_range.1) {
        return Err(EstimationError::InvalidInput(format!("k {k} outside the declared range")));
    }
    Ok(())
}

/// Laplace log-likelihood maximized over `(y0, yb0, yb)` with `(alpha, b, k)` fixed.
pub fn log_likelihood_at<R: Real>(
    obs: &ObservationSeries<R>,
    alpha: R,
    b: R,
    k: R,
    cfg: &EstimationConfig<R>,
) -> Result<LikelihoodValue<R>, EstimationError> {
    obs.validate()?;
    cfg.gammas.validate()?;
    if obs.observations.is_empty() {
        return Err(EstimationError::InvalidInput("at least one reading is required".into()));
    }
    check_kinetics(alpha, b, k, &cfg.domains)?;
    let ev = Evaluator::new(obs, cfg, None);
    let x = ev.x_path(alpha, k);
    let fit = ev.fit_path(&x, b, false)?;
    Ok(match fit.value {
        None => LikelihoodValue {
            value: None,
            profiled: None,
            y_path: Vec::new(),
        },
        Some(v) => LikelihoodValue {
            value: Some(v),
            profiled: Some((fit.theta[2], fit.theta[0], fit.theta[1])),
            y_path: ev.y_path(&x, b, &fit.theta),
        },
    })
}
