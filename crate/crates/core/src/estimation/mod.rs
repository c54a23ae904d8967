//! Parameter estimation from sparse aPTT readings.
//!
//! With `(alpha, k, b)` fixed the heparin path is determined, and the aPTT path
//! is affine in `theta = (y0, yb0, yb)`. Each likelihood evaluation therefore
//! reduces to an L1 fit over three numbers with box constraints on every state,
//! solved as a small LP. The outer searches (grid, Benders, scenario profiling)
//! work over `(alpha, b, k)`.

mod benders;
mod grid;
mod noise;
mod posterior;
pub mod reformulation;
mod response;
mod subproblem;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Domains, DynamicsError, GlobalDecayRates, PatientParams};
use crate::lp::{LpError, Tolerances};
use crate::real::Real;

pub use benders::{benders_solve, BendersOutcome, BoundTrace};
pub use grid::{k_mesh, mle_estimate, mle_grid, refine_mesh, EstimationGrid, Method};
pub use noise::{estimate_noise_scale, NOISE_FLOOR};
pub use posterior::{log_posterior_at, map_estimate, scaled_posterior, scenario_table, ScenarioEntry, ScenarioTable};
pub use subproblem::{log_likelihood_at, profile_gap_max, LikelihoodValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("invalid estimation input: {0}")]
    InvalidInput(String),
    #[error("estimation failed: {0}")]
    Failed(String),
    #[error("Benders loop exceeded {iterations} iterations (gap {gap})")]
    IterationLimit { iterations: usize, gap: f64 },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Hourly dose history plus the aPTT readings taken so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSeries<R> {
    /// `doses[t - 1]` is the amount given during hour `t`; its length is the horizon `T`.
    pub doses: Vec<R>,
    /// `(t, reading)` with `1 <= t <= T`, strictly increasing in `t`.
    pub observations: Vec<(usize, R)>,
    /// Laplace scale of the measurement noise, seconds.
    pub noise_scale: R,
}

impl<R: Real> ObservationSeries<R> {
    pub fn new(doses: Vec<R>, observations: Vec<(usize, R)>, noise_scale: R) -> Result<Self, EstimationError> {
        let s = Self {
            doses,
            observations,
            noise_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn horizon(&self) -> usize {
        self.doses.len()
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        let bad = |m: String| Err(EstimationError::InvalidInput(m));
        if !(self.noise_scale > R::zero() && self.noise_scale.is_finite()) {
            return bad(format!("noise scale must be positive, got {}", self.noise_scale));
        }
        for (i, &u) in self.doses.iter().enumerate() {
            if !(u >= R::zero() && u.is_finite()) {
                return bad(format!("dose at hour {} is {u}", i + 1));
            }
        }
        let mut last = 0usize;
        for &(t, y) in &self.observations {
            if t == 0 || t > self.horizon() {
                return bad(format!("observation time {t} outside 1..={}", self.horizon()));
            }
            if t <= last {
                return bad(format!("observation times must increase (t = {t})"));
            }
            if !(y >= R::zero() && y.is_finite()) {
                return bad(format!("reading at t = {t} is {y}"));
            }
            last = t;
        }
        Ok(())
    }

    /// Fewer than three readings.
    pub fn low_information(&self) -> bool {
        self.observations.len() < 3
    }

    /// The series cut at hour `t` (doses and readings up to `t`).
    pub fn truncated(&self, t: usize) -> Self {
        let t = t.min(self.horizon());
        Self {
            doses: self.doses[..t].to_vec(),
            observations: self.observations.iter().copied().filter(|&(s, _)| s <= t).collect(),
            noise_scale: self.noise_scale,
        }
    }
}

/// One factor of the product prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentPrior<R> {
    /// Uniform over the declared domain of the component.
    #[default]
    Domain,
    Uniform { lo: R, hi: R },
    Laplace { center: R, scale: R },
}

/// Independent log-concave priors; `alpha` is always uniform over its declared set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec<R> {
    #[serde(default)]
    pub k: ComponentPrior<R>,
    #[serde(default)]
    pub b: ComponentPrior<R>,
    #[serde(default)]
    pub y0: ComponentPrior<R>,
    #[serde(default)]
    pub yb0: ComponentPrior<R>,
    #[serde(default)]
    pub yb: ComponentPrior<R>,
    /// Laplace scale tying `y0` and `yb0` to `yb`: before any heparin the aPTT
    /// sits near homeostasis.
    #[serde(default)]
    pub initial_tie: Option<R>,
}

impl<R: Real> ComponentPrior<R> {
    pub fn validate(&self, name: &str, domain: (R, R)) -> Result<(), EstimationError> {
        match *self {
            Self::Domain => Ok(()),
            Self::Uniform { lo, hi } => {
                if lo < hi && lo >= domain.0 && hi <= domain.1 {
                    Ok(())
                } else {
                    Err(EstimationError::InvalidInput(format!(
                        "{name} prior support [{lo}, {hi}] must be a nonempty subset of [{}, {}]",
                        domain.0, domain.1
                    )))
                }
            }
            Self::Laplace { center, scale } => {
                if scale > R::zero() && center.is_finite() {
                    Ok(())
                } else {
                    Err(EstimationError::InvalidInput(format!("{name} prior needs a positive scale")))
                }
            }
        }
    }

    /// Support intersected with `domain`.
    pub fn support(&self, domain: (R, R)) -> (R, R) {
        match *self {
            Self::Uniform { lo, hi } => (lo.max(domain.0), hi.min(domain.1)),
            _ => domain,
        }
    }

    /// Log density; `-inf` outside the support.
    pub fn log_density(&self, v: R, domain: (R, R)) -> R {
        let (lo, hi) = self.support(domain);
        if !(v >= lo && v <= hi) {
            return R::neg_infinity();
        }
        match *self {
            Self::Domain | Self::Uniform { .. } => -(hi - lo).ln(),
            Self::Laplace { center, scale } => -(v - center).abs() / scale - (R::lit(2.0) * scale).ln(),
        }
    }
}

impl<R: Real> PriorSpec<R> {
    pub fn validate(&self, domains: &Domains<R>) -> Result<(), EstimationError> {
        let y = (R::zero(), domains.y_max);
        self.k.validate("k", domains.k_range)?;
        self.b.validate("b", domains.b_range)?;
        self.y0.validate("y0", y)?;
        self.yb0.validate("yb0", y)?;
        self.yb.validate("yb", y)?;
        match self.initial_tie {
            Some(s) if !(s > R::zero() && s.is_finite()) => {
                Err(EstimationError::InvalidInput("initial tie needs a positive scale".into()))
            }
            _ => Ok(()),
        }
    }

    /// Prior used by the closed-loop policies: domain-uniform components with
    /// the initial states tied to `yb` at a 5 s scale.
    pub fn tied() -> Self {
        Self {
            initial_tie: Some(R::lit(5.0)),
            ..Self::default()
        }
    }

    pub fn theta(&self) -> [ComponentPrior<R>; 3] {
        [self.y0, self.yb0, self.yb]
    }

    /// Log prior of `(alpha, b, k)`; the alpha factor is `-ln |alpha set|`.
    pub fn log_kinetic(&self, b: R, k: R, domains: &Domains<R>) -> R {
        let m = R::from_usize(domains.alpha_set.len()).unwrap_or(R::one());
        -m.ln() + self.b.log_density(b, domains.b_range) + self.k.log_density(k, domains.k_range)
    }

    /// Log prior of the full parameter vector.
    pub fn log_density(&self, p: &PatientParams<R>, domains: &Domains<R>) -> R {
        let y = (R::zero(), domains.y_max);
        self.log_kinetic(p.b, p.k, domains)
            + self.y0.log_density(p.y0, y)
            + self.yb0.log_density(p.yb0, y)
            + self.yb.log_density(p.yb, y)
            + self.initial_tie.map_or(R::zero(), |s| {
                -((p.y0 - p.yb).abs() + (p.yb0 - p.yb).abs()) / s - R::lit(2.0) * (R::lit(2.0) * s).ln()
            })
    }
}

/// Shared settings for every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(serialize = "R: Real + Serialize", deserialize = "R: Real + Deserialize<'de>")
)]
pub struct EstimationConfig<R> {
    pub gammas: GlobalDecayRates<R>,
    pub domains: Domains<R>,
    /// Candidate response coefficients.
    pub b_mesh: Vec<R>,
    /// Points in the geometric elimination-rate mesh over `domains.k_range`.
    pub k_mesh_points: usize,
    /// Subdivisions per mesh interval in the refinement pass.
    pub k_refine: usize,
    /// Benders stopping tolerance, nats.
    pub epsilon: R,
    pub max_benders_iterations: usize,
    #[serde(skip, default = "Tolerances::default")]
    pub lp: Tolerances<R>,
}

impl<R: Real> EstimationConfig<R> {
    /// Defaults with `n_b` geometric points over the declared response range.
    pub fn with_domains(domains: Domains<R>, gammas: GlobalDecayRates<R>, n_b: usize) -> Self {
        let b_mesh = geometric(domains.b_range.0, domains.b_range.1, n_b.max(1));
        Self {
            gammas,
            domains,
            b_mesh,
            k_mesh_points: 64,
            k_refine: 10,
            epsilon: R::lit(1e-3),
            max_benders_iterations: 10_000,
            lp: Tolerances::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        self.gammas.validate()?;
        self.domains.validate()?;
        if self.b_mesh.is_empty() || self.k_mesh_points == 0 {
            return Err(EstimationError::InvalidInput("empty search mesh".into()));
        }
        let (lo, hi) = self.domains.b_range;
        if let Some(b) = self.b_mesh.iter().find(|&&b| !(b >= lo && b <= hi)) {
            return Err(EstimationError::InvalidInput(format!("b mesh value {b} outside [{lo}, {hi}]")));
        }
        if !(self.epsilon > R::zero()) {
            return Err(EstimationError::InvalidInput("epsilon must be positive".into()));
        }
        Ok(())
    }
}

impl<R: Real> Default for EstimationConfig<R> {
    fn default() -> Self {
        Self::with_domains(Domains::default(), GlobalDecayRates::default(), 20)
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn geometric<R: Real>(lo: R, hi: R, n: usize) -> Vec<R> {
    if n <= 1 || lo == hi {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / R::from_usize(n - 1).unwrap();
    let mut v: Vec<R> = (0..n).map(|i| (a + step * R::from_usize(i).unwrap()).exp()).collect();
    v[0] = lo;
    v[n - 1] = hi;
    v
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linear<R: Real>(lo: R, hi: R, n: usize) -> Vec<R> {
    if n <= 1 || lo == hi {
        return vec![lo];
    }
    let step = (hi - lo) / R::from_usize(n - 1).unwrap();
    let mut v: Vec<R> = (0..n).map(|i| lo + step * R::from_usize(i).unwrap()).collect();
    v[n - 1] = hi;
    v
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationDiagnostics {
    pub lp_solves: usize,
    pub optimality_cuts: usize,
    pub feasibility_cuts: usize,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub low_information: bool,
}

impl EstimationDiagnostics {
    pub(crate) fn absorb(&mut self, other: &Self) {
        self.lp_solves += other.lp_solves;
        self.optimality_cuts += other.optimality_cuts;
        self.feasibility_cuts += other.feasibility_cuts;
        self.iterations += other.iterations;
    }
}

/// Point estimate with its fit values.
///
/// `log_likelihood` includes the Laplace normalizing terms `-ln(2 s)` per reading,
/// so a perfect fit scores `-|n| ln(2 s)`. `log_posterior` adds the log prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateResult<R> {
    pub params: PatientParams<R>,
    pub log_likelihood: R,
    pub log_posterior: R,
    pub diagnostics: EstimationDiagnostics,
}
