//! Receding-horizon dose planning and the baseline policies it is compared with.

mod baseline;
mod planner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::estimation::{EstimationError, PriorSpec};
use crate::real::Real;

pub use baseline::{
    expand_order, naive_policy, weight_based_policy, BleedRisk, ProtocolTable, RiskTier, TitrationRow,
    WeightBasedOrder, NAIVE_STEP, PROTOCOL_SCHEMA,
};
pub use planner::{dose_levels, evaluate_plan, plan_ptc_mle, plan_ptc_sgm, scenario_loss, shift_plan, PlannerConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DosingError {
    #[error("invalid planning input: {0}")]
    InvalidInput(String),
    #[error("planning failed: {0}")]
    PlanningFailed(String),
    #[error("protocol table: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// One per hour outside the band.
    Indicator,
    /// Distance to the nearer band edge, zero inside.
    BandDeviation,
    /// `|y - 2 yb|`.
    MedianDeviation,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Indicator => "indicator",
            LossKind::BandDeviation => "band_deviation",
            LossKind::MedianDeviation => "median_deviation",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "indicator" => Ok(LossKind::Indicator),
            "band_deviation" | "band" => Ok(LossKind::BandDeviation),
            "median_deviation" | "median" => Ok(LossKind::MedianDeviation),
            other => Err(format!("unknown loss '{other}'")),
        }
    }
}

/// Per-hour loss with separate weights below and above the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "R: Real + Deserialize<'de>"))]
pub struct LossSpec<R> {
    pub kind: LossKind,
    #[serde(default = "one")]
    pub w_sub: R,
    #[serde(default = "one")]
    pub w_super: R,
}

fn one<R: Real>() -> R {
    R::one()
}

impl<R: Real> LossSpec<R> {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            w_sub: R::one(),
            w_super: R::one(),
        }
    }

    pub fn validate(&self) -> Result<(), DosingError> {
        for (n, w) in [("w_sub", self.w_sub), ("w_super", self.w_super)] {
            if !(w >= R::zero() && w.is_finite()) {
                return Err(DosingError::InvalidInput(format!("{n} must be a nonnegative number")));
            }
        }
        Ok(())
    }

    /// Loss of one hour at aPTT `y` for a patient with homeostasis `yb`.
    #[inline]
    pub fn hour(&self, y: R, yb: R) -> R {
        let lo = R::lit(1.5) * yb;
        let hi = R::lit(2.5) * yb;
        match self.kind {
            LossKind::Indicator => {
                if y < lo {
                    self.w_sub
                } else if y > hi {
                    self.w_super
                } else {
                    R::zero()
                }
            }
            LossKind::BandDeviation => {
                if y < lo {
                    self.w_sub * (lo - y)
                } else if y > hi {
                    self.w_super * (y - hi)
                } else {
                    R::zero()
                }
            }
            LossKind::MedianDeviation => {
                let mid = R::lit(2.0) * yb;
                if y < mid {
                    self.w_sub * (mid - y)
                } else {
                    self.w_super * (y - mid)
                }
            }
        }
    }
}

/// Loss of a plan under one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioLoss<R> {
    pub alpha: R,
    pub b: R,
    pub weight: R,
    pub loss: R,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DosePlan<R> {
    /// Hours of history the plan was made on; the plan covers `T + 1 ..= T + n`.
    pub planning_time: usize,
    pub horizon: usize,
    pub doses: Vec<R>,
    /// Weighted average of `scenario_losses`.
    pub expected_loss: R,
    pub scenario_losses: Vec<ScenarioLoss<R>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Exhaustive enumeration; `n <= 4` and at most 8 dose levels.
    ExactSmall,
    /// Coordinate descent over the dose mesh from zero, one step, the shifted
    /// previous plan and every constant level.
    MeshSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    PtcSg,
    PtcMle,
    Naive,
    WeightBased,
}

/// Everything needed to instantiate one dosing policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    /// Report name, e.g. `ptc-sg10`.
    pub name: String,
    pub kind: PolicyKind,
    /// Scenario grid for `ptc_sg`; estimation grid for `ptc_mle` and `naive`.
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub b_values: Vec<f64>,
    pub loss: LossSpec<f64>,
    pub planner: PlannerConfig<f64>,
    /// Prior for the scenario weights and the MAP fit.
    #[serde(default = "PriorSpec::tied")]
    pub prior: PriorSpec<f64>,
    /// Used by `weight_based`; the shipped default table when absent.
    #[serde(default)]
    pub protocol: Option<ProtocolTable>,
}

impl PolicySpec {
    /// Scenario-grid planner over `alphas x b_values`, named `ptc-sg{m}`.
    pub fn ptc_sg(alphas: &[f64], b_values: &[f64], loss: LossSpec<f64>) -> Self {
        Self {
            name: format!("ptc-sg{}", alphas.len() * b_values.len()),
            kind: PolicyKind::PtcSg,
            alphas: alphas.to_vec(),
            b_values: b_values.to_vec(),
            loss,
            planner: PlannerConfig::default(),
            prior: PriorSpec::tied(),
            protocol: None,
        }
    }

    /// Plans against the MAP estimate over `alphas x b_values`.
    pub fn ptc_mle(alphas: &[f64], b_values: &[f64], loss: LossSpec<f64>) -> Self {
        Self {
            name: "ptc-mle".into(),
            kind: PolicyKind::PtcMle,
            ..Self::ptc_sg(alphas, b_values, loss)
        }
    }

    /// Step policy; the grid is only used to estimate `yb`.
    pub fn naive(alphas: &[f64], b_values: &[f64]) -> Self {
        Self {
            name: "naive".into(),
            kind: PolicyKind::Naive,
            ..Self::ptc_sg(alphas, b_values, LossSpec::new(LossKind::MedianDeviation))
        }
    }

    pub fn weight_based(protocol: Option<ProtocolTable>) -> Self {
        Self {
            name: "weight-based".into(),
            kind: PolicyKind::WeightBased,
            protocol,
            ..Self::ptc_sg(&[], &[], LossSpec::new(LossKind::MedianDeviation))
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn validate(&self) -> Result<(), DosingError> {
        self.loss.validate()?;
        self.planner.validate()?;
        if let Some(s) = self.prior.initial_tie {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DosingError::InvalidInput("initial tie needs a positive scale".into()));
            }
        }
        match self.kind {
            PolicyKind::PtcSg | PolicyKind::PtcMle | PolicyKind::Naive => {
                if self.alphas.is_empty() || self.b_values.is_empty() {
                    return Err(DosingError::InvalidInput(format!(
                        "policy '{}' needs a nonempty scenario grid",
                        self.name
                    )));
                }
            }
            PolicyKind::WeightBased => {
                if let Some(t) = &self.protocol {
                    t.validate()?;
                }
            }
        }
        Ok(())
    }
}
