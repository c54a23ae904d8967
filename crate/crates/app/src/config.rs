//! Service and CLI configuration, read from a JSON file.

use std::path::{Path, PathBuf};

use heparin_core::dosing::{LossKind, LossSpec, PlannerConfig, PolicySpec};
use heparin_core::estimation::{EstimationConfig, PriorSpec};
use heparin_core::simulator::{SimulationConfig, SynthRanges};
use serde::{Deserialize, Serialize};

use crate::error::AppError;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "HEPARIN_CONFIG";

/// Every field is optional in the file; missing ones take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Synthetic world; its `alphas` and `b_range` also define the scenario grids.
    pub ranges: SynthRanges,
    /// Closed-loop settings; `simulation.estimation` is the model used everywhere.
    pub simulation: SimulationConfig,
    pub prior: PriorSpec<f64>,
    pub loss: LossSpec<f64>,
    pub planner: PlannerConfig<f64>,
    /// Readings needed before the service recommends doses.
    pub min_observations: usize,
    /// Wall-clock limit for one recommendation, seconds.
    pub plan_budget_s: f64,
    /// Directory of session event logs; sessions live in memory only when unset.
    pub log_dir: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            ranges: SynthRanges::default(),
            simulation: SimulationConfig::default(),
            prior: PriorSpec::tied(),
            loss: LossSpec::new(LossKind::MedianDeviation),
            planner: PlannerConfig::default(),
            min_observations: 3,
            plan_budget_s: 60.0,
            log_dir: None,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The file given on the command line, else the one named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, AppError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), AppError> {
        self.simulation.validate()?;
        self.loss.validate()?;
        self.planner.validate()?;
        self.prior.validate(&self.estimation().domains)?;
        if self.ranges.alphas.is_empty() {
            return Err(AppError::Config("ranges.alphas is empty".into()));
        }
        if !(self.plan_budget_s >= 0.0 && self.plan_budget_s.is_finite()) {
            return Err(AppError::Config("plan_budget_s must be a finite nonnegative number".into()));
        }
        Ok(())
    }

    pub fn estimation(&self) -> &EstimationConfig<f64> {
        &self.simulation.estimation
    }

    /// Policy by CLI name, with this config's prior and planner.
    pub fn policy(&self, name: &str, loss: Option<LossKind>) -> Result<PolicySpec, AppError> {
        let loss = loss.map(LossSpec::new).unwrap_or(self.loss);
        let a = &self.ranges.alphas;
        let spec = match name {
            "ptc-sg10" => PolicySpec::ptc_sg(a, &self.ranges.b_grid(5), loss),
            "ptc-sg20" => PolicySpec::ptc_sg(a, &self.ranges.b_grid(10), loss),
            "ptc-mle" => PolicySpec::ptc_mle(a, &self.ranges.b_grid(5), loss),
            "naive" => PolicySpec::naive(a, &self.ranges.b_grid(5)),
            "weight" | "weight-based" => PolicySpec::weight_based(None),
            other => {
                return Err(AppError::Usage(format!(
                    "unknown policy '{other}' (ptc-sg10, ptc-sg20, ptc-mle, naive, weight)"
                )))
            }
        };
        let spec = PolicySpec {
            prior: self.prior,
            planner: self.planner,
            ..spec
        };
        spec.validate()?;
        Ok(spec)
    }
}
