//! Dosing policies as seen by the closed-loop harness.

use crate::dosing::{
    expand_order, naive_policy, plan_ptc_sgm, shift_plan, weight_based_policy, BleedRisk, PolicyKind, PolicySpec,
    ProtocolTable,
};
use crate::dynamics::label;
use crate::estimation::{scenario_table, EstimationConfig, ObservationSeries, ScenarioTable};

use super::SimError;

/// What a policy may read: the charted history and the chart metadata.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub obs: &'a ObservationSeries<f64>,
    pub weight_kg: f64,
    pub bleed_risk: BleedRisk,
}

/// A policy is called once per cycle: `predict` for estimation work, then
/// `control` for the doses of the next `hours` hours. The harness times the two
/// calls separately.
pub trait Policy: Send {
    fn name(&self) -> &str;
    fn predict(&mut self, input: &PolicyInput<'_>) -> Result<(), SimError>;
    fn control(&mut self, input: &PolicyInput<'_>, hours: usize) -> Result<Vec<f64>, SimError>;
}

/// Builds the policy described by `spec`.
pub fn build_policy(spec: &PolicySpec, est: &EstimationConfig<f64>) -> Result<Box<dyn Policy>, SimError> {
    spec.validate()?;
    Ok(match spec.kind {
        PolicyKind::PtcSg | PolicyKind::PtcMle => Box::new(PtcPolicy {
            spec: spec.clone(),
            est: est.clone(),
            table: None,
            last_plan: None,
        }),
        PolicyKind::Naive => Box::new(NaivePolicy {
            spec: spec.clone(),
            est: est.clone(),
            yb_hat: None,
        }),
        PolicyKind::WeightBased => Box::new(WeightPolicy {
            name: spec.name.clone(),
            table: spec.protocol.clone().unwrap_or_default(),
            u_max: est.domains.u_max,
            rate: None,
        }),
    })
}

fn estimate_table(spec: &PolicySpec, est: &EstimationConfig<f64>, obs: &ObservationSeries<f64>) -> Result<ScenarioTable<f64>, SimError> {
    Ok(scenario_table(obs, &spec.alphas, &spec.b_values, &spec.prior, est)?)
}

fn repeat_to(mut doses: Vec<f64>, hours: usize) -> Vec<f64> {
    let last = doses.last().copied().unwrap_or(0.0);
    doses.resize(hours, last);
    doses
}

struct PtcPolicy {
    spec: PolicySpec,
    est: EstimationConfig<f64>,
    table: Option<ScenarioTable<f64>>,
    last_plan: Option<Vec<f64>>,
}

impl Policy for PtcPolicy {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn predict(&mut self, input: &PolicyInput<'_>) -> Result<(), SimError> {
        let table = estimate_table(&self.spec, &self.est, input.obs)?;
        self.table = Some(match self.spec.kind {
            PolicyKind::PtcMle => ScenarioTable::singleton(table.map_params()),
            _ => table,
        });
        Ok(())
    }

    fn control(&mut self, input: &PolicyInput<'_>, hours: usize) -> Result<Vec<f64>, SimError> {
        let table = self.table.as_ref().ok_or_else(|| SimError::Policy("control before predict".into()))?;
        let warm = self.last_plan.as_ref().map(|p| shift_plan(p, hours, self.spec.planner.horizon));
        let plan = plan_ptc_sgm(
            table,
            &input.obs.doses,
            &self.spec.loss,
            &self.spec.planner,
            &self.est.gammas,
            &self.est.domains,
            warm.as_deref(),
        )?;
        self.last_plan = Some(plan.doses.clone());
        let mut doses = plan.doses;
        doses.truncate(hours);
        Ok(repeat_to(doses, hours))
    }
}

struct NaivePolicy {
    spec: PolicySpec,
    est: EstimationConfig<f64>,
    yb_hat: Option<f64>,
}

impl Policy for NaivePolicy {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn predict(&mut self, input: &PolicyInput<'_>) -> Result<(), SimError> {
        let table = estimate_table(&self.spec, &self.est, input.obs)?;
        self.yb_hat = Some(table.map_params().yb);
        Ok(())
    }

    fn control(&mut self, input: &PolicyInput<'_>, hours: usize) -> Result<Vec<f64>, SimError> {
        let yb = self.yb_hat.ok_or_else(|| SimError::Policy("control before predict".into()))?;
        let last = input.obs.doses.last().copied().unwrap_or(0.0);
        let Some(&(_, y)) = input.obs.observations.last() else {
            return Ok(vec![last; hours]);
        };
        let next = naive_policy(last, label(y, yb)?, self.est.domains.u_max)?;
        Ok(vec![next; hours])
    }
}

struct WeightPolicy {
    name: String,
    table: ProtocolTable,
    u_max: f64,
    rate: Option<f64>,
}

impl Policy for WeightPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&mut self, _input: &PolicyInput<'_>) -> Result<(), SimError> {
        Ok(())
    }

    fn control(&mut self, input: &PolicyInput<'_>, hours: usize) -> Result<Vec<f64>, SimError> {
        let latest = input.obs.observations.last().map(|&(_, y)| y);
        // Taking over a running infusion: start from the tier rate, no loading bolus.
        let current = match self.rate {
            Some(r) => r,
            None => {
                weight_based_policy(input.weight_kg, input.bleed_risk, None, None, &self.table, self.u_max)?.rate
            }
        };
        let order = weight_based_policy(input.weight_kg, input.bleed_risk, latest, Some(current), &self.table, self.u_max)?;
        self.rate = Some(order.rate);
        Ok(expand_order(&order, hours, self.u_max))
    }
}
