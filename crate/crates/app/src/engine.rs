//! The computations behind both the CLI and the service. Keeping one code path
//! is what lets `heparin dose` replay a served recommendation exactly.

use heparin_core::dosing::{evaluate_plan, plan_ptc_sgm, BleedRisk, DosePlan, LossSpec, PolicyKind, PolicySpec};
use heparin_core::dynamics::{simulate, therapeutic_range};
use heparin_core::estimation::{
    map_estimate, mle_estimate, scenario_table, EstimateResult, Method, ObservationSeries, PriorSpec, ScenarioTable,
};
use heparin_core::io::ChartRecord;
use heparin_core::simulator::{build_policy, PolicyInput};
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::AppError;

/// MAP estimate when a prior is given, maximum likelihood otherwise.
pub fn estimate(
    chart: &ChartRecord,
    method: Method,
    prior: Option<&PriorSpec<f64>>,
    cfg: &AppConfig,
) -> Result<EstimateResult<f64>, AppError> {
    let obs = chart.to_series(None);
    Ok(match prior {
        Some(p) => map_estimate(&obs, p, cfg.estimation())?,
        None => mle_estimate(&obs, method, cfg.estimation())?,
    })
}

/// Scenario grid a policy is scored on; policies without one borrow `ptc-sg10`'s.
fn grid(spec: &PolicySpec, cfg: &AppConfig) -> Result<(Vec<f64>, Vec<f64>), AppError> {
    if spec.alphas.is_empty() || spec.b_values.is_empty() {
        let d = cfg.policy("ptc-sg10", None)?;
        Ok((d.alphas, d.b_values))
    } else {
        Ok((spec.alphas.clone(), spec.b_values.clone()))
    }
}

/// Posterior weights over the policy's scenario grid.
pub fn scenarios(obs: &ObservationSeries<f64>, spec: &PolicySpec, cfg: &AppConfig) -> Result<ScenarioTable<f64>, AppError> {
    let (a, b) = grid(spec, cfg)?;
    Ok(scenario_table(obs, &a, &b, &spec.prior, cfg.estimation())?)
}

/// Next `spec.planner.horizon` doses, scored against `table`.
pub fn plan(
    chart: &ChartRecord,
    obs: &ObservationSeries<f64>,
    table: &ScenarioTable<f64>,
    spec: &PolicySpec,
    cfg: &AppConfig,
) -> Result<DosePlan<f64>, AppError> {
    let est = cfg.estimation();
    let (g, d) = (&est.gammas, &est.domains);
    match spec.kind {
        PolicyKind::PtcSg => Ok(plan_ptc_sgm(table, &obs.doses, &spec.loss, &spec.planner, g, d, None)?),
        PolicyKind::PtcMle => {
            let single = ScenarioTable::singleton(table.map_params());
            let p = plan_ptc_sgm(&single, &obs.doses, &spec.loss, &spec.planner, g, d, None)?;
            Ok(evaluate_plan(table, &obs.doses, &p.doses, &spec.loss, g, d)?)
        }
        PolicyKind::Naive | PolicyKind::WeightBased => {
            let weight_kg = match (spec.kind, chart.weight_kg) {
                (PolicyKind::WeightBased, None) => {
                    return Err(AppError::Usage("the weight-based policy needs '# weight_kg:' in the chart".into()))
                }
                (_, w) => w.unwrap_or(0.0),
            };
            let input = PolicyInput {
                obs,
                weight_kg,
                bleed_risk: chart.bleed_risk.unwrap_or(BleedRisk::Low),
            };
            let mut policy = build_policy(spec, est)?;
            policy.predict(&input)?;
            let doses = policy.control(&input, spec.planner.horizon)?;
            Ok(evaluate_plan(table, &obs.doses, &doses, &spec.loss, g, d)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub policy: String,
    pub noise_scale: f64,
    pub low_information: bool,
    pub table: ScenarioTable<f64>,
    pub plan: DosePlan<f64>,
}

pub fn recommend(chart: &ChartRecord, spec: &PolicySpec, cfg: &AppConfig) -> Result<Recommendation, AppError> {
    let obs = chart.to_series(None);
    let table = scenarios(&obs, spec, cfg)?;
    let plan = plan(chart, &obs, &table, spec, cfg)?;
    Ok(Recommendation {
        policy: spec.name.clone(),
        noise_scale: obs.noise_scale,
        low_information: obs.low_information(),
        table,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPath {
    pub alpha: f64,
    pub b: f64,
    pub weight: f64,
    /// Predicted aPTT at the end of each hour in [`Rollout::hours`].
    pub aptt: Vec<f64>,
    pub loss: f64,
}

/// Predicted aPTT under a fixed dose sequence, per scenario and weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Chart hours covered by the candidate doses.
    pub hours: Vec<usize>,
    pub doses: Vec<f64>,
    pub scenarios: Vec<ScenarioPath>,
    /// Weighted mean over scenarios with positive weight.
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Band of the highest-weight scenario.
    pub therapeutic_range: (f64, f64),
    pub expected_loss: f64,
}

pub fn rollout(
    table: &ScenarioTable<f64>,
    past_doses: &[f64],
    doses: &[f64],
    loss: &LossSpec<f64>,
    cfg: &AppConfig,
) -> Result<Rollout, AppError> {
    let est = cfg.estimation();
    let scored = evaluate_plan(table, past_doses, doses, loss, &est.gammas, &est.domains)?;
    let t0 = past_doses.len();
    let n = doses.len();
    let all: Vec<f64> = past_doses.iter().chain(doses).copied().collect();
    let mut paths = Vec::new();
    let (mut mean, mut lower, mut upper) = (vec![0.0; n], vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]);
    let mut total = 0.0;
    for (e, s) in table.scenarios.iter().filter(|e| e.params.is_some()).zip(&scored.scenario_losses) {
        let p = e.params.unwrap();
        let y = simulate(&p, &est.gammas, &all, &est.domains)?.y()[t0 + 1..].to_vec();
        if e.weight > 0.0 {
            total += e.weight;
            for i in 0..n {
                mean[i] += e.weight * y[i];
                lower[i] = lower[i].min(y[i]);
                upper[i] = upper[i].max(y[i]);
            }
        }
        paths.push(ScenarioPath {
            alpha: e.alpha,
            b: e.b,
            weight: e.weight,
            aptt: y,
            loss: s.loss,
        });
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let yb = table.map_params().yb;
    let therapeutic_range = therapeutic_range(yb)?;
    Ok(Rollout {
        hours: (t0..t0 + n).collect(),
        doses: doses.to_vec(),
        scenarios: paths,
        mean,
        lower,
        upper,
        therapeutic_range,
        expected_loss: scored.expected_loss,
    })
}
