//! Closed-loop experiments on synthetic or charted patients.
//!
//! An episode replays the charted warm-start doses against the true model, then
//! hands control to a policy every `replan_interval` hours. Before each cycle a
//! fresh noisy reading is drawn; the policy sees only the charted history.
//! Metrics are scored against the true therapeutic band.

mod policy;
pub mod synth;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dosing::{DosingError, PolicySpec};
use crate::dynamics::{advance, initial_state, laplace_noise, DynamicsError, PatientState};
use crate::estimation::{estimate_noise_scale, EstimationConfig, EstimationError, ObservationSeries};

pub use policy::{build_policy, Policy, PolicyInput};
pub use synth::{synth_cohort, synthetic_domains, PatientTruth, SynthRanges};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error(transparent)]
    Dosing(#[from] DosingError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Where the policy's Laplace scale comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSource {
    /// Re-estimated from the readings every cycle.
    Estimated,
    /// The simulator's true scale (an oracle setting).
    True,
    Fixed { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub total_hours: usize,
    pub warmstart_hours: usize,
    pub replan_interval: usize,
    pub replicates: usize,
    pub seed: u64,
    pub noise_source: NoiseSource,
    /// Worker threads for episodes; 0 uses every core.
    pub workers: usize,
    /// Model, domains and estimator settings shared by every policy.
    pub estimation: EstimationConfig<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            total_hours: 240,
            warmstart_hours: 72,
            replan_interval: 6,
            replicates: 10,
            seed: 0,
            noise_source: NoiseSource::Estimated,
            workers: 0,
            estimation: EstimationConfig::with_domains(synthetic_domains(), Default::default(), 20),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.warmstart_hours >= self.total_hours {
            return bad("warm start must be shorter than the episode");
        }
        if self.replan_interval == 0 || (self.total_hours - self.warmstart_hours) % self.replan_interval != 0 {
            return bad("replan interval must divide the post-warm-start window");
        }
        if self.replicates == 0 {
            return bad("at least one replicate is required");
        }
        if let NoiseSource::Fixed { scale } = self.noise_source {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad("fixed noise scale must be positive");
            }
        }
        self.estimation.validate()?;
        Ok(())
    }

    pub fn cycles(&self) -> usize {
        (self.total_hours - self.warmstart_hours) / self.replan_interval
    }
}

/// Wall times of one planning cycle, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleTiming {
    /// Hours of history the policy saw.
    pub hour: usize,
    pub predict_s: f64,
    pub control_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeResult {
    pub patient_id: String,
    pub policy: String,
    pub replicate: usize,
    /// True states `0..=T` actually reached (shorter when the episode failed).
    pub states: Vec<PatientState<f64>>,
    pub doses: Vec<f64>,
    pub observations: Vec<(usize, f64)>,
    pub cycles: Vec<CycleTiming>,
    /// `None` when the episode failed.
    pub time_in_control: Option<f64>,
    pub deviation: Option<f64>,
    pub failure: Option<String>,
}

impl EpisodeResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Longest predict + control time of any cycle.
    pub fn max_cycle_s(&self) -> f64 {
        self.cycles.iter().map(|c| c.predict_s + c.control_s).fold(0.0, f64::max)
    }
}

/// Fraction of hours `from..y.len()` inside the closed band of `yb`, and the
/// mean distance to the nearer edge over the hours outside it (zero if none).
pub fn episode_metrics(y: &[f64], yb: f64, from: usize) -> (f64, f64) {
    let (lo, hi) = (1.5 * yb, 2.5 * yb);
    let mut inside = 0usize;
    let mut dev = 0.0;
    let mut outside = 0usize;
    for &v in &y[from..] {
        if v < lo {
            dev += lo - v;
            outside += 1;
        } else if v > hi {
            dev += v - hi;
            outside += 1;
        } else {
            inside += 1;
        }
    }
    let n = y.len() - from;
    let tic = inside as f64 / n as f64;
    (tic, if outside == 0 { 0.0 } else { dev / outside as f64 })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise seed of one (patient, replicate); shared by every policy so that
/// policies are compared on the same lab noise.
pub fn episode_seed(seed: u64, patient_id: &str, replicate: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h ^ splitmix(replicate as u64)))
}

/// Runs one closed-loop episode.
pub fn run_episode(
    truth: &PatientTruth,
    cfg: &SimulationConfig,
    policy: &mut dyn Policy,
    replicate: usize,
) -> Result<EpisodeResult, SimError> {
    cfg.validate()?;
    let w = cfg.warmstart_hours;
    if truth.record.doses.len() < w {
        return Err(SimError::Config(format!(
            "record of {} has {} hours, warm start needs {w}",
            truth.id,
            truth.record.doses.len()
        )));
    }
    let gammas = cfg.estimation.gammas;
    let domains = &cfg.estimation.domains;
    truth.params.validate(domains)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, &truth.id, replicate));

    let mut doses: Vec<f64> = truth.record.doses[..w].to_vec();
    let mut observations: Vec<(usize, f64)> =
        truth.record.observations.iter().copied().filter(|&(t, _)| t <= w).collect();
    let mut states = vec![initial_state(&truth.params)];
    for &u in &doses {
        domains.check_dose(u)?;
        let s = advance(states.last().unwrap(), u, &truth.params, &gammas, domains).state;
        states.push(s);
    }
    let mut cycles = Vec::with_capacity(cfg.cycles());
    let mut failure = None;
    let interval = cfg.replan_interval;

    for c in 0..cfg.cycles() {
        let t = w + c * interval;
        if observations.last().map_or(true, |&(s, _)| s < t) {
            let y = (states[t].y + laplace_noise(truth.noise_scale, &mut rng)).max(0.0);
            observations.push((t, y));
        }
        let noise_scale = match cfg.noise_source {
            NoiseSource::Estimated => estimate_noise_scale(&observations),
            NoiseSource::True => truth.noise_scale,
            NoiseSource::Fixed { scale } => scale,
        };
        let obs = ObservationSeries {
            doses: doses.clone(),
            observations: observations.clone(),
            noise_scale,
        };
        let input = PolicyInput {
            obs: &obs,
            weight_kg: truth.weight_kg,
            bleed_risk: truth.bleed_risk,
        };
        let t0 = Instant::now();
        let predicted = policy.predict(&input);
        let predict_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let planned = predicted.and_then(|_| policy.control(&input, interval));
        let control_s = t1.elapsed().as_secs_f64();
        cycles.push(CycleTiming {
            hour: t,
            predict_s,
            control_s,
        });
        let next = match planned {
            Ok(d) if d.len() == interval && d.iter().all(|&u| u >= 0.0 && u <= domains.u_max) => d,
            Ok(d) => {
                failure = Some(format!("cycle at hour {t}: policy returned an invalid dose block {d:?}"));
                break;
            }
            Err(e) => {
                failure = Some(format!("cycle at hour {t}: {e}"));
                break;
            }
        };
        for u in next {
            let s = advance(states.last().unwrap(), u, &truth.params, &gammas, domains).state;
            states.push(s);
            doses.push(u);
        }
    }
    let (time_in_control, deviation) = if failure.is_none() {
        let y: Vec<f64> = states.iter().map(|s| s.y).collect();
        let (tic, dev) = episode_metrics(&y, truth.params.yb, w + 1);
        (Some(tic), Some(dev))
    } else {
        (None, None)
    };
    Ok(EpisodeResult {
        patient_id: truth.id.clone(),
        policy: policy.name().to_string(),
        replicate,
        states,
        doses,
        observations,
        cycles,
        time_in_control,
        deviation,
        failure,
    })
}

/// One episode row of a cohort report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSummary {
    pub patient_id: String,
    pub policy: String,
    pub replicate: usize,
    pub time_in_control: Option<f64>,
    pub deviation: Option<f64>,
    pub mean_predict_s: f64,
    pub mean_control_s: f64,
    pub max_cycle_s: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySummary {
    pub policy: String,
    pub episodes: usize,
    pub failed: usize,
    /// Means over successful episodes.
    pub time_in_control: Option<f64>,
    pub deviation: Option<f64>,
    /// Means over every cycle of successful episodes.
    pub predict_time_s: Option<f64>,
    pub control_time_s: Option<f64>,
    pub max_cycle_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientSummary {
    pub patient_id: String,
    pub policy: String,
    pub time_in_control: Option<f64>,
    pub deviation: Option<f64>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortReport {
    pub config: SimulationConfig,
    pub policy_specs: Vec<PolicySpec>,
    pub policies: Vec<PolicySummary>,
    pub per_patient: Vec<PatientSummary>,
    pub episodes: Vec<EpisodeSummary>,
}

impl CohortReport {
    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == name)
    }
}

fn summarize(e: &EpisodeResult) -> EpisodeSummary {
    let n = e.cycles.len().max(1) as f64;
    EpisodeSummary {
        patient_id: e.patient_id.clone(),
        policy: e.policy.clone(),
        replicate: e.replicate,
        time_in_control: e.time_in_control,
        deviation: e.deviation,
        mean_predict_s: e.cycles.iter().map(|c| c.predict_s).sum::<f64>() / n,
        mean_control_s: e.cycles.iter().map(|c| c.control_s).sum::<f64>() / n,
        max_cycle_s: e.max_cycle_s(),
        failure: e.failure.clone(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Aggregates episode rows; the result depends only on the set of rows, not on
/// their order.
pub fn aggregate(
    config: &SimulationConfig,
    specs: &[PolicySpec],
    patients: &[String],
    mut episodes: Vec<EpisodeSummary>,
    cycle_times: &[(String, String, usize, Vec<CycleTiming>)],
) -> CohortReport {
    let pidx = |id: &str| patients.iter().position(|p| p == id).unwrap_or(usize::MAX);
    let sidx = |n: &str| specs.iter().position(|s| s.name == n).unwrap_or(usize::MAX);
    episodes.sort_by(|a, b| {
        (sidx(&a.policy), pidx(&a.patient_id), a.replicate).cmp(&(sidx(&b.policy), pidx(&b.patient_id), b.replicate))
    });
    let mut cycles: Vec<&(String, String, usize, Vec<CycleTiming>)> = cycle_times.iter().collect();
    cycles.sort_by(|a, b| (sidx(&a.1), pidx(&a.0), a.2).cmp(&(sidx(&b.1), pidx(&b.0), b.2)));
    let ok = |e: &&EpisodeSummary| e.failure.is_none();
    let mut policies = Vec::new();
    let mut per_patient = Vec::new();
    for spec in specs {
        let mine: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.policy == spec.name).collect();
        let good: Vec<&EpisodeSummary> = mine.iter().copied().filter(ok).collect();
        let good_cycles = || {
            cycles
                .iter()
                .filter(|c| c.1 == spec.name)
                .filter(|c| good.iter().any(|e| e.patient_id == c.0 && e.replicate == c.2))
                .flat_map(|c| c.3.iter())
        };
        policies.push(PolicySummary {
            policy: spec.name.clone(),
            episodes: mine.len(),
            failed: mine.len() - good.len(),
            time_in_control: mean(good.iter().filter_map(|e| e.time_in_control)),
            deviation: mean(good.iter().filter_map(|e| e.deviation)),
            predict_time_s: mean(good_cycles().map(|c| c.predict_s)),
            control_time_s: mean(good_cycles().map(|c| c.control_s)),
            max_cycle_time_s: mine.iter().map(|e| e.max_cycle_s).fold(0.0, f64::max),
        });
        for p in patients {
            let rows: Vec<&EpisodeSummary> = mine.iter().copied().filter(|e| &e.patient_id == p).collect();
            let good: Vec<&EpisodeSummary> = rows.iter().copied().filter(ok).collect();
            per_patient.push(PatientSummary {
                patient_id: p.clone(),
                policy: spec.name.clone(),
                time_in_control: mean(good.iter().filter_map(|e| e.time_in_control)),
                deviation: mean(good.iter().filter_map(|e| e.deviation)),
                failed: rows.len() - good.len(),
            });
        }
    }
    CohortReport {
        config: config.clone(),
        policy_specs: specs.to_vec(),
        policies,
        per_patient,
        episodes,
    }
}

/// Every patient under every policy for `config.replicates` replicates.
pub fn run_cohort(
    cohort: &[PatientTruth],
    specs: &[PolicySpec],
    config: &SimulationConfig,
) -> Result<CohortReport, SimError> {
    config.validate()?;
    if cohort.is_empty() || specs.is_empty() {
        return Err(SimError::Config("empty cohort or policy list".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut jobs = Vec::new();
    for (si, _) in specs.iter().enumerate() {
        for (pi, _) in cohort.iter().enumerate() {
            for r in 0..config.replicates {
                jobs.push((si, pi, r));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let results: Vec<Result<EpisodeResult, SimError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(si, pi, r)| {
                let mut policy = build_policy(&specs[si], &config.estimation)?;
                run_episode(&cohort[pi], config, policy.as_mut(), r)
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut cycles = Vec::with_capacity(results.len());
    for r in results {
        let e = r?;
        rows.push(summarize(&e));
        cycles.push((e.patient_id, e.policy, e.replicate, e.cycles));
    }
    let ids: Vec<String> = cohort.iter().map(|p| p.id.clone()).collect();
    Ok(aggregate(config, specs, &ids, rows, &cycles))
}

/// The policies compared on a synthetic cohort: `ptc-sg10` with the median
/// loss, `naive` and `weight-based`.
pub fn default_policies(ranges: &SynthRanges) -> Vec<PolicySpec> {
    use crate::dosing::{LossKind, LossSpec};
    let b = ranges.b_grid(5);
    vec![
        PolicySpec::ptc_sg(&ranges.alphas, &b, LossSpec::new(LossKind::MedianDeviation)),
        PolicySpec::naive(&ranges.alphas, &b),
        PolicySpec::weight_based(None),
    ]
}
