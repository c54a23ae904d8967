//! Synthetic patients and clinician-style dosing records.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dosing::BleedRisk;
use crate::dynamics::{advance, initial_state, laplace_noise, Domains, GlobalDecayRates, PatientParams, PatientState};
use crate::estimation::ObservationSeries;

/// Sampling ranges for synthetic patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRanges {
    pub alphas: Vec<f64>,
    /// Log-uniform.
    pub b_range: (f64, f64),
    pub k_range: (f64, f64),
    pub yb_range: (f64, f64),
    /// Laplace scale of the lab noise, seconds.
    pub noise_range: (f64, f64),
    pub weight_range: (f64, f64),
    /// Hours between lab draws, inclusive.
    pub obs_spacing: (usize, usize),
    pub missing_rate: f64,
    /// Length of the generated record, hours.
    pub record_hours: usize,
    /// Patients with `yb` above this are high bleeding risk.
    pub high_risk_yb: f64,
    /// Chart a baseline aPTT at hour 1 and start heparin after it.
    pub baseline_draw: bool,
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 0.707],
            b_range: (0.001, 0.004),
            k_range: (800.0, 2500.0),
            yb_range: (25.0, 40.0),
            noise_range: (2.0, 5.0),
            weight_range: (55.0, 110.0),
            obs_spacing: (4, 6),
            missing_rate: 0.1,
            record_hours: 72,
            high_risk_yb: 32.5,
            baseline_draw: true,
        }
    }
}

impl SynthRanges {
    /// `m` evenly spaced response values across `b_range`, the scenario grid
    /// used by the `ptc-sg` policies on synthetic cohorts.
    pub fn b_grid(&self, m: usize) -> Vec<f64> {
        crate::estimation::linear(self.b_range.0, self.b_range.1, m)
    }
}

/// Parameter and state domains of the synthetic world.
///
/// Doses are in IU, so the response coefficient and elimination capacity live
/// on a different scale from the defaults; heparin and aPTT ceilings are raised
/// so that overdosing shows up as high aPTT rather than as clamping.
pub fn synthetic_domains() -> Domains<f64> {
    Domains {
        b_range: (0.0005, 0.008),
        k_range: (200.0, 5000.0),
        y_max: 300.0,
        x_max: 50_000.0,
        ..Domains::default()
    }
}

/// One synthetic patient: hidden truth plus what a clinician would have charted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientTruth {
    pub id: String,
    pub params: PatientParams<f64>,
    pub noise_scale: f64,
    pub weight_kg: f64,
    pub bleed_risk: BleedRisk,
    /// Charted record; its `noise_scale` is the value estimated from the readings.
    pub record: ObservationSeries<f64>,
}

fn uniform<G: Rng>(rng: &mut G, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws hidden parameters for one patient.
pub fn sample_params<G: Rng>(ranges: &SynthRanges, rng: &mut G) -> PatientParams<f64> {
    let alpha = ranges.alphas[rng.gen_range(0..ranges.alphas.len())];
    let b = uniform(rng, (ranges.b_range.0.ln(), ranges.b_range.1.ln())).exp();
    let k = uniform(rng, ranges.k_range);
    let yb = uniform(rng, ranges.yb_range);
    PatientParams {
        alpha,
        k,
        b,
        y0: yb * rng.gen_range(0.9..1.1),
        yb0: yb * rng.gen_range(0.95..1.05),
        yb,
    }
}

/// Clinician-style titration: an 80 IU/kg bolus and 15 IU/kg/h, then every six
/// hours the rate moves according to a noisy reading of the true aPTT against
/// the band, scaled by a random factor. The first `delay` hours get no heparin.
/// Returns the hourly doses.
#[allow(clippy::too_many_arguments)]
pub fn titration_doses<G: Rng>(
    params: &PatientParams<f64>,
    weight_kg: f64,
    noise_scale: f64,
    hours: usize,
    delay: usize,
    gammas: &GlobalDecayRates<f64>,
    domains: &Domains<f64>,
    rng: &mut G,
) -> Vec<f64> {
    let u_max = domains.u_max;
    let mut rate = (15.0 * weight_kg).min(u_max);
    let mut bolus = 80.0 * weight_kg;
    let mut state: PatientState<f64> = initial_state(params);
    let mut doses = Vec::with_capacity(hours);
    let (lo, hi) = (1.5 * params.yb, 2.5 * params.yb);
    for h in 0..hours {
        if h < delay {
            doses.push(0.0);
            state = advance(&state, 0.0, params, gammas, domains).state;
            continue;
        }
        let h = h - delay;
        if h > 0 && h % 6 == 0 {
            let seen = state.y + laplace_noise(noise_scale, rng);
            let step = 2.0 * weight_kg * rng.gen_range(0.5..1.5);
            if seen < lo {
                rate += step;
                bolus += 40.0 * weight_kg * rng.gen_range(0.0..1.0);
            } else if seen > hi {
                rate -= 1.5 * step;
            } else {
                rate *= rng.gen_range(0.9..1.1);
            }
            rate = rate.clamp(0.0, u_max);
        }
        let hourly = (rate * rng.gen_range(0.85..1.15)).min(u_max);
        let extra = bolus.min(u_max - hourly).max(0.0);
        bolus -= extra;
        let u = hourly + extra;
        doses.push(u);
        state = advance(&state, u, params, gammas, domains).state;
    }
    doses
}

/// Lab draw hours `1..=hours` at the configured spacing, with draws missing at
/// `missing_rate`. A baseline draw at hour 1 is never missing.
pub fn draw_times<G: Rng>(
    hours: usize,
    spacing: (usize, usize),
    missing_rate: f64,
    baseline: bool,
    rng: &mut G,
) -> Vec<usize> {
    let (lo, hi) = (spacing.0.max(1), spacing.1.max(spacing.0.max(1)));
    let mut out = Vec::new();
    let mut t = if baseline && hours >= 1 {
        out.push(1);
        1 + rng.gen_range(lo..=hi)
    } else {
        rng.gen_range(1..=hi)
    };
    while t <= hours {
        if rng.gen::<f64>() >= missing_rate {
            out.push(t);
        }
        t += rng.gen_range(lo..=hi);
    }
    out
}

/// Noisy readings of the true aPTT at `times`, floored at zero.
pub fn noisy_readings<G: Rng>(y: &[f64], times: &[usize], noise_scale: f64, rng: &mut G) -> Vec<(usize, f64)> {
    times
        .iter()
        .map(|&t| (t, (y[t] + laplace_noise(noise_scale, rng)).max(0.0)))
        .collect()
}

/// Full titration record of `hours` hours for a given patient; with `baseline`
/// the first hour is heparin-free and charted.
#[allow(clippy::too_many_arguments)]
pub fn titration_record<G: Rng>(
    params: &PatientParams<f64>,
    weight_kg: f64,
    noise_scale: f64,
    hours: usize,
    spacing: (usize, usize),
    missing_rate: f64,
    baseline: bool,
    gammas: &GlobalDecayRates<f64>,
    domains: &Domains<f64>,
    rng: &mut G,
) -> ObservationSeries<f64> {
    let delay = usize::from(baseline);
    let doses = titration_doses(params, weight_kg, noise_scale, hours, delay, gammas, domains, rng);
    let tr = crate::dynamics::simulate(params, gammas, &doses, domains).expect("sampled parameters are valid");
    let times = draw_times(hours, spacing, missing_rate, baseline, rng);
    let observations = noisy_readings(&tr.y(), &times, noise_scale, rng);
    let est = crate::estimation::estimate_noise_scale(&observations);
    ObservationSeries {
        doses,
        observations,
        noise_scale: est,
    }
}

/// Laplace scale whose variance equals the sample variance of the readings.
pub fn laplace_scale_of(observations: &[(usize, f64)]) -> f64 {
    let n = observations.len();
    if n < 2 {
        return 0.0;
    }
    let mean = observations.iter().map(|o| o.1).sum::<f64>() / n as f64;
    let var = observations.iter().map(|o| (o.1 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / 2.0).sqrt()
}

/// Reproducible cohort of `n` patients. The record is charted with lab noise
/// drawn from `noise_range`; the closed-loop noise scale is set so its variance
/// matches the sample variance of the charted readings (never below the lab
/// noise).
pub fn synth_cohort(
    n: usize,
    seed: u64,
    ranges: &SynthRanges,
    gammas: &GlobalDecayRates<f64>,
    domains: &Domains<f64>,
) -> Vec<PatientTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let params = sample_params(ranges, &mut rng);
            let lab_noise = uniform(&mut rng, ranges.noise_range);
            let weight_kg = uniform(&mut rng, ranges.weight_range);
            let bleed_risk = if params.yb > ranges.high_risk_yb {
                BleedRisk::High
            } else {
                BleedRisk::Low
            };
            let record = titration_record(
                &params,
                weight_kg,
                lab_noise,
                ranges.record_hours,
                ranges.obs_spacing,
                ranges.missing_rate,
                ranges.baseline_draw,
                gammas,
                domains,
                &mut rng,
            );
            let noise_scale = laplace_scale_of(&record.observations).max(lab_noise);
            PatientTruth {
                id: format!("synth-{seed}-{i:03}"),
                params,
                noise_scale,
                weight_kg,
                bleed_risk,
                record,
            }
        })
        .collect()
}
