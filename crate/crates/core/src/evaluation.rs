//! Prediction quality: therapeutic labels, posterior label probabilities,
//! one-vs-all ROC curves and the confusion matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{label, simulate, Domains, DynamicsError, GlobalDecayRates, Label};
use crate::estimation::{
    estimate_noise_scale, scenario_table, EstimationConfig, EstimationError, ObservationSeries, PriorSpec, ScenarioTable,
};
use crate::simulator::{synthetic_domains, PatientTruth, SynthRanges};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("invalid evaluation input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// `P(v + e <= z)` for Laplace noise `e` of scale `s`.
pub fn laplace_cdf(z: f64, s: f64) -> f64 {
    if z < 0.0 {
        0.5 * (z / s).exp()
    } else {
        1.0 - 0.5 * (-z / s).exp()
    }
}

/// Probabilities of `(sub, therapeutic, super)` for a reading of true value `y`
/// with Laplace noise of scale `s`, against the band of `yb`.
pub fn reading_label_probs(y: f64, yb: f64, s: f64) -> [f64; 3] {
    let sub = laplace_cdf(1.5 * yb - y, s);
    let sup = 1.0 - laplace_cdf(2.5 * yb - y, s);
    [sub, (1.0 - sub - sup).max(0.0), sup]
}

/// Label probabilities of the reading at `hour`.
///
/// Each scenario is rolled forward under `doses` (which must cover `hour`) and
/// contributes its normalized weight, spread over labels by the noise mass
/// falling in each of its own band intervals.
pub fn predict_label_probs(
    table: &ScenarioTable<f64>,
    doses: &[f64],
    hour: usize,
    noise_scale: f64,
    gammas: &GlobalDecayRates<f64>,
    domains: &Domains<f64>,
) -> Result<[f64; 3], EvaluationError> {
    if hour == 0 || hour > doses.len() {
        return Err(EvaluationError::InvalidInput(format!(
            "hour {hour} is not covered by {} doses",
            doses.len()
        )));
    }
    if !(noise_scale > 0.0 && noise_scale.is_finite()) {
        return Err(EvaluationError::InvalidInput("noise scale must be positive".into()));
    }
    let mut out = [0.0; 3];
    let mut total = 0.0;
    for (p, w) in table.weighted() {
        if w <= 0.0 {
            continue;
        }
        let tr = simulate(p, gammas, &doses[..hour], domains)?;
        let pr = reading_label_probs(tr.states[hour].y, p.yb, noise_scale);
        for c in 0..3 {
            out[c] += w * pr[c];
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(EvaluationError::InvalidInput("scenario table carries no weight".into()));
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// One predicted epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochPrediction {
    /// Hours of history available to the predictor.
    pub start: usize,
    /// Hour of the reading being predicted, inside `start + 1 ..= start + epoch`.
    pub hour: usize,
    pub truth: Label,
    pub predicted: Label,
    pub probs: [f64; 3],
    /// False when the predictor had nothing to go on.
    pub confident: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSeries {
    pub patient_id: String,
    pub epochs: Vec<EpochPrediction>,
}

/// Argmax label; ties go to therapeutic, then to sub.
pub fn argmax_label(p: &[f64; 3]) -> Label {
    let mut best = Label::Therapeutic;
    for l in [Label::Sub, Label::Super] {
        if p[l.index()] > p[best.index()] {
            best = l;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocCurve {
    pub mode: Averaging,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    /// Classes left out of a macro average.
    pub skipped: Vec<Label>,
}

/// ROC of a binary problem: one point per distinct score threshold, AUC by the
/// trapezoid rule. Returns `None` unless both classes are present.
pub fn binary_roc(scores: &[f64], positive: &[bool]) -> Option<(Vec<(f64, f64)>, f64)> {
    assert_eq!(scores.len(), positive.len());
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = trapezoid(&points);
    Some((points, auc))
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// TPR at `f` on a step curve; vertical segments resolve to their top.
fn tpr_at(points: &[(f64, f64)], f: f64) -> f64 {
    let mut at = None;
    for &(x, y) in points {
        if x == f {
            at = Some(at.map_or(y, |v: f64| v.max(y)));
        }
    }
    if let Some(v) = at {
        return v;
    }
    let j = points.iter().position(|&(x, _)| x > f).unwrap_or(points.len() - 1);
    let (x0, y0) = points[j - 1];
    let (x1, y1) = points[j];
    y0 + (y1 - y0) * (f - x0) / (x1 - x0)
}

/// Pooled one-vs-all scores: `(score, is_positive)` for every epoch and class.
pub fn pooled_binary(series: &[LabelSeries]) -> (Vec<f64>, Vec<bool>) {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for e in series.iter().flat_map(|x| &x.epochs) {
        for l in Label::ALL {
            s.push(e.probs[l.index()]);
            y.push(e.truth == l);
        }
    }
    (s, y)
}

pub fn roc(series: &[LabelSeries], mode: Averaging) -> Result<RocCurve, EvaluationError> {
    if series.iter().all(|s| s.epochs.is_empty()) {
        return Err(EvaluationError::InvalidInput("no predicted epochs".into()));
    }
    match mode {
        Averaging::Micro => {
            let (s, y) = pooled_binary(series);
            let (points, auc) = binary_roc(&s, &y)
                .ok_or_else(|| EvaluationError::InvalidInput("pooled problem has a single class".into()))?;
            Ok(RocCurve {
                mode,
                points,
                auc,
                skipped: Vec::new(),
            })
        }
        Averaging::Macro => {
            let mut curves = Vec::new();
            let mut skipped = Vec::new();
            for l in Label::ALL {
                let mut s = Vec::new();
                let mut y = Vec::new();
                for e in series.iter().flat_map(|x| &x.epochs) {
                    s.push(e.probs[l.index()]);
                    y.push(e.truth == l);
                }
                match binary_roc(&s, &y) {
                    Some((pts, _)) => curves.push(pts),
                    None => skipped.push(l),
                }
            }
            if curves.is_empty() {
                return Err(EvaluationError::InvalidInput("no class has both outcomes".into()));
            }
            let mut mesh: Vec<f64> = curves.iter().flatten().map(|p| p.0).collect();
            mesh.sort_by(f64::total_cmp);
            mesh.dedup();
            let k = curves.len() as f64;
            let points: Vec<(f64, f64)> = mesh
                .iter()
                .map(|&f| (f, curves.iter().map(|c| tpr_at(c, f)).sum::<f64>() / k))
                .collect();
            // Keep the start at the origin so the area covers [0, 1].
            let mut points = points;
            if points[0] != (0.0, 0.0) {
                points.insert(0, (0.0, 0.0));
            }
            let auc = trapezoid(&points);
            Ok(RocCurve {
                mode,
                points,
                auc,
                skipped,
            })
        }
    }
}

/// Centered moving average of the TPR values, for plotting only.
pub fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let h = window / 2;
    (0..points.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(points.len());
            let m = points[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64;
            (points[i].0, m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    /// `matrix[truth][predicted]` as fractions of all epochs.
    pub matrix: [[f64; 3]; 3],
    /// Per truth class: fraction predicted as that class.
    pub tpr: [f64; 3],
    /// Per class: fraction of the other classes predicted as it.
    pub fpr: [f64; 3],
    pub count: usize,
}

pub fn confusion(series: &[LabelSeries]) -> Result<Confusion, EvaluationError> {
    let mut counts = [[0usize; 3]; 3];
    for e in series.iter().flat_map(|x| &x.epochs) {
        counts[e.truth.index()][e.predicted.index()] += 1;
    }
    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return Err(EvaluationError::InvalidInput("no predicted epochs".into()));
    }
    let mut matrix = [[0.0; 3]; 3];
    let mut tpr = [0.0; 3];
    let mut fpr = [0.0; 3];
    for t in 0..3 {
        for p in 0..3 {
            matrix[t][p] = counts[t][p] as f64 / total as f64;
        }
    }
    for c in 0..3 {
        let pos: usize = counts[c].iter().sum();
        let neg = total - pos;
        let fp: usize = (0..3).filter(|&t| t != c).map(|t| counts[t][c]).sum();
        tpr[c] = if pos > 0 { counts[c][c] as f64 / pos as f64 } else { 0.0 };
        fpr[c] = if neg > 0 { fp as f64 / neg as f64 } else { 0.0 };
    }
    Ok(Confusion {
        matrix,
        tpr,
        fpr,
        count: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocReport {
    pub micro: RocCurve,
    #[serde(rename = "macro")]
    pub macro_avg: RocCurve,
    pub confusion: Confusion,
}

pub fn roc_report(series: &[LabelSeries]) -> Result<RocReport, EvaluationError> {
    Ok(RocReport {
        micro: roc(series, Averaging::Micro)?,
        macro_avg: roc(series, Averaging::Macro)?,
        confusion: confusion(series)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub epoch_hours: usize,
    /// Epochs start once this many readings are charted.
    pub min_observations: usize,
    pub alphas: Vec<f64>,
    pub b_values: Vec<f64>,
    pub prior: PriorSpec<f64>,
    pub estimation: EstimationConfig<f64>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl EvaluationConfig {
    /// Four-hour epochs after three readings, scored with the `ptc-sg10` grid of
    /// a synthetic world.
    pub fn for_ranges(ranges: &SynthRanges) -> Self {
        Self {
            epoch_hours: 4,
            min_observations: 3,
            alphas: ranges.alphas.clone(),
            b_values: ranges.b_grid(5),
            prior: PriorSpec::tied(),
            estimation: EstimationConfig::with_domains(synthetic_domains(), GlobalDecayRates::default(), 20),
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvaluationError> {
        if self.epoch_hours == 0 {
            return Err(EvaluationError::InvalidInput("epoch must be at least one hour".into()));
        }
        if self.alphas.is_empty() || self.b_values.is_empty() {
            return Err(EvaluationError::InvalidInput("scenario grid is empty".into()));
        }
        self.estimation.validate()?;
        self.prior.validate(&self.estimation.domains)?;
        Ok(())
    }
}

/// Ground truth of a charted reading: its label against the true band.
pub fn truth_labels(record: &ObservationSeries<f64>, yb: f64) -> Result<Vec<(usize, Label)>, EvaluationError> {
    record
        .observations
        .iter()
        .map(|&(t, y)| Ok((t, label(y, yb)?)))
        .collect()
}

/// Epoch starts `s` (multiples of the epoch length) whose epoch
/// `s + 1 ..= s + epoch` holds a reading, with the first such reading.
pub fn epochs(record: &ObservationSeries<f64>, epoch: usize, min_observations: usize) -> Vec<(usize, usize)> {
    let h = record.horizon();
    let mut out = Vec::new();
    let mut s = 0;
    while s < h {
        let seen = record.observations.iter().filter(|o| o.0 <= s).count();
        if seen >= min_observations.max(1) {
            if let Some(&(t, _)) = record.observations.iter().find(|o| o.0 > s && o.0 <= s + epoch) {
                out.push((s, t));
            }
        }
        s += epoch;
    }
    out
}

/// Dynamic-model predictions for one charted record.
pub fn model_series(truth: &PatientTruth, cfg: &EvaluationConfig) -> Result<LabelSeries, EvaluationError> {
    let record = &truth.record;
    let labels = truth_labels(record, truth.params.yb)?;
    let mut out = Vec::new();
    for (s, hour) in epochs(record, cfg.epoch_hours, cfg.min_observations) {
        let mut hist = record.truncated(s);
        hist.noise_scale = estimate_noise_scale(&hist.observations);
        let table = scenario_table(&hist, &cfg.alphas, &cfg.b_values, &cfg.prior, &cfg.estimation)?;
        let probs = predict_label_probs(
            &table,
            &record.doses,
            hour,
            hist.noise_scale,
            &cfg.estimation.gammas,
            &cfg.estimation.domains,
        )?;
        let truth_label = labels.iter().find(|l| l.0 == hour).expect("epoch hour is a reading").1;
        out.push(EpochPrediction {
            start: s,
            hour,
            truth: truth_label,
            predicted: argmax_label(&probs),
            probs,
            confident: true,
        });
    }
    Ok(LabelSeries {
        patient_id: truth.id.clone(),
        epochs: out,
    })
}

/// Persistence baseline: the previous epoch's ground-truth label, or a uniform
/// guess flagged as not confident when that epoch has no reading.
pub fn persistence_series(
    patient_id: &str,
    record: &ObservationSeries<f64>,
    yb: f64,
    epoch: usize,
    min_observations: usize,
) -> Result<LabelSeries, EvaluationError> {
    let labels = truth_labels(record, yb)?;
    let mut out = Vec::new();
    for (s, hour) in epochs(record, epoch, min_observations) {
        let prev = labels
            .iter()
            .rev()
            .find(|&&(t, _)| t <= s && t + epoch > s)
            .map(|&(_, l)| l);
        let (probs, confident) = match prev {
            Some(l) => {
                let mut p = [0.0; 3];
                p[l.index()] = 1.0;
                (p, true)
            }
            None => ([1.0 / 3.0; 3], false),
        };
        let truth_label = labels.iter().find(|l| l.0 == hour).expect("epoch hour is a reading").1;
        out.push(EpochPrediction {
            start: s,
            hour,
            truth: truth_label,
            predicted: argmax_label(&probs),
            probs,
            confident,
        });
    }
    Ok(LabelSeries {
        patient_id: patient_id.to_string(),
        epochs: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub config: EvaluationConfig,
    pub model: RocReport,
    pub persistence: RocReport,
    pub model_series: Vec<LabelSeries>,
    pub persistence_series: Vec<LabelSeries>,
}

/// Model and persistence predictions over a cohort of charted records.
pub fn evaluate_cohort(cohort: &[PatientTruth], cfg: &EvaluationConfig) -> Result<EvaluationReport, EvaluationError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| EvaluationError::InvalidInput(e.to_string()))?;
    let model: Vec<LabelSeries> =
        pool.install(|| cohort.par_iter().map(|p| model_series(p, cfg)).collect::<Result<_, _>>())?;
    let persistence: Vec<LabelSeries> = cohort
        .iter()
        .map(|p| persistence_series(&p.id, &p.record, p.params.yb, cfg.epoch_hours, cfg.min_observations))
        .collect::<Result<_, _>>()?;
    Ok(EvaluationReport {
        config: cfg.clone(),
        model: roc_report(&model)?,
        persistence: roc_report(&persistence)?,
        model_series: model,
        persistence_series: persistence,
    })
}
