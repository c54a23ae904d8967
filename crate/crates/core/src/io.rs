//! On-disk formats: the hourly chart file, cohort files and versioned reports.
//!
//! Chart files are comma-separated text:
//!
//! ```text
//! # patient_id: bed-12
//! # weight_kg: 82.5
//! # bleed_risk: low
//! hour,dose_iu,aptt_s
//! 0,0,31.2
//! 1,5000,
//! 5,1200,64.0
//! ```
//!
//! `hour` is the integer chart hour starting at 0, `dose_iu` the heparin given
//! during that hour and `aptt_s` a reading taken at its end. Empty fields are
//! missing; skipped hours are filled with dose 0 and no reading. Chart hour `h`
//! is model time `h + 1`, so model time 0 is the heparin-free start.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dosing::{BleedRisk, DosePlan};
use crate::estimation::{estimate_noise_scale, EstimateResult, ObservationSeries, ScenarioTable};
use crate::evaluation::{EvaluationReport, RocReport};
use crate::simulator::{CohortReport, PatientTruth};

pub const CHART_HEADER: &str = "hour,dose_iu,aptt_s";
pub const COHORT_SCHEMA: &str = "heparin.cohort/v1";
pub const REPORT_SCHEMA: &str = "heparin.report/v1";
/// Readings must lie strictly inside `(0, APTT_MAX)` seconds.
pub const APTT_MAX: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowIssue {
    /// 1-based line number in the file; 0 for whole-file problems.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("chart is invalid:{}", format_issues(.0))]
    Chart(Vec<RowIssue>),
    #[error("cannot read input: {0}")]
    Read(String),
    #[error("malformed document: {0}")]
    Format(String),
    #[error("schema '{found}' is not {expected}")]
    Schema { expected: String, found: String },
}

fn format_issues(issues: &[RowIssue]) -> String {
    let mut s = String::new();
    for i in issues {
        if i.line == 0 {
            let _ = write!(s, "\n  {}", i.message);
        } else {
            let _ = write!(s, "\n  line {}: {}", i.line, i.message);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartRow {
    pub hour: usize,
    pub dose_iu: f64,
    pub aptt_s: Option<f64>,
}

/// A validated chart with one row per hour from 0 to the last charted hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartRecord {
    pub patient_id: String,
    pub weight_kg: Option<f64>,
    pub bleed_risk: Option<BleedRisk>,
    pub rows: Vec<ChartRow>,
}

/// Configurable acceptance thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartRules {
    pub min_readings: usize,
    /// Hours with a nonzero dose.
    pub min_dose_rows: usize,
}

impl Default for ChartRules {
    fn default() -> Self {
        Self {
            min_readings: 1,
            min_dose_rows: 0,
        }
    }
}

fn parse_number(field: &str, what: &str) -> Result<Option<f64>, String> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    match f.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("{what} '{f}' is not a number")),
    }
}

pub fn parse_chart_str(text: &str, rules: &ChartRules) -> Result<ChartRecord, IoError> {
    let mut issues = Vec::new();
    let mut patient_id = None;
    let mut weight_kg = None;
    let mut bleed_risk = None;
    let mut header_seen = false;
    let mut sparse: Vec<(usize, usize, f64, Option<f64>)> = Vec::new();
    let mut last_hour: Option<usize> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(meta) = l.strip_prefix('#') {
            if header_seen {
                issues.push(RowIssue {
                    line,
                    message: "metadata must precede the header".into(),
                });
                continue;
            }
            let Some((k, v)) = meta.split_once(':') else {
                issues.push(RowIssue {
                    line,
                    message: "metadata lines read '# key: value'".into(),
                });
                continue;
            };
            let v = v.trim();
            match k.trim() {
                "patient_id" if !v.is_empty() => patient_id = Some(v.to_string()),
                "weight_kg" => match v.parse::<f64>() {
                    Ok(w) if w > 0.0 && w.is_finite() => weight_kg = Some(w),
                    _ => issues.push(RowIssue {
                        line,
                        message: format!("weight '{v}' must be a positive number"),
                    }),
                },
                "bleed_risk" => match v.parse::<BleedRisk>() {
                    Ok(r) => bleed_risk = Some(r),
                    Err(e) => issues.push(RowIssue { line, message: e }),
                },
                other => issues.push(RowIssue {
                    line,
                    message: format!("unknown metadata key '{other}'"),
                }),
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            if cols.join(",") != CHART_HEADER {
                issues.push(RowIssue {
                    line,
                    message: format!("header must be '{CHART_HEADER}'"),
                });
                return Err(IoError::Chart(issues));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            issues.push(RowIssue {
                line,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
            continue;
        }
        let hour = match fields[0].trim().parse::<usize>() {
            Ok(h) => h,
            Err(_) => {
                issues.push(RowIssue {
                    line,
                    message: format!("hour '{}' is not a nonnegative integer", fields[0].trim()),
                });
                continue;
            }
        };
        let mut row_ok = true;
        if let Some(prev) = last_hour {
            if hour == prev {
                issues.push(RowIssue {
                    line,
                    message: format!("duplicate hour {hour}"),
                });
                row_ok = false;
            } else if hour < prev {
                issues.push(RowIssue {
                    line,
                    message: format!("hour {hour} follows hour {prev}"),
                });
                row_ok = false;
            }
        }
        let dose = match parse_number(fields[1], "dose") {
            Ok(Some(d)) if d < 0.0 => {
                issues.push(RowIssue {
                    line,
                    message: format!("negative dose {d}"),
                });
                None
            }
            Ok(d) => Some(d.unwrap_or(0.0)),
            Err(m) => {
                issues.push(RowIssue { line, message: m });
                None
            }
        };
        let aptt = match parse_number(fields[2], "aPTT") {
            Ok(Some(y)) if !(y > 0.0 && y < APTT_MAX) => {
                issues.push(RowIssue {
                    line,
                    message: format!("aPTT {y} outside (0, {APTT_MAX})"),
                });
                Err(())
            }
            Ok(y) => Ok(y),
            Err(m) => {
                issues.push(RowIssue { line, message: m });
                Err(())
            }
        };
        if row_ok {
            last_hour = Some(hour);
            if let (Some(d), Ok(y)) = (dose, aptt) {
                sparse.push((line, hour, d, y));
            }
        }
    }
    if !header_seen {
        issues.push(RowIssue {
            line: 0,
            message: format!("missing header '{CHART_HEADER}'"),
        });
    }
    let patient_id = patient_id.unwrap_or_else(|| {
        issues.push(RowIssue {
            line: 0,
            message: "missing '# patient_id:' metadata".into(),
        });
        String::new()
    });
    let readings = sparse.iter().filter(|r| r.3.is_some()).count();
    let doses = sparse.iter().filter(|r| r.2 > 0.0).count();
    if issues.is_empty() {
        if readings < rules.min_readings.max(1) {
            issues.push(RowIssue {
                line: 0,
                message: format!("{readings} aPTT readings, at least {} required", rules.min_readings.max(1)),
            });
        }
        if doses < rules.min_dose_rows {
            issues.push(RowIssue {
                line: 0,
                message: format!("{doses} dosed hours, at least {} required", rules.min_dose_rows),
            });
        }
    }
    if !issues.is_empty() {
        return Err(IoError::Chart(issues));
    }
    let end = sparse.last().map_or(0, |r| r.1 + 1);
    let mut rows: Vec<ChartRow> = (0..end)
        .map(|hour| ChartRow {
            hour,
            dose_iu: 0.0,
            aptt_s: None,
        })
        .collect();
    for (_, h, d, y) in sparse {
        rows[h].dose_iu = d;
        rows[h].aptt_s = y;
    }
    Ok(ChartRecord {
        patient_id,
        weight_kg,
        bleed_risk,
        rows,
    })
}

pub fn parse_chart<Rd: Read>(mut input: Rd, rules: &ChartRules) -> Result<ChartRecord, IoError> {
    let mut s = String::new();
    input.read_to_string(&mut s).map_err(|e| IoError::Read(e.to_string()))?;
    parse_chart_str(&s, rules)
}

/// Canonical text of a chart: metadata in fixed order, every hour written.
pub fn write_chart(record: &ChartRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# patient_id: {}", record.patient_id);
    if let Some(w) = record.weight_kg {
        let _ = writeln!(s, "# weight_kg: {w}");
    }
    if let Some(r) = record.bleed_risk {
        let _ = writeln!(
            s,
            "# bleed_risk: {}",
            match r {
                BleedRisk::Low => "low",
                BleedRisk::High => "high",
            }
        );
    }
    s.push_str(CHART_HEADER);
    s.push('\n');
    for r in &record.rows {
        let _ = write!(s, "{},{},", r.hour, r.dose_iu);
        if let Some(y) = r.aptt_s {
            let _ = write!(s, "{y}");
        }
        s.push('\n');
    }
    s
}

impl ChartRecord {
    /// Model-time series; the noise scale is estimated from the readings when
    /// not given.
    pub fn to_series(&self, noise_scale: Option<f64>) -> ObservationSeries<f64> {
        let doses: Vec<f64> = self.rows.iter().map(|r| r.dose_iu).collect();
        let observations: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter_map(|r| r.aptt_s.map(|y| (r.hour + 1, y)))
            .collect();
        let noise_scale = noise_scale.unwrap_or_else(|| estimate_noise_scale(&observations));
        ObservationSeries {
            doses,
            observations,
            noise_scale,
        }
    }

    /// Chart of a model-time series.
    pub fn from_series(
        patient_id: &str,
        series: &ObservationSeries<f64>,
        weight_kg: Option<f64>,
        bleed_risk: Option<BleedRisk>,
    ) -> Self {
        let mut rows: Vec<ChartRow> = series
            .doses
            .iter()
            .enumerate()
            .map(|(hour, &d)| ChartRow {
                hour,
                dose_iu: d,
                aptt_s: None,
            })
            .collect();
        for &(t, y) in &series.observations {
            rows[t - 1].aptt_s = Some(y);
        }
        Self {
            patient_id: patient_id.to_string(),
            weight_kg,
            bleed_risk,
            rows,
        }
    }
}

/// Synthetic patients with their hidden truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortFile {
    pub schema: String,
    pub patients: Vec<PatientTruth>,
}

impl CohortFile {
    pub fn new(patients: Vec<PatientTruth>) -> Self {
        Self {
            schema: COHORT_SCHEMA.into(),
            patients,
        }
    }
}

pub fn write_cohort(patients: &[PatientTruth]) -> Result<String, IoError> {
    canonical(&CohortFile::new(patients.to_vec()))
}

pub fn parse_cohort(text: &str) -> Result<Vec<PatientTruth>, IoError> {
    let f: CohortFile = serde_json::from_str(text).map_err(|e| IoError::Format(e.to_string()))?;
    if f.schema != COHORT_SCHEMA {
        return Err(IoError::Schema {
            expected: COHORT_SCHEMA.into(),
            found: f.schema,
        });
    }
    Ok(f.patients)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportBody {
    Cohort(CohortReport),
    Roc(RocReport),
    Evaluation(EvaluationReport),
    Estimate(EstimateResult<f64>),
    Scenarios(ScenarioTable<f64>),
    Plan(DosePlan<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub report: ReportBody,
}

impl Report {
    pub fn new(report: ReportBody) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            report,
        }
    }
}

/// Pretty JSON in declaration order, checked to read back to the same bytes.
/// Non-finite numbers have no JSON form and make the check fail.
fn canonical<T: Serialize + for<'de> Deserialize<'de>>(value: &T) -> Result<String, IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::Format(e.to_string()))?;
    s.push('\n');
    let back: T = serde_json::from_str(&s)
        .map_err(|e| IoError::Format(format!("document does not read back ({e}); non-finite values?")))?;
    let mut again = serde_json::to_string_pretty(&back).map_err(|e| IoError::Format(e.to_string()))?;
    again.push('\n');
    if again != s {
        return Err(IoError::Format("document does not round-trip".into()));
    }
    Ok(s)
}

pub fn write_report(report: &Report) -> Result<String, IoError> {
    canonical(report)
}

pub fn parse_report(text: &str) -> Result<Report, IoError> {
    let r: Report = serde_json::from_str(text).map_err(|e| IoError::Format(e.to_string()))?;
    if r.schema != REPORT_SCHEMA {
        return Err(IoError::Schema {
            expected: REPORT_SCHEMA.into(),
            found: r.schema,
        });
    }
    Ok(r)
}
