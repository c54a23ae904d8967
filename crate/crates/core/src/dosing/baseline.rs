//! Naive step policy and the weight-based drip protocol.

use serde::{Deserialize, Serialize};

use crate::dynamics::Label;
use crate::real::Real;

use super::DosingError;

/// Hourly dose change applied by the naive policy, IU.
pub const NAIVE_STEP: f64 = 200.0;

/// Next hourly dose: up one step when sub-therapeutic, down one when
/// super-therapeutic, unchanged otherwise, clamped to `[0, u_max]`.
pub fn naive_policy<R: Real>(last_dose: R, label: Label, u_max: R) -> Result<R, DosingError> {
    if !(last_dose >= R::zero() && last_dose <= u_max) {
        return Err(DosingError::InvalidInput(format!("last dose {last_dose} outside [0, u_max]")));
    }
    let step = R::lit(NAIVE_STEP);
    let next = match label {
        Label::Sub => last_dose + step,
        Label::Therapeutic => last_dose,
        Label::Super => last_dose - step,
    };
    Ok(next.max(R::zero()).min(u_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleedRisk {
    Low,
    High,
}

impl std::str::FromStr for BleedRisk {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(BleedRisk::Low),
            "high" => Ok(BleedRisk::High),
            other => Err(format!("unknown bleed risk '{other}'")),
        }
    }
}

/// Starting doses for one risk tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskTier {
    /// IU/kg; zero for no bolus.
    pub bolus_per_kg: f64,
    /// IU/kg/h.
    pub rate_per_kg: f64,
    /// Whether titration rows may order a rebolus.
    pub allow_rebolus: bool,
}

/// Applies when the latest aPTT is below `below_s` and above every earlier row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TitrationRow {
    /// Exclusive upper aPTT bound, seconds; `None` on the last row.
    pub below_s: Option<f64>,
    pub rebolus_per_kg: f64,
    /// IU/kg/h, signed.
    pub rate_change_per_kg: f64,
    pub hold_hours: usize,
}

/// Weight-based drip protocol. The shipped default is a representative
/// stand-in for a hospital table and is meant to be edited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolTable {
    pub schema: String,
    pub low: RiskTier,
    pub high: RiskTier,
    pub titration: Vec<TitrationRow>,
    /// Largest single bolus, IU.
    pub bolus_cap: f64,
}

pub const PROTOCOL_SCHEMA: &str = "heparin.protocol/v1";

impl Default for ProtocolTable {
    fn default() -> Self {
        let row = |below_s, rebolus_per_kg, rate_change_per_kg, hold_hours| TitrationRow {
            below_s,
            rebolus_per_kg,
            rate_change_per_kg,
            hold_hours,
        };
        Self {
            schema: PROTOCOL_SCHEMA.into(),
            low: RiskTier {
                bolus_per_kg: 80.0,
                rate_per_kg: 18.0,
                allow_rebolus: true,
            },
            high: RiskTier {
                bolus_per_kg: 0.0,
                rate_per_kg: 12.0,
                allow_rebolus: false,
            },
            titration: vec![
                row(Some(35.0), 80.0, 4.0, 0),
                row(Some(46.0), 40.0, 2.0, 0),
                row(Some(71.0), 0.0, 0.0, 0),
                row(Some(91.0), 0.0, -2.0, 0),
                row(None, 0.0, -3.0, 1),
            ],
            bolus_cap: 10_000.0,
        }
    }
}

impl ProtocolTable {
    pub fn validate(&self) -> Result<(), DosingError> {
        let bad = |m: String| Err(DosingError::Config(m));
        if self.schema != PROTOCOL_SCHEMA {
            return bad(format!("schema '{}' is not {PROTOCOL_SCHEMA}", self.schema));
        }
        for (name, t) in [("low", &self.low), ("high", &self.high)] {
            if !(t.bolus_per_kg >= 0.0 && t.rate_per_kg >= 0.0 && t.bolus_per_kg.is_finite() && t.rate_per_kg.is_finite()) {
                return bad(format!("tier '{name}' needs nonnegative finite doses"));
            }
        }
        if self.titration.is_empty() {
            return bad("titration table is empty".into());
        }
        let mut last = f64::NEG_INFINITY;
        for (i, r) in self.titration.iter().enumerate() {
            let final_row = i + 1 == self.titration.len();
            match r.below_s {
                Some(b) if !final_row => {
                    if !(b > last && b.is_finite()) {
                        return bad(format!("row {i}: bounds must increase"));
                    }
                    last = b;
                }
                None if final_row => {}
                _ => return bad(format!("row {i}: only the last row is open-ended")),
            }
            if !(r.rebolus_per_kg >= 0.0 && r.rebolus_per_kg.is_finite() && r.rate_change_per_kg.is_finite()) {
                return bad(format!("row {i}: malformed adjustment"));
            }
        }
        if !(self.bolus_cap >= 0.0 && self.bolus_cap.is_finite()) {
            return bad("bolus cap must be nonnegative".into());
        }
        Ok(())
    }

    pub fn tier(&self, risk: BleedRisk) -> &RiskTier {
        match risk {
            BleedRisk::Low => &self.low,
            BleedRisk::High => &self.high,
        }
    }

    pub fn row_for(&self, aptt: f64) -> &TitrationRow {
        self.titration
            .iter()
            .find(|r| r.below_s.is_none_or(|b| aptt < b))
            .expect("validated table ends with an open row")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightBasedOrder {
    pub bolus: f64,
    /// IU/h.
    pub rate: f64,
    /// Hours with no infusion before the new rate starts.
    pub hold_hours: usize,
}

/// Bolus and rate from the protocol table.
///
/// Without a `current_rate` the tier's starting order is returned; otherwise the
/// titration row for `latest_aptt` adjusts the running rate.
pub fn weight_based_policy(
    weight_kg: f64,
    risk: BleedRisk,
    latest_aptt: Option<f64>,
    current_rate: Option<f64>,
    table: &ProtocolTable,
    u_max: f64,
) -> Result<WeightBasedOrder, DosingError> {
    table.validate()?;
    if !(weight_kg > 0.0 && weight_kg.is_finite()) {
        return Err(DosingError::InvalidInput(format!("weight {weight_kg} kg")));
    }
    let tier = table.tier(risk);
    let Some(rate) = current_rate else {
        return Ok(WeightBasedOrder {
            bolus: (tier.bolus_per_kg * weight_kg).min(table.bolus_cap),
            rate: (tier.rate_per_kg * weight_kg).min(u_max),
            hold_hours: 0,
        });
    };
    let Some(aptt) = latest_aptt else {
        return Ok(WeightBasedOrder {
            bolus: 0.0,
            rate: rate.clamp(0.0, u_max),
            hold_hours: 0,
        });
    };
    let row = table.row_for(aptt);
    let bolus = if tier.allow_rebolus {
        (row.rebolus_per_kg * weight_kg).min(table.bolus_cap)
    } else {
        0.0
    };
    Ok(WeightBasedOrder {
        bolus,
        rate: (rate + row.rate_change_per_kg * weight_kg).clamp(0.0, u_max),
        hold_hours: row.hold_hours,
    })
}

/// Hourly doses for `hours` hours: held hours first, then the rate, with the
/// bolus added from the first infusing hour on without any hour exceeding
/// `u_max`. Bolus that does not fit in the window is dropped.
pub fn expand_order(order: &WeightBasedOrder, hours: usize, u_max: f64) -> Vec<f64> {
    let mut out = vec![0.0; hours];
    let mut remaining = order.bolus;
    for (h, slot) in out.iter_mut().enumerate() {
        if h < order.hold_hours {
            continue;
        }
        let base = order.rate.min(u_max);
        let extra = remaining.min(u_max - base).max(0.0);
        remaining -= extra;
        *slot = base + extra;
    }
    out
}
