//! Hourly patient model: piecewise-linear heparin kinetics, aPTT response with a
//! drifting medium-term baseline, the Michaelis-Menten reference solution and the
//! Laplace observation model.
//!
//! Time is discrete in hours. A trajectory starts at `t = 0` with no heparin on
//! board; the dose `doses[t - 1]` is the total given during hour `t`, so it is
//! added in the transition `t - 1 -> t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid parameter {name}: {value} ({reason})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("Lambert W iteration did not converge for log-argument {0}")]
    NoConvergence(f64),
}

fn invalid(name: &'static str, value: impl Real, reason: &'static str) -> DynamicsError {
    DynamicsError::InvalidParameter {
        name,
        value: value.f64(),
        reason,
    }
}

/// One patient's kinetic (`alpha`, `k`) and response (`b`, `y0`, `yb0`, `yb`) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientParams<R> {
    pub alpha: R,
    pub k: R,
    pub b: R,
    pub y0: R,
    pub yb0: R,
    pub yb: R,
}

impl<R: Real> PatientParams<R> {
    /// Checks every field against `domains`.
    pub fn validate(&self, domains: &Domains<R>) -> Result<(), DynamicsError> {
        if !domains.contains_alpha(self.alpha) {
            return Err(invalid("alpha", self.alpha, "not in the declared retention set"));
        }
        let (klo, khi) = domains.k_range;
        if !(self.k > R::zero() && self.k >= klo && self.k <= khi) {
            return Err(invalid("k", self.k, "outside the elimination-rate range"));
        }
        let (blo, bhi) = domains.b_range;
        if !(self.b > R::zero() && self.b >= blo && self.b <= bhi) {
            return Err(invalid("b", self.b, "outside the response range"));
        }
        for (name, v) in [("y0", self.y0), ("yb0", self.yb0), ("yb", self.yb)] {
            if !(v >= R::zero() && v <= domains.y_max) {
                return Err(invalid(name, v, "outside the aPTT range"));
            }
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> PatientParams<S> {
        PatientParams {
            alpha: S::lit(self.alpha.f64()),
            k: S::lit(self.k.f64()),
            b: S::lit(self.b.f64()),
            y0: S::lit(self.y0.f64()),
            yb0: S::lit(self.yb0.f64()),
            yb: S::lit(self.yb.f64()),
        }
    }
}

/// Population-level decay constants of the aPTT recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalDecayRates<R> {
    pub gamma1: R,
    pub gamma2: R,
    pub gamma3: R,
    pub gamma4: R,
}

impl<R: Real> Default for GlobalDecayRates<R> {
    fn default() -> Self {
        Self {
            gamma1: R::lit(0.8),
            gamma2: R::lit(0.85),
            gamma3: R::lit(0.05),
            gamma4: R::lit(0.10),
        }
    }
}

impl<R: Real> GlobalDecayRates<R> {
    pub fn new(gamma1: R, gamma2: R, gamma3: R, gamma4: R) -> Result<Self, DynamicsError> {
        let g = Self {
            gamma1,
            gamma2,
            gamma3,
            gamma4,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("gamma4", self.gamma4),
        ] {
            if !(v > R::zero() && v < R::one()) {
                return Err(invalid(name, v, "must lie in (0, 1)"));
            }
        }
        let sum = self.gamma2 + self.gamma3 + self.gamma4;
        if (sum - R::one()).abs() > R::lit(1e-6) {
            return Err(invalid("gamma2+gamma3+gamma4", sum, "must equal 1"));
        }
        if self.spectral_radius() >= R::one() {
            return Err(invalid(
                "gammas",
                self.spectral_radius(),
                "heparin-free recursion is not stable",
            ));
        }
        Ok(())
    }

    /// Transition matrix of `(y - yb, y_b - yb)` with no heparin on board.
    pub fn transition(&self) -> [[R; 2]; 2] {
        [
            [self.gamma1, R::one() - self.gamma1],
            [self.gamma3, self.gamma2],
        ]
    }

    /// Largest eigenvalue modulus of [`Self::transition`].
    pub fn spectral_radius(&self) -> R {
        let [[a, b], [c, d]] = self.transition();
        let tr = a + d;
        let det = a * d - b * c;
        let disc = tr * tr - R::lit(4.0) * det;
        let two = R::lit(2.0);
        if disc >= R::zero() {
            let s = disc.sqrt();
            ((tr + s) / two).abs().max(((tr - s) / two).abs())
        } else {
            det.abs().sqrt()
        }
    }
}

/// Declared parameter and state domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domains<R> {
    pub alpha_set: Vec<R>,
    pub alpha_min: R,
    pub b_range: (R, R),
    pub k_range: (R, R),
    pub y_max: R,
    pub x_max: R,
    pub u_max: R,
}

impl<R: Real> Default for Domains<R> {
    fn default() -> Self {
        Self {
            alpha_set: [0.500, 0.574, 0.630, 0.673, 0.707]
                .iter()
                .map(|&a| R::lit(a))
                .collect(),
            alpha_min: R::lit(1e-3),
            b_range: (R::lit(0.1), R::lit(10.0)),
            k_range: (R::lit(0.1), R::lit(5000.0)),
            y_max: R::lit(150.0),
            x_max: R::lit(5000.0),
            u_max: R::lit(3000.0),
        }
    }
}

impl<R: Real> Domains<R> {
    pub fn contains_alpha(&self, alpha: R) -> bool {
        if !(alpha >= self.alpha_min && alpha < R::one()) {
            return false;
        }
        let tol = R::lit(1e-9).max(R::epsilon() * R::lit(8.0));
        self.alpha_set.iter().any(|&a| (a - alpha).abs() <= tol)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.alpha_set.is_empty() {
            return Err(invalid("alpha_set", 0.0, "empty"));
        }
        for &a in &self.alpha_set {
            if !(a >= self.alpha_min && a < R::one() && self.alpha_min > R::zero()) {
                return Err(invalid("alpha_set", a, "entries must lie in [alpha_min, 1)"));
            }
        }
        for (name, (lo, hi)) in [("b_range", self.b_range), ("k_range", self.k_range)] {
            if !(lo > R::zero() && lo <= hi && hi.is_finite()) {
                return Err(invalid(name, lo, "need 0 < lo <= hi < inf"));
            }
        }
        for (name, v) in [("y_max", self.y_max), ("x_max", self.x_max), ("u_max", self.u_max)] {
            if !(v > R::zero() && v.is_finite()) {
                return Err(invalid(name, v, "must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn check_dose(&self, dose: R) -> Result<(), DynamicsError> {
        if dose >= R::zero() && dose <= self.u_max {
            Ok(())
        } else {
            Err(invalid("dose", dose, "outside [0, u_max]"))
        }
    }
}

/// Latent heparin, true aPTT and the drifting baseline at one hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientState<R> {
    pub x: R,
    pub y: R,
    pub y_b: R,
}

/// Which leg of the piecewise kinetics applied during a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KineticMode {
    FirstOrder,
    ZeroOrder,
}

/// The level above which elimination is zero-order.
#[inline]
pub fn breakpoint<R: Real>(alpha: R, k: R) -> R {
    k / (R::one() - alpha)
}

/// Unclamped heparin transition.
#[inline]
pub fn heparin_step<R: Real>(x: R, dose: R, alpha: R, k: R) -> (R, KineticMode) {
    if x <= breakpoint(alpha, k) {
        (dose + alpha * x, KineticMode::FirstOrder)
    } else {
        (dose + x - k, KineticMode::ZeroOrder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<R> {
    pub state: PatientState<R>,
    pub mode: KineticMode,
    /// Set when any component had to be pulled back into its domain.
    pub clamped: bool,
}

#[inline]
fn clamp_flag<R: Real>(v: R, hi: R, flag: &mut bool) -> R {
    if v < R::zero() {
        *flag = true;
        R::zero()
    } else if v > hi {
        *flag = true;
        hi
    } else {
        v
    }
}

/// Transition without validation; used by rollouts that validated once up front.
#[inline]
pub(crate) fn advance<R: Real>(
    s: &PatientState<R>,
    dose: R,
    p: &PatientParams<R>,
    g: &GlobalDecayRates<R>,
    d: &Domains<R>,
) -> StepOutcome<R> {
    let mut clamped = false;
    let (x_raw, mode) = heparin_step(s.x, dose, p.alpha, p.k);
    let x = clamp_flag(x_raw, d.x_max, &mut clamped);
    let y_raw = g.gamma1 * (s.y - s.y_b) + s.y_b + p.b * x;
    let yb_raw = g.gamma2 * s.y_b + g.gamma3 * s.y + g.gamma4 * p.yb;
    let y = clamp_flag(y_raw, d.y_max, &mut clamped);
    let y_b = clamp_flag(yb_raw, d.y_max, &mut clamped);
    StepOutcome {
        state: PatientState { x, y, y_b },
        mode,
        clamped,
    }
}

/// One hourly transition of the patient model.
pub fn step<R: Real>(
    state: &PatientState<R>,
    dose: R,
    params: &PatientParams<R>,
    gammas: &GlobalDecayRates<R>,
    domains: &Domains<R>,
) -> Result<StepOutcome<R>, DynamicsError> {
    params.validate(domains)?;
    domains.check_dose(dose)?;
    for (name, v, hi) in [
        ("x", state.x, domains.x_max),
        ("y", state.y, domains.y_max),
        ("y_b", state.y_b, domains.y_max),
    ] {
        if !(v >= R::zero() && v <= hi) {
            return Err(invalid(name, v, "state outside its domain"));
        }
    }
    Ok(advance(state, dose, params, gammas, domains))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<R> {
    /// `states[t]` for `t = 0..=T`.
    pub states: Vec<PatientState<R>>,
    /// `modes[t - 1]` is the kinetic leg used for the transition into hour `t`.
    pub modes: Vec<KineticMode>,
    /// Hours at which some component was clamped.
    pub clamped_hours: Vec<usize>,
}

impl<R: Real> Trajectory<R> {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn any_clamped(&self) -> bool {
        !self.clamped_hours.is_empty()
    }

    pub fn y(&self) -> Vec<R> {
        self.states.iter().map(|s| s.y).collect()
    }

    pub fn x(&self) -> Vec<R> {
        self.states.iter().map(|s| s.x).collect()
    }
}

pub fn initial_state<R: Real>(params: &PatientParams<R>) -> PatientState<R> {
    PatientState {
        x: R::zero(),
        y: params.y0,
        y_b: params.yb0,
    }
}

/// Rolls the model over `doses.len()` hours from the heparin-free initial state.
pub fn simulate<R: Real>(
    params: &PatientParams<R>,
    gammas: &GlobalDecayRates<R>,
    doses: &[R],
    domains: &Domains<R>,
) -> Result<Trajectory<R>, DynamicsError> {
    params.validate(domains)?;
    for &u in doses {
        domains.check_dose(u)?;
    }
    let mut states = Vec::with_capacity(doses.len() + 1);
    let mut modes = Vec::with_capacity(doses.len());
    let mut clamped_hours = Vec::new();
    let mut s = initial_state(params);
    states.push(s);
    for (i, &u) in doses.iter().enumerate() {
        let out = advance(&s, u, params, gammas, domains);
        if out.clamped {
            clamped_hours.push(i + 1);
        }
        s = out.state;
        states.push(s);
        modes.push(out.mode);
    }
    Ok(Trajectory {
        states,
        modes,
        clamped_hours,
    })
}

/// Principal branch of Lambert W evaluated at `exp(log_z)`.
///
/// Works in log space for large arguments so that `exp(log_z)` never has to be
/// formed.
pub fn lambert_w0_from_log<R: Real>(log_z: R) -> Result<R, DynamicsError> {
    let tol = R::lit(1e-15).max(R::epsilon() * R::lit(4.0));
    if log_z == R::neg_infinity() {
        return Ok(R::zero());
    }
    if !log_z.is_finite() {
        return Err(DynamicsError::NoConvergence(log_z.f64()));
    }
    if log_z > R::one() {
        // w + ln w = log_z, Newton on that form.
        let mut w = log_z - log_z.ln();
        for _ in 0..100 {
            let f = w + w.ln() - log_z;
            let dw = f / (R::one() + R::one() / w);
            w -= dw;
            if dw.abs() <= tol * w.max(R::one()) {
                return Ok(w);
            }
        }
        return Err(DynamicsError::NoConvergence(log_z.f64()));
    }
    // Halley on w e^w - z for moderate z in (0, e].
    let z = log_z.exp();
    let mut w = if z < R::one() { z / (R::one() + z) } else { z.ln_1p() * R::lit(0.8) };
    let two = R::lit(2.0);
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + R::one();
        let denom = ew * wp1 - (w + two) * f / (two * wp1);
        let dw = f / denom;
        w -= dw;
        if dw.abs() <= tol * w.abs().max(R::lit(1e-300).max(R::min_positive_value())) || f == R::zero() {
            return Ok(w);
        }
    }
    Err(DynamicsError::NoConvergence(log_z.f64()))
}

/// Closed-form Michaelis-Menten concentration `t` hours after `x1`, for
/// elimination `dx/dt = -v_max x / (K + x)`.
pub fn mm_exact<R: Real>(v_max: R, k_half: R, x1: R, t: R) -> Result<R, DynamicsError> {
    if !(v_max > R::zero()) {
        return Err(invalid("v_max", v_max, "must be positive"));
    }
    if !(k_half > R::zero()) {
        return Err(invalid("K", k_half, "must be positive"));
    }
    if !(x1 > R::zero()) {
        return Err(invalid("x1", x1, "must be positive"));
    }
    if !(t >= R::zero()) {
        return Err(invalid("t", t, "must be nonnegative"));
    }
    if t == R::zero() {
        return Ok(x1);
    }
    let r = x1 / k_half;
    let log_arg = r.ln() + r - v_max * t / k_half;
    Ok(k_half * lambert_w0_from_log(log_arg)?)
}

/// Draws a Laplace(0, `scale`) deviate by inverting the CDF.
pub fn laplace_noise<R: Real, G: Rng + ?Sized>(scale: R, rng: &mut G) -> R {
    let u: f64 = rng.gen::<f64>() - 0.5;
    let mag = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
    scale * R::lit(u.signum() * mag)
}

/// `y_true` plus Laplace noise drawn from a generator seeded with `rng_seed`.
pub fn sample_observation<R: Real>(y_true: R, scale: R, rng_seed: u64) -> Result<R, DynamicsError> {
    if !(scale > R::zero()) {
        return Err(invalid("scale", scale, "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(y_true + laplace_noise(scale, &mut rng))
}

/// Closed therapeutic aPTT band `[1.5 yb, 2.5 yb]`.
pub fn therapeutic_range<R: Real>(yb: R) -> Result<(R, R), DynamicsError> {
    if !(yb > R::zero() && yb.is_finite()) {
        return Err(invalid("yb", yb, "must be positive"));
    }
    Ok((R::lit(1.5) * yb, R::lit(2.5) * yb))
}

/// Position of an aPTT value relative to the therapeutic band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Sub,
    Therapeutic,
    Super,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Sub, Label::Therapeutic, Label::Super];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Sub => "sub",
            Label::Therapeutic => "therapeutic",
            Label::Super => "super",
        }
    }
}

/// Band label of `y`; both band edges count as therapeutic.
pub fn label<R: Real>(y: R, yb: R) -> Result<Label, DynamicsError> {
    let (lo, hi) = therapeutic_range(yb)?;
    Ok(if y < lo {
        Label::Sub
    } else if y > hi {
        Label::Super
    } else {
        Label::Therapeutic
    })
}
