//! Mixed-integer linear restatement of the kinetics.
//!
//! With `z_t = b x_t` and `c = b k`, the heparin recursion becomes linear in
//! `z` apart from two discrete choices: which retention factor applies (one
//! indicator `iota_i` per entry of the alpha set, selecting `w_t = alpha z_t`)
//! and which kinetic leg applies at each hour (`nu_t = 1` for zero order).
//! Both are written with big-M rows whose `M` comes from the declared bounds.
//!
//! [`Reformulation::from_rollout`] builds the assignment implied by a rollout,
//! [`Reformulation::violations`] checks every row, and
//! [`Reformulation::recover`] maps an assignment back to `(alpha, k, x)`.

use crate::dynamics::{breakpoint, simulate, Domains, GlobalDecayRates, KineticMode, PatientParams};
use crate::real::Real;

use super::EstimationError;

#[derive(Debug, Clone, PartialEq)]
pub struct Reformulation<R> {
    pub alphas: Vec<R>,
    pub iota: Vec<bool>,
    pub b: R,
    pub c: R,
    /// `doses[t]` enters the transition `t -> t + 1`.
    pub doses: Vec<R>,
    /// `z_0..=z_T`.
    pub z: Vec<R>,
    /// `w_0..w_{T-1}`.
    pub w: Vec<R>,
    /// `w_parts[i][t]`.
    pub w_parts: Vec<Vec<R>>,
    /// `nu_0..nu_{T-1}`, true for the zero-order leg.
    pub nu: Vec<bool>,
    pub y: Vec<R>,
    pub y_b: Vec<R>,
    pub yb: R,
    pub gammas: GlobalDecayRates<R>,
    pub big_m: R,
}

/// A row that fails, with the amount by which it fails.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub row: &'static str,
    pub t: usize,
    pub amount: f64,
}

/// `M` large enough for every big-M row under the declared bounds.
pub fn big_m<R: Real>(domains: &Domains<R>) -> R {
    let b_max = domains.b_range.1;
    b_max * (R::lit(2.0) * domains.x_max + domains.u_max + domains.k_range.1)
}

impl<R: Real> Reformulation<R> {
    /// Assignment induced by rolling `params` forward under `doses`.
    ///
    /// Fails if the rollout had to clamp a state, since clamped paths are not
    /// solutions of the unclamped recursion.
    pub fn from_rollout(
        params: &PatientParams<R>,
        doses: &[R],
        gammas: &GlobalDecayRates<R>,
        domains: &Domains<R>,
    ) -> Result<Self, EstimationError> {
        let tr = simulate(params, gammas, doses, domains)?;
        if tr.any_clamped() {
            return Err(EstimationError::InvalidInput("rollout left the state domain".into()));
        }
        let alphas = domains.alpha_set.clone();
        let tol = R::lit(1e-9);
        let sel = alphas
            .iter()
            .position(|&a| (a - params.alpha).abs() <= tol)
            .ok_or_else(|| EstimationError::InvalidInput("alpha not in the declared set".into()))?;
        let b = params.b;
        let z: Vec<R> = tr.states.iter().map(|s| b * s.x).collect();
        let horizon = doses.len();
        let w: Vec<R> = (0..horizon).map(|t| params.alpha * z[t]).collect();
        let w_parts = (0..alphas.len())
            .map(|i| if i == sel { w.clone() } else { vec![R::zero(); horizon] })
            .collect();
        let nu = tr.modes.iter().map(|&m| m == KineticMode::ZeroOrder).collect();
        Ok(Self {
            iota: (0..alphas.len()).map(|i| i == sel).collect(),
            alphas,
            b,
            c: b * params.k,
            doses: doses.to_vec(),
            z,
            w,
            w_parts,
            nu,
            y: tr.states.iter().map(|s| s.y).collect(),
            y_b: tr.states.iter().map(|s| s.y_b).collect(),
            yb: params.yb,
            gammas: *gammas,
            big_m: big_m(domains),
        })
    }

    /// Every failing row. `tol` is relative to the magnitude of the row's terms.
    pub fn violations(&self, tol: R) -> Vec<Violation> {
        let mut out = Vec::new();
        let m = self.big_m;
        let one = R::one();
        let ind = |f: bool| if f { one } else { R::zero() };
        let mut push = |row: &'static str, t: usize, amount: R, scale: R| {
            if amount > tol * (one + scale.abs()) {
                out.push(Violation {
                    row,
                    t,
                    amount: amount.f64(),
                });
            }
        };
        // lhs <= rhs  ->  violation lhs - rhs
        let le = |lhs: R, rhs: R| lhs - rhs;

        let n_sel = self.iota.iter().filter(|&&f| f).count();
        if n_sel != 1 {
            push("sum iota = 1", 0, R::from_usize(n_sel.abs_diff(1)).unwrap(), R::zero());
        }
        if self.z.first().map_or(true, |&z0| z0 != R::zero()) {
            push("z_0 = 0", 0, self.z.first().map_or(one, |z| z.abs()), R::zero());
        }
        for t in 0..self.doses.len() {
            let (z, zn, w, bu) = (self.z[t], self.z[t + 1], self.w[t], self.b * self.doses[t]);
            let nu = ind(self.nu[t]);
            let scale = z.abs() + zn.abs() + w.abs() + bu.abs() + self.c.abs();
            // First-order leg rows.
            push("z' <= w + bu + M nu", t, le(zn, w + bu + m * nu), scale);
            push("z' >= w + bu - M nu", t, le(w + bu - m * nu, zn), scale);
            push("z <= c + w + M nu", t, le(z, self.c + w + m * nu), scale);
            // Zero-order leg rows.
            push("z' <= z - c + bu + M(1-nu)", t, le(zn, z - self.c + bu + m * (one - nu)), scale);
            push("z' >= z - c + bu - M(1-nu)", t, le(z - self.c + bu - m * (one - nu), zn), scale);
            push("z >= c + w - M(1-nu)", t, le(self.c + w - m * (one - nu), z), scale);
            // Alpha selection.
            let sum: R = self.w_parts.iter().map(|p| p[t]).sum();
            push("w = sum w_i", t, (w - sum).abs(), w);
            for (i, part) in self.w_parts.iter().enumerate() {
                let io = ind(self.iota[i]);
                let az = self.alphas[i] * z;
                let sc = az.abs() + part[t].abs();
                push("w_i <= alpha_i z + M(1-iota_i)", t, le(part[t], az + m * (one - io)), sc);
                push("w_i >= alpha_i z - M(1-iota_i)", t, le(az - m * (one - io), part[t]), sc);
                push("w_i <= M iota_i", t, le(part[t], m * io), sc);
                push("w_i >= -M iota_i", t, le(-m * io, part[t]), sc);
            }
            // aPTT rows.
            let g = self.gammas;
            let yn = g.gamma1 * self.y[t] + (one - g.gamma1) * self.y_b[t] + zn;
            let ybn = g.gamma2 * self.y_b[t] + g.gamma3 * self.y[t] + g.gamma4 * self.yb;
            push("y recursion", t, (self.y[t + 1] - yn).abs(), yn);
            push("y_b recursion", t, (self.y_b[t + 1] - ybn).abs(), ybn);
        }
        out
    }

    /// Rows whose big-M term vanishes under the current indicators must hold on
    /// their own; returns the worst failure among them.
    pub fn tight_row_slack(&self) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..self.doses.len() {
            let (z, zn, w, bu) = (self.z[t], self.z[t + 1], self.w[t], self.b * self.doses[t]);
            let v = if self.nu[t] {
                [
                    zn - (z - self.c + bu),
                    (z - self.c + bu) - zn,
                    (self.c + w) - z,
                ]
            } else {
                [zn - (w + bu), (w + bu) - zn, z - (self.c + w)]
            };
            for x in v {
                worst = worst.max(x.f64());
            }
        }
        worst
    }

    /// Maps a feasible assignment back to `(alpha, k, x_0..=x_T)` and checks that
    /// the heparin path follows the original piecewise recursion.
    pub fn recover(&self, tol: R) -> Result<(R, R, Vec<R>), EstimationError> {
        let bad = self.violations(tol);
        if let Some(v) = bad.first() {
            return Err(EstimationError::InvalidInput(format!(
                "assignment violates '{}' at t = {} by {}",
                v.row, v.t, v.amount
            )));
        }
        let i = self.iota.iter().position(|&f| f).unwrap();
        let alpha = self.alphas[i];
        let k = self.c / self.b;
        let x: Vec<R> = self.z.iter().map(|&z| z / self.b).collect();
        let bp = breakpoint(alpha, k);
        for t in 0..self.doses.len() {
            let expect = if x[t] <= bp {
                self.doses[t] + alpha * x[t]
            } else {
                self.doses[t] + x[t] - k
            };
            if (expect - x[t + 1]).abs() > tol * (R::one() + expect.abs()) * R::lit(10.0) {
                return Err(EstimationError::InvalidInput(format!(
                    "recovered path breaks the kinetics at t = {t}"
                )));
            }
        }
        Ok((alpha, k, x))
    }
}
