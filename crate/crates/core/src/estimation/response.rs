//! Linear structure of the aPTT recursion.
//!
//! With heparin path `x` and response `b`, every state is
//! `s_t = G_t theta + b H_t(x)` where `theta = (y0, yb0, yb)`.

use crate::dynamics::{heparin_step, GlobalDecayRates, KineticMode};
use crate::real::Real;

#[derive(Debug, Clone)]
pub(crate) struct AffineModel<R> {
    pub gammas: GlobalDecayRates<R>,
    /// Rows of `G` for `y_t` and `y_b,t`, `t = 0..=T`.
    pub gy: Vec<[R; 3]>,
    pub gb: Vec<[R; 3]>,
}

impl<R: Real> AffineModel<R> {
    pub fn new(gammas: GlobalDecayRates<R>, horizon: usize) -> Self {
        let g = gammas;
        let mut gy = Vec::with_capacity(horizon + 1);
        let mut gb = Vec::with_capacity(horizon + 1);
        let (o, z) = (R::one(), R::zero());
        gy.push([o, z, z]);
        gb.push([z, o, z]);
        for t in 0..horizon {
            let (py, pb) = (gy[t], gb[t]);
            let mut ny = [z; 3];
            let mut nb = [z; 3];
            for j in 0..3 {
                ny[j] = g.gamma1 * py[j] + (o - g.gamma1) * pb[j];
                nb[j] = g.gamma3 * py[j] + g.gamma2 * pb[j];
            }
            nb[2] += g.gamma4;
            gy.push(ny);
            gb.push(nb);
        }
        Self { gammas, gy, gb }
    }

    /// Heparin path `x_0..=x_T` (clamped to `[0, x_max]`) and the leg used at each step.
    pub fn x_path(&self, doses: &[R], alpha: R, k: R, x_max: R) -> (Vec<R>, Vec<KineticMode>) {
        let mut x = Vec::with_capacity(doses.len() + 1);
        let mut modes = Vec::with_capacity(doses.len());
        let mut cur = R::zero();
        x.push(cur);
        for &u in doses {
            let (nx, mode) = heparin_step(cur, u, alpha, k);
            cur = nx.max(R::zero()).min(x_max);
            x.push(cur);
            modes.push(mode);
        }
        (x, modes)
    }

    /// State response to heparin path `x` with `theta = 0` and `b = 1`.
    pub fn response(&self, x: &[R]) -> (Vec<R>, Vec<R>) {
        let g = self.gammas;
        let n = x.len();
        let mut hy = vec![R::zero(); n];
        let mut hb = vec![R::zero(); n];
        for t in 1..n {
            hy[t] = g.gamma1 * hy[t - 1] + (R::one() - g.gamma1) * hb[t - 1] + x[t];
            hb[t] = g.gamma3 * hy[t - 1] + g.gamma2 * hb[t - 1];
        }
        (hy, hb)
    }

    /// `lambda` with `sum_t cy_t Hy_t + cb_t Hb_t = sum_t lambda_t x_t` for every path `x`.
    pub fn adjoint(&self, cy: &[R], cb: &[R]) -> Vec<R> {
        let g = self.gammas;
        let n = cy.len();
        let mut lambda = vec![R::zero(); n];
        let (mut py, mut pb) = (R::zero(), R::zero());
        for t in (1..n).rev() {
            // p_t = c_t + A' p_{t+1}
            let ny = cy[t] + g.gamma1 * py + g.gamma3 * pb;
            let nb = cb[t] + (R::one() - g.gamma1) * py + g.gamma2 * pb;
            py = ny;
            pb = nb;
            lambda[t] = py;
        }
        lambda
    }

    #[inline]
    pub fn dot3(a: &[R; 3], th: &[R; 3]) -> R {
        a[0] * th[0] + a[1] * th[1] + a[2] * th[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, Domains, PatientParams};

    #[test]
    fn affine_decomposition_matches_rollout() {
        let g = GlobalDecayRates::default();
        let doses: Vec<f64> = (0..30).map(|h| [900.0, 0.0, 450.0, 1200.0][h % 4]).collect();
        let p = PatientParams {
            alpha: 0.63,
            k: 700.0,
            b: 0.003,
            y0: 33.0,
            yb0: 29.0,
            yb: 31.0,
        };
        let dom = Domains {
            b_range: (1e-4, 10.0),
            ..Domains::default()
        };
        let tr = simulate(&p, &g, &doses, &dom).unwrap();
        assert!(!tr.any_clamped());
        let m = AffineModel::new(g, doses.len());
        let (x, _) = m.x_path(&doses, p.alpha, p.k, dom.x_max);
        let (hy, hb) = m.response(&x);
        let th = [p.y0, p.yb0, p.yb];
        for t in 0..=doses.len() {
            let y = AffineModel::dot3(&m.gy[t], &th) + p.b * hy[t];
            let yb = AffineModel::dot3(&m.gb[t], &th) + p.b * hb[t];
            assert!((y - tr.states[t].y).abs() < 1e-10);
            assert!((yb - tr.states[t].y_b).abs() < 1e-10);
            assert_eq!(x[t], tr.states[t].x);
        }
    }

    #[test]
    fn adjoint_matches_forward_sum() {
        let m = AffineModel::new(GlobalDecayRates::<f64>::default(), 12);
        let x: Vec<f64> = (0..13).map(|t| if t == 0 { 0.0 } else { (t * 37 % 11) as f64 }).collect();
        let cy: Vec<f64> = (0..13).map(|t| ((t * 7) % 5) as f64 - 2.0).collect();
        let cb: Vec<f64> = (0..13).map(|t| ((t * 3) % 4) as f64 * 0.5).collect();
        let (hy, hb) = m.response(&x);
        let direct: f64 = (0..13).map(|t| cy[t] * hy[t] + cb[t] * hb[t]).sum();
        let lam = m.adjoint(&cy, &cb);
        let via: f64 = (0..13).map(|t| lam[t] * x[t]).sum();
        assert!((direct - via).abs() < 1e-9);
    }
}
