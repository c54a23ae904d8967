//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use heparin_core::lp::{LpProblem, Sense};
use rand::Rng;

/// Dense Gaussian elimination with partial pivoting; `None` when singular.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-9 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Some(x)
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|s| s.count_ones() as usize == m)
        .map(|s| (0..n).filter(|&i| s >> i & 1 == 1).collect())
        .collect()
}

/// Optimum of a box-bounded LP by enumerating every basic solution: choose
/// `rows` basic columns, fix the rest at a bound, solve, keep feasible points.
/// `None` means no vertex is feasible.
pub fn vertex_oracle(p: &LpProblem<f64>) -> Option<f64> {
    let (m, n) = (p.rows, p.cols);
    let mut best: Option<f64> = None;
    for basis in subsets(n, m) {
        let nonbasic: Vec<usize> = (0..n).filter(|j| !basis.contains(j)).collect();
        for mask in 0u32..1 << nonbasic.len() {
            let mut x = vec![0.0; n];
            for (i, &j) in nonbasic.iter().enumerate() {
                x[j] = if mask >> i & 1 == 1 { p.upper[j] } else { p.lower[j] };
            }
            let a: Vec<Vec<f64>> = (0..m).map(|r| basis.iter().map(|&j| p.at(r, j)).collect()).collect();
            let rhs: Vec<f64> = (0..m)
                .map(|r| p.rhs[r] - nonbasic.iter().map(|&j| p.at(r, j) * x[j]).sum::<f64>())
                .collect();
            let Some(xb) = solve_dense(a, rhs) else { continue };
            for (&j, &v) in basis.iter().zip(&xb) {
                x[j] = v;
            }
            if (0..n).all(|j| x[j] >= p.lower[j] - 1e-9 && x[j] <= p.upper[j] + 1e-9) {
                let obj = p.objective(&x);
                best = Some(match (best, p.sense) {
                    (None, _) => obj,
                    (Some(b), Sense::Maximize) => b.max(obj),
                    (Some(b), Sense::Minimize) => b.min(obj),
                });
            }
        }
    }
    best
}

/// Random LP with finite boxes; feasible when `feasible` (rhs from an interior point).
pub fn random_box_lp<G: Rng>(rng: &mut G, feasible: bool) -> LpProblem<f64> {
    let n = rng.gen_range(2..=8);
    let m = rng.gen_range(1..=n.min(4));
    let a: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..1.0)).collect();
    let upper: Vec<f64> = lower.iter().map(|&l| l + rng.gen_range(0.5..6.0)).collect();
    let x0: Vec<f64> = lower.iter().zip(&upper).map(|(&l, &u)| rng.gen_range(l..u)).collect();
    let mut rhs: Vec<f64> = (0..m).map(|r| (0..n).map(|j| a[r * n + j] * x0[j]).sum()).collect();
    if !feasible {
        // Push row 0 beyond anything the box can reach.
        let reach: f64 = (0..n).map(|j| a[j].abs() * lower[j].abs().max(upper[j].abs())).sum();
        rhs[0] = reach + 10.0;
    }
    let cost: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let sense = if rng.gen_bool(0.5) { Sense::Maximize } else { Sense::Minimize };
    LpProblem::new(sense, cost, a, rhs, lower, upper).unwrap()
}

/// Fine-step RK4 integration of `dx/dt = -v_max x / (K + x)`, sampled hourly.
pub fn mm_rk4(v_max: f64, k_half: f64, x1: f64, hours: usize, substeps: usize) -> Vec<f64> {
    let f = |x: f64| -v_max * x / (k_half + x);
    let h = 1.0 / substeps as f64;
    let mut x = x1;
    let mut out = vec![x];
    for _ in 0..hours {
        for _ in 0..substeps {
            let k1 = f(x);
            let k2 = f(x + 0.5 * h * k1);
            let k3 = f(x + 0.5 * h * k2);
            let k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.push(x);
    }
    out
}

/// AUC as the Mann-Whitney probability that a positive outscores a negative,
/// ties counting one half. `None` without both classes.
pub fn mann_whitney_auc(scores: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

use heparin_core::dynamics::{laplace_noise, simulate, Domains, GlobalDecayRates, PatientParams};
use heparin_core::estimation::{EstimationDiagnostics, ObservationSeries, ScenarioEntry, ScenarioTable};
use heparin_core::lp::{solve_lp, LpStatus, Tolerances};

/// Exciting dose pattern: a new random rate every 6 hours plus occasional boluses.
pub fn excitation_doses<G: Rng>(hours: usize, u_max: f64, rng: &mut G) -> Vec<f64> {
    let mut rate = 0.0;
    (0..hours)
        .map(|h| {
            if h % 6 == 0 {
                rate = rng.gen_range(0.0..0.5 * u_max);
            }
            let bolus = if rng.gen_bool(0.08) { rng.gen_range(0.0..0.5 * u_max) } else { 0.0 };
            (rate + bolus).min(u_max)
        })
        .collect()
}

/// Noisy readings of a rollout every `spacing` hours (inclusive range), starting at hour 1.
#[allow(clippy::too_many_arguments)]
pub fn record<G: Rng>(
    params: &PatientParams<f64>,
    doses: &[f64],
    spacing: (usize, usize),
    noise: f64,
    gammas: &GlobalDecayRates<f64>,
    domains: &Domains<f64>,
    rng: &mut G,
) -> ObservationSeries<f64> {
    let y = simulate(params, gammas, doses, domains).unwrap().y();
    let mut obs = Vec::new();
    let mut t = 1;
    while t <= doses.len() {
        obs.push((t, (y[t] + laplace_noise(noise, rng)).max(0.0)));
        t += rng.gen_range(spacing.0..=spacing.1);
    }
    ObservationSeries::new(doses.to_vec(), obs, noise).unwrap()
}

/// Profile log-likelihood through the full primal LP: states, baseline and
/// residual splits are all variables, the recursion is a set of equality rows.
/// `None` when no state path stays inside `[0, y_max]`.
pub fn primal_profile(
    obs: &ObservationSeries<f64>,
    alpha: f64,
    b: f64,
    k: f64,
    gammas: &GlobalDecayRates<f64>,
    domains: &Domains<f64>,
) -> Option<f64> {
    let t_max = obs.doses.len();
    // x path with the same clamping at x_max as the rollout.
    let mut x = vec![0.0];
    for &u in &obs.doses {
        let prev = *x.last().unwrap();
        let bp = k / (1.0 - alpha);
        let next = if prev <= bp { u + alpha * prev } else { u + prev - k };
        x.push(next.clamp(0.0, domains.x_max));
    }
    let n = obs.observations.len();
    // Columns: y_0..y_T, yb_0..yb_T, yb, p_1..p_n, q_1..q_n.
    let (iy, ib, ih, ip, iq) = (0, t_max + 1, 2 * t_max + 2, 2 * t_max + 3, 2 * t_max + 3 + n);
    let cols = iq + n;
    let rows = 2 * t_max + n;
    let mut a = vec![0.0; rows * cols];
    let mut rhs = vec![0.0; rows];
    let g = gammas;
    for t in 0..t_max {
        // y_{t+1} - g1 y_t - (1 - g1) yb_t = b x_{t+1}
        let r = t;
        a[r * cols + iy + t + 1] = 1.0;
        a[r * cols + iy + t] = -g.gamma1;
        a[r * cols + ib + t] = -(1.0 - g.gamma1);
        rhs[r] = b * x[t + 1];
        // yb_{t+1} - g2 yb_t - g3 y_t - g4 yb = 0
        let r = t_max + t;
        a[r * cols + ib + t + 1] = 1.0;
        a[r * cols + ib + t] = -g.gamma2;
        a[r * cols + iy + t] = -g.gamma3;
        a[r * cols + ih] = -g.gamma4;
    }
    for (i, &(t, yo)) in obs.observations.iter().enumerate() {
        let r = 2 * t_max + i;
        a[r * cols + iy + t] = 1.0;
        a[r * cols + ip + i] = 1.0;
        a[r * cols + iq + i] = -1.0;
        rhs[r] = yo;
    }
    let mut cost = vec![0.0; cols];
    let mut upper = vec![domains.y_max; cols];
    for j in ip..cols {
        cost[j] = 1.0;
        upper[j] = f64::INFINITY;
    }
    let p = LpProblem::new(Sense::Minimize, cost, a, rhs, vec![0.0; cols], upper).unwrap();
    let s = solve_lp(&p, &Tolerances::default()).unwrap();
    match s.status {
        LpStatus::Optimal => {
            let sc = obs.noise_scale;
            Some(-s.objective / sc - n as f64 * (2.0 * sc).ln())
        }
        _ => None,
    }
}

/// Scenario table with the given unnormalized weights.
pub fn table(entries: &[(PatientParams<f64>, f64)]) -> ScenarioTable<f64> {
    let total: f64 = entries.iter().map(|e| e.1).sum();
    let max = entries.iter().map(|e| e.1).fold(0.0, f64::max);
    let map_index = entries.iter().position(|e| e.1 == max).unwrap();
    ScenarioTable {
        scenarios: entries
            .iter()
            .map(|&(p, w)| ScenarioEntry {
                alpha: p.alpha,
                b: p.b,
                params: Some(p),
                log_weight: if w > 0.0 { Some((w / max).ln()) } else { None },
                raw_weight: w / max,
                weight: w / total,
            })
            .collect(),
        map_index,
        max_log_weight: 0.0,
        diagnostics: EstimationDiagnostics::default(),
    }
}

