//! Dense bounded-variable primal simplex.
//!
//! Problems are in equality form `A x = b`, `l <= x <= u` with possibly infinite
//! bounds. The solver keeps a full tableau `B^-1 A`, starts from a crash basis
//! of singleton columns (artificials only where needed), and runs phase 1 then
//! phase 2. Pricing is Dantzig's rule with lowest-index ties; after a run of
//! degenerate pivots it switches to Bland's rule for the rest of the phase.
//!
//! Every optimal answer is checked after the fact: primal residual, bound
//! violation and the gap between the primal objective and the bound-aware dual
//! objective.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("invalid LP input: {0}")]
    InvalidInput(String),
    #[error("simplex hit the iteration cap ({0})")]
    IterationLimit(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Minimize,
    Maximize,
}

/// `opt c'x  s.t.  A x = rhs,  lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem<R> {
    pub sense: Sense,
    pub cost: Vec<R>,
    /// Row-major `rows x cols`.
    pub a: Vec<R>,
    pub rows: usize,
    pub cols: usize,
    pub rhs: Vec<R>,
    pub lower: Vec<R>,
    pub upper: Vec<R>,
}

impl<R: Real> LpProblem<R> {
    pub fn new(
        sense: Sense,
        cost: Vec<R>,
        a: Vec<R>,
        rhs: Vec<R>,
        lower: Vec<R>,
        upper: Vec<R>,
    ) -> Result<Self, LpError> {
        let cols = cost.len();
        let rows = rhs.len();
        let p = Self {
            sense,
            cost,
            a,
            rows,
            cols,
            rhs,
            lower,
            upper,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let bad = |m: String| Err(LpError::InvalidInput(m));
        if self.cost.len() != self.cols {
            return bad(format!("cost has {} entries, expected {}", self.cost.len(), self.cols));
        }
        if self.a.len() != self.rows * self.cols {
            return bad(format!(
                "matrix has {} entries, expected {}x{}",
                self.a.len(),
                self.rows,
                self.cols
            ));
        }
        if self.rhs.len() != self.rows {
            return bad(format!("rhs has {} entries, expected {}", self.rhs.len(), self.rows));
        }
        if self.lower.len() != self.cols || self.upper.len() != self.cols {
            return bad("bound vectors must match the column count".into());
        }
        for j in 0..self.cols {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l > u || l == R::infinity() || u == R::neg_infinity() {
                return bad(format!("column {j}: bounds [{l}, {u}] are empty"));
            }
            if !self.cost[j].is_finite() {
                return bad(format!("column {j}: cost is not finite"));
            }
        }
        if self.a.iter().chain(&self.rhs).any(|v| !v.is_finite()) {
            return bad("matrix and rhs must be finite".into());
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> R {
        self.a[i * self.cols + j]
    }

    pub fn objective(&self, x: &[R]) -> R {
        self.cost.iter().zip(x).map(|(&c, &v)| c * v).sum()
    }

    /// `max |A x - rhs|` and the worst bound violation.
    pub fn residuals(&self, x: &[R]) -> (R, R) {
        let mut row_res = R::zero();
        for i in 0..self.rows {
            let mut s = -self.rhs[i];
            for j in 0..self.cols {
                s += self.at(i, j) * x[j];
            }
            row_res = row_res.max(s.abs());
        }
        let mut bound = R::zero();
        for j in 0..self.cols {
            bound = bound.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        (row_res, bound)
    }

    /// For a row vector `y`, returns `y'rhs - max_{l<=x<=u} y'A x`.
    ///
    /// A strictly positive value proves the problem infeasible.
    pub fn farkas_margin(&self, y: &[R]) -> R {
        let mut m: R = y.iter().zip(&self.rhs).map(|(&a, &b)| a * b).sum();
        for j in 0..self.cols {
            let mut w = R::zero();
            for i in 0..self.rows {
                w += y[i] * self.at(i, j);
            }
            if w > R::zero() {
                m -= w * self.upper[j];
            } else if w < R::zero() {
                m -= w * self.lower[j];
            }
        }
        if m.is_nan() {
            R::neg_infinity()
        } else {
            m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances<R> {
    pub feas: R,
    pub dual_gap: R,
    pub pivot: R,
    /// Iteration cap; `0` means `50 (rows + cols) + 1000`.
    pub max_iter: usize,
    /// Consecutive degenerate pivots before Bland's rule takes over.
    pub degenerate_switch: usize,
}

impl<R: Real> Default for Tolerances<R> {
    fn default() -> Self {
        if R::is_double() {
            Self {
                feas: R::lit(1e-8),
                dual_gap: R::lit(1e-7),
                pivot: R::lit(1e-10),
                max_iter: 0,
                degenerate_switch: 30,
            }
        } else {
            Self {
                feas: R::lit(1e-4),
                dual_gap: R::lit(1e-3),
                pivot: R::lit(1e-6),
                max_iter: 0,
                degenerate_switch: 30,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<R> {
    pub status: LpStatus,
    /// Final primal point (phase-1 end point when infeasible).
    pub x: Vec<R>,
    /// Objective in the caller's sense.
    pub objective: R,
    /// Sensitivity of the optimal objective to `rhs`.
    pub duals: Vec<R>,
    /// `c - A'y` in the caller's sense.
    pub reduced_costs: Vec<R>,
    /// Row vector `y` with `farkas_margin(y) > 0` when infeasible.
    pub farkas: Option<Vec<R>>,
    /// Direction `d` with `A d = 0`, inside the bound recession cone, improving the objective.
    pub ray: Option<Vec<R>>,
    pub iterations: usize,
    pub primal_residual: R,
    pub duality_gap: R,
    pub basis: Vec<usize>,
}

static SOLVES: AtomicU64 = AtomicU64::new(0);
static MAX_GAP_BITS: AtomicU64 = AtomicU64::new(0);

/// Process-wide solver counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpStats {
    pub solves: u64,
    pub max_duality_gap: f64,
}

pub fn stats() -> LpStats {
    LpStats {
        solves: SOLVES.load(Ordering::Relaxed),
        max_duality_gap: f64::from_bits(MAX_GAP_BITS.load(Ordering::Relaxed)),
    }
}

fn record(gap: f64) {
    SOLVES.fetch_add(1, Ordering::Relaxed);
    // Nonnegative doubles order the same way as their bit patterns.
    let g = if gap.is_finite() { gap.max(0.0) } else { f64::MAX };
    MAX_GAP_BITS.fetch_max(g.to_bits(), Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Basic,
    Lower,
    Upper,
    /// Nonbasic free variable sitting at zero.
    Zero,
    /// Retired artificial, never enters again.
    Retired,
}

struct Tableau<R> {
    m: usize,
    n: usize,
    /// Structural column count; columns `>= ns` are artificials.
    ns: usize,
    t: Vec<R>,
    beta: Vec<R>,
    basis: Vec<usize>,
    pos: Vec<Pos>,
    lo: Vec<R>,
    up: Vec<R>,
    d: Vec<R>,
    /// Initial basic column of each row and its scale `B0[i][i]`.
    init_col: Vec<usize>,
    init_scale: Vec<R>,
}

enum Outcome {
    Optimal,
    Unbounded { col: usize, dir: i8 },
}

impl<R: Real> Tableau<R> {
    #[inline]
    fn nb_value(&self, j: usize) -> R {
        match self.pos[j] {
            Pos::Lower => self.lo[j],
            Pos::Upper => self.up[j],
            _ => R::zero(),
        }
    }

    fn x(&self) -> Vec<R> {
        let mut x: Vec<R> = (0..self.n).map(|j| self.nb_value(j)).collect();
        for (i, &j) in self.basis.iter().enumerate() {
            x[j] = self.beta[i];
        }
        x
    }

    fn price(&mut self, c: &[R]) {
        for j in 0..self.n {
            let mut s = c[j];
            for i in 0..self.m {
                s -= c[self.basis[i]] * self.t[i * self.n + j];
            }
            self.d[j] = s;
        }
        for &j in &self.basis {
            self.d[j] = R::zero();
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let n = self.n;
        let piv = self.t[r * n + q];
        for j in 0..n {
            self.t[r * n + j] /= piv;
        }
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * n + q];
            if f != R::zero() {
                for j in 0..n {
                    let v = self.t[r * n + j];
                    if v != R::zero() {
                        self.t[i * n + j] -= f * v;
                    }
                }
                self.t[i * n + q] = R::zero();
            }
        }
        let dq = self.d[q];
        if dq != R::zero() {
            for j in 0..n {
                let v = self.t[r * n + j];
                if v != R::zero() {
                    self.d[j] -= dq * v;
                }
            }
        }
        self.d[q] = R::zero();
    }

    /// Minimizes `c'x` from the current basis.
    fn run(&mut self, c: &[R], tol: &Tolerances<R>, cap: usize, iters: &mut usize) -> Result<Outcome, LpError> {
        self.price(c);
        let mut degenerate = 0usize;
        let mut bland = false;
        let dtol = tol.feas;
        loop {
            // Pricing.
            let mut best: Option<(usize, i8)> = None;
            let mut best_mag = R::zero();
            for j in 0..self.n {
                let dj = self.d[j];
                let dir: i8 = match self.pos[j] {
                    Pos::Basic | Pos::Retired => continue,
                    Pos::Lower if dj < -dtol => 1,
                    Pos::Upper if dj > dtol => -1,
                    Pos::Zero if dj.abs() > dtol => {
                        if dj < R::zero() {
                            1
                        } else {
                            -1
                        }
                    }
                    _ => continue,
                };
                if self.lo[j] == self.up[j] {
                    continue;
                }
                if bland {
                    best = Some((j, dir));
                    break;
                }
                if dj.abs() > best_mag {
                    best_mag = dj.abs();
                    best = Some((j, dir));
                }
            }
            let Some((q, dir)) = best else {
                return Ok(Outcome::Optimal);
            };
            *iters += 1;
            if *iters > cap {
                return Err(LpError::IterationLimit(cap));
            }
            let sd = if dir > 0 { R::one() } else { -R::one() };
            // Ratio test: x_B changes at rate -dir * t[i][q].
            let mut step = if self.lo[q].is_finite() && self.up[q].is_finite() {
                self.up[q] - self.lo[q]
            } else {
                R::infinity()
            };
            let mut leave: Option<(usize, bool)> = None;
            let mut leave_mag = R::zero();
            for i in 0..self.m {
                let a = self.t[i * self.n + q];
                if a.abs() <= tol.pivot {
                    continue;
                }
                let rate = -sd * a;
                let j = self.basis[i];
                let (lim, to_upper) = if rate < R::zero() {
                    if !self.lo[j].is_finite() {
                        continue;
                    }
                    (((self.beta[i] - self.lo[j]) / -rate).max(R::zero()), false)
                } else {
                    if !self.up[j].is_finite() {
                        continue;
                    }
                    (((self.up[j] - self.beta[i]) / rate).max(R::zero()), true)
                };
                let better = match leave {
                    None => lim < step,
                    Some((r, _)) => {
                        if lim < step {
                            true
                        } else if lim == step {
                            if bland {
                                j < self.basis[r]
                            } else {
                                a.abs() > leave_mag
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    step = lim;
                    leave = Some((i, to_upper));
                    leave_mag = a.abs();
                }
            }
            if step == R::infinity() {
                return Ok(Outcome::Unbounded { col: q, dir });
            }
            if step <= tol.feas * R::lit(1e-3) {
                degenerate += 1;
                if degenerate >= tol.degenerate_switch {
                    bland = true;
                }
            } else {
                degenerate = 0;
            }
            let entering_val = match self.pos[q] {
                Pos::Lower => self.lo[q],
                Pos::Upper => self.up[q],
                _ => R::zero(),
            } + sd * step;
            for i in 0..self.m {
                let a = self.t[i * self.n + q];
                if a != R::zero() {
                    self.beta[i] -= sd * step * a;
                }
            }
            match leave {
                None => {
                    // Bound flip of the entering column.
                    self.pos[q] = if dir > 0 { Pos::Upper } else { Pos::Lower };
                }
                Some((r, to_upper)) => {
                    let j = self.basis[r];
                    self.pos[j] = if j >= self.ns {
                        Pos::Retired
                    } else if to_upper {
                        Pos::Upper
                    } else {
                        Pos::Lower
                    };
                    self.pivot(r, q);
                    self.basis[r] = q;
                    self.pos[q] = Pos::Basic;
                    self.beta[r] = entering_val;
                }
            }
        }
    }

    /// Row multipliers `c_B' B^-1`, read off the initial basis columns.
    fn duals(&self, c: &[R]) -> Vec<R> {
        (0..self.m)
            .map(|i| {
                let j0 = self.init_col[i];
                (c[j0] - self.d[j0]) / self.init_scale[i]
            })
            .collect()
    }
}

/// Solves `B z = r` by Gaussian elimination with partial pivoting.
fn dense_solve<R: Real>(mut b: Vec<R>, mut r: Vec<R>, m: usize) -> Option<Vec<R>> {
    for c in 0..m {
        let p = (c..m).max_by(|&i, &k| b[i * m + c].abs().partial_cmp(&b[k * m + c].abs()).unwrap())?;
        if b[p * m + c].abs() < R::lit(1e-300).max(R::min_positive_value()) {
            return None;
        }
        if p != c {
            for j in 0..m {
                b.swap(p * m + j, c * m + j);
            }
            r.swap(p, c);
        }
        for i in c + 1..m {
            let f = b[i * m + c] / b[c * m + c];
            if f != R::zero() {
                for j in c..m {
                    let v = b[c * m + j];
                    b[i * m + j] -= f * v;
                }
                let rc = r[c];
                r[i] -= f * rc;
            }
        }
    }
    let mut z = vec![R::zero(); m];
    for i in (0..m).rev() {
        let mut s = r[i];
        for j in i + 1..m {
            s -= b[i * m + j] * z[j];
        }
        z[i] = s / b[i * m + i];
    }
    Some(z)
}

/// Solves `problem` with the bounded-variable simplex method.
pub fn solve_lp<R: Real>(problem: &LpProblem<R>, tol: &Tolerances<R>) -> Result<LpSolution<R>, LpError> {
    problem.validate()?;
    let (m, ns) = (problem.rows, problem.cols);
    let sign = match problem.sense {
        Sense::Minimize => R::one(),
        Sense::Maximize => -R::one(),
    };

    // Nonbasic starting values.
    let mut pos = Vec::with_capacity(ns + m);
    let mut x0 = vec![R::zero(); ns];
    for j in 0..ns {
        let (l, u) = (problem.lower[j], problem.upper[j]);
        if l.is_finite() {
            pos.push(Pos::Lower);
            x0[j] = l;
        } else if u.is_finite() {
            pos.push(Pos::Upper);
            x0[j] = u;
        } else {
            pos.push(Pos::Zero);
        }
    }
    let mut resid = problem.rhs.clone();
    for i in 0..m {
        for j in 0..ns {
            resid[i] -= problem.at(i, j) * x0[j];
        }
    }

    // Crash: singleton columns whose implied value is within bounds.
    let mut nnz = vec![0usize; ns];
    let mut row_of = vec![0usize; ns];
    for j in 0..ns {
        for i in 0..m {
            if problem.at(i, j) != R::zero() {
                nnz[j] += 1;
                row_of[j] = i;
            }
        }
    }
    let mut init_col = vec![usize::MAX; m];
    let mut init_scale = vec![R::zero(); m];
    let mut beta = vec![R::zero(); m];
    let slack = tol.feas * R::lit(1e-2);
    for j in 0..ns {
        if nnz[j] != 1 {
            continue;
        }
        let i = row_of[j];
        if init_col[i] != usize::MAX {
            continue;
        }
        let a = problem.at(i, j);
        if a.abs() <= tol.pivot {
            continue;
        }
        let v = x0[j] + resid[i] / a;
        if v >= problem.lower[j] - slack && v <= problem.upper[j] + slack {
            init_col[i] = j;
            init_scale[i] = a;
            beta[i] = v.max(problem.lower[j]).min(problem.upper[j]);
            pos[j] = Pos::Basic;
        }
    }
    let mut art_rows = Vec::new();
    for i in 0..m {
        if init_col[i] == usize::MAX {
            art_rows.push(i);
        }
    }
    let n = ns + art_rows.len();
    let mut lo = problem.lower.clone();
    let mut up = problem.upper.clone();
    let mut t = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..ns {
            t[i * n + j] = problem.at(i, j);
        }
    }
    for (k, &i) in art_rows.iter().enumerate() {
        let j = ns + k;
        let s = if resid[i] >= R::zero() { R::one() } else { -R::one() };
        t[i * n + j] = s;
        init_col[i] = j;
        init_scale[i] = s;
        beta[i] = resid[i].abs();
        lo.push(R::zero());
        up.push(R::infinity());
        pos.push(Pos::Basic);
    }
    for i in 0..m {
        let s = init_scale[i];
        for j in 0..n {
            t[i * n + j] /= s;
        }
    }
    let basis = init_col.clone();
    let mut tab = Tableau {
        m,
        n,
        ns,
        t,
        beta,
        basis,
        pos,
        lo,
        up,
        d: vec![R::zero(); n],
        init_col,
        init_scale,
    };
    let cap = if tol.max_iter == 0 {
        50 * (m + n) + 1000
    } else {
        tol.max_iter
    };
    let mut iters = 0usize;

    if !art_rows.is_empty() {
        let mut c1 = vec![R::zero(); n];
        for c in c1.iter_mut().skip(ns) {
            *c = R::one();
        }
        match tab.run(&c1, tol, cap, &mut iters)? {
            Outcome::Optimal => {}
            Outcome::Unbounded { .. } => {
                return Err(LpError::Numerical("phase 1 reported unbounded".into()));
            }
        }
        let w: R = tab.x()[ns..].iter().copied().sum();
        if w > tol.feas {
            // Phase-1 multipliers: y'rhs - max y'Ax equals the residual infeasibility.
            let y: Vec<R> = tab.duals(&c1);
            let x = tab.x()[..ns].to_vec();
            let (res, _) = problem.residuals(&x);
            record(0.0);
            let farkas = if problem.farkas_margin(&y) > R::zero() {
                Some(y)
            } else {
                None
            };
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                objective: problem.objective(&x),
                x,
                duals: vec![R::zero(); m],
                reduced_costs: vec![R::zero(); ns],
                farkas,
                ray: None,
                iterations: iters,
                primal_residual: res,
                duality_gap: R::zero(),
                basis: tab.basis.clone(),
            });
        }
        for j in ns..n {
            tab.up[j] = R::zero();
            if tab.pos[j] != Pos::Basic {
                tab.pos[j] = Pos::Retired;
            }
        }
    }

    let mut c2: Vec<R> = problem.cost.iter().map(|&c| sign * c).collect();
    c2.resize(n, R::zero());
    let outcome = tab.run(&c2, tol, cap, &mut iters)?;
    if let Outcome::Unbounded { col, dir } = outcome {
        let sd = if dir > 0 { R::one() } else { -R::one() };
        let mut ray = vec![R::zero(); ns];
        if col < ns {
            ray[col] = sd;
        }
        for i in 0..m {
            let j = tab.basis[i];
            if j < ns {
                ray[j] = -sd * tab.t[i * n + col];
            }
        }
        let x = tab.x()[..ns].to_vec();
        let (res, _) = problem.residuals(&x);
        record(0.0);
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            objective: problem.objective(&x),
            x,
            duals: vec![R::zero(); m],
            reduced_costs: vec![R::zero(); ns],
            farkas: None,
            ray: Some(ray),
            iterations: iters,
            primal_residual: res,
            duality_gap: R::zero(),
            basis: tab.basis.clone(),
        });
    }

    let mut xfull = tab.x();
    let mut y = tab.duals(&c2);
    // Refactor from the original data when the tableau has drifted.
    let (res0, _) = problem.residuals(&xfull[..ns]);
    if res0 > tol.feas * R::lit(0.1) {
        let cols_b: Vec<usize> = tab.basis.clone();
        let mut bmat = vec![R::zero(); m * m];
        for i in 0..m {
            for (k, &j) in cols_b.iter().enumerate() {
                bmat[i * m + k] = if j < ns {
                    problem.at(i, j)
                } else {
                    let r = art_rows[j - ns];
                    if r == i {
                        tab.init_scale[i]
                    } else {
                        R::zero()
                    }
                };
            }
        }
        let mut r = problem.rhs.clone();
        for j in 0..ns {
            if tab.pos[j] != Pos::Basic {
                let v = xfull[j];
                if v != R::zero() {
                    for i in 0..m {
                        r[i] -= problem.at(i, j) * v;
                    }
                }
            }
        }
        if let Some(z) = dense_solve(bmat.clone(), r, m) {
            for (k, &j) in cols_b.iter().enumerate() {
                xfull[j] = z[k];
            }
        }
        let mut bt = vec![R::zero(); m * m];
        for i in 0..m {
            for k in 0..m {
                bt[k * m + i] = bmat[i * m + k];
            }
        }
        let cb: Vec<R> = cols_b.iter().map(|&j| c2[j]).collect();
        if let Some(z) = dense_solve(bt, cb, m) {
            y = z;
        }
    }
    let x = xfull[..ns].to_vec();
    let (res, bviol) = problem.residuals(&x);

    // Reduced costs from the original data, minimization sense.
    let mut dcost = vec![R::zero(); ns];
    for j in 0..ns {
        let mut s = c2[j];
        for i in 0..m {
            s -= y[i] * problem.at(i, j);
        }
        dcost[j] = s;
    }
    let primal = problem.objective(&x) * sign;
    let mut dual: R = y.iter().zip(&problem.rhs).map(|(&a, &b)| a * b).sum();
    for j in 0..ns {
        let dj = dcost[j];
        let bound = if tab.pos[j] == Pos::Basic || dj == R::zero() {
            x[j]
        } else if dj > R::zero() {
            problem.lower[j]
        } else {
            problem.upper[j]
        };
        if bound.is_finite() {
            dual += dj * bound;
        } else if dj.abs() <= tol.feas {
            dual += dj * x[j];
        } else {
            dual = R::neg_infinity();
        }
    }
    let gap = if dual.is_finite() {
        (primal - dual).abs()
    } else {
        R::infinity()
    };
    record(gap.f64());
    let scale = R::one() + primal.abs();
    if res > tol.feas * scale.max(R::lit(10.0)) || bviol > tol.feas * R::lit(10.0) {
        return Err(LpError::Numerical(format!(
            "optimal basis violates constraints (residual {res}, bounds {bviol})"
        )));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective: problem.objective(&x),
        x,
        duals: y.into_iter().map(|v| v * sign).collect(),
        reduced_costs: dcost.into_iter().map(|v| v * sign).collect(),
        farkas: None,
        ray: None,
        iterations: iters,
        primal_residual: res,
        duality_gap: gap,
        basis: tab.basis.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn max_single_var() {
        // max x s.t. x + s = 1, x, s >= 0
        let p = LpProblem::new(
            Sense::Maximize,
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0],
            vec![0.0, 0.0],
            vec![INF, INF],
        )
        .unwrap();
        let s = solve_lp(&p, &Tolerances::default()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.objective - 1.0).abs() < 1e-12);
        assert!((s.duals[0] - 1.0).abs() < 1e-12);
        assert!(s.duality_gap < 1e-9);
    }

    #[test]
    fn infeasible_with_certificate() {
        // x + s = -1, x, s >= 0
        let p = LpProblem::new(
            Sense::Minimize,
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![-1.0],
            vec![0.0, 0.0],
            vec![INF, INF],
        )
        .unwrap();
        let s = solve_lp(&p, &Tolerances::default()).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
        let y = s.farkas.unwrap();
        assert!(p.farkas_margin(&y) > 1e-8);
    }

    #[test]
    fn unbounded_ray() {
        // max x s.t. x - s = 1
        let p = LpProblem::new(
            Sense::Maximize,
            vec![1.0, 0.0],
            vec![1.0, -1.0],
            vec![1.0],
            vec![0.0, 0.0],
            vec![INF, INF],
        )
        .unwrap();
        let s = solve_lp(&p, &Tolerances::default()).unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
        let d = s.ray.unwrap();
        assert!((d[0] - d[1]).abs() < 1e-12 && d[0] > 0.0);
    }

    #[test]
    fn free_and_boxed_columns() {
        // min |x - 3| with x free via x - p + q = 3, p,q >= 0, x in [-inf, 2]
        let p = LpProblem::new(
            Sense::Minimize,
            vec![0.0, 1.0, 1.0],
            vec![1.0, -1.0, 1.0],
            vec![3.0],
            vec![-INF, 0.0, 0.0],
            vec![2.0, INF, INF],
        )
        .unwrap();
        let s = solve_lp(&p, &Tolerances::default()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-12);
        assert!((s.x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed() {
        assert!(LpProblem::new(Sense::Minimize, vec![1.0], vec![1.0, 2.0], vec![1.0], vec![0.0], vec![1.0]).is_err());
        assert!(LpProblem::new(Sense::Minimize, vec![1.0], vec![1.0], vec![1.0], vec![2.0], vec![1.0]).is_err());
    }

    #[test]
    fn single_precision() {
        let p = LpProblem::<f32>::new(
            Sense::Maximize,
            vec![3.0, 2.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0, 1.0, 3.0, 0.0, 1.0],
            vec![4.0, 6.0],
            vec![0.0; 4],
            vec![f32::INFINITY; 4],
        )
        .unwrap();
        let s = solve_lp(&p, &Tolerances::default()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - 12.0).abs() < 1e-4);
    }
}
