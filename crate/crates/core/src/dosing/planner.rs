use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, simulate, Domains, GlobalDecayRates, PatientParams, PatientState};
use crate::estimation::{EstimateResult, ScenarioTable};
use crate::real::Real;

use super::{DosePlan, DosingError, LossSpec, PlanMode, ScenarioLoss};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig<R> {
    /// Planned hours `n`.
    pub horizon: usize,
    /// Mesh spacing, IU per hour.
    pub dose_step: R,
    pub mode: PlanMode,
    /// Cap on coordinate-descent sweeps per start.
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
}

fn default_sweeps() -> usize {
    50
}

impl<R: Real> Default for PlannerConfig<R> {
    fn default() -> Self {
        Self {
            horizon: 6,
            dose_step: R::lit(100.0),
            mode: PlanMode::MeshSearch,
            max_sweeps: default_sweeps(),
        }
    }
}

impl<R: Real> PlannerConfig<R> {
    pub fn validate(&self) -> Result<(), DosingError> {
        if self.horizon == 0 {
            return Err(DosingError::InvalidInput("horizon must be at least one hour".into()));
        }
        if !(self.dose_step > R::zero() && self.dose_step.is_finite()) {
            return Err(DosingError::InvalidInput("dose step must be positive".into()));
        }
        Ok(())
    }
}

/// `{0, step, 2 step, ...}` up to `u_max`.
pub fn dose_levels<R: Real>(step: R, u_max: R) -> Vec<R> {
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let v = step * R::from_usize(i).unwrap();
        if v > u_max * (R::one() + R::lit(1e-12)) {
            break;
        }
        out.push(v.min(u_max));
        i += 1;
    }
    out
}

/// The part of `prev` still ahead after `elapsed` hours, padded with its last
/// dose to `n` hours.
pub fn shift_plan<R: Real>(prev: &[R], elapsed: usize, n: usize) -> Vec<R> {
    let last = prev.last().copied().unwrap_or(R::zero());
    let mut out: Vec<R> = prev.iter().skip(elapsed).take(n).copied().collect();
    out.resize(n, last);
    out
}

fn check_doses<R: Real>(doses: &[R], domains: &Domains<R>, what: &str) -> Result<(), DosingError> {
    for (i, &u) in doses.iter().enumerate() {
        if !(u >= R::zero() && u <= domains.u_max) {
            return Err(DosingError::InvalidInput(format!("{what} dose {i} = {u} outside [0, u_max]")));
        }
    }
    Ok(())
}

/// Loss of `candidate` for one fully specified scenario: the model is rolled from
/// hour 0 over `past_doses` followed by `candidate`, and the hourly loss is
/// summed over the candidate's hours using the scenario's own `yb`.
pub fn scenario_loss<R: Real>(
    params: &PatientParams<R>,
    past_doses: &[R],
    candidate: &[R],
    loss: &LossSpec<R>,
    gammas: &GlobalDecayRates<R>,
    domains: &Domains<R>,
) -> Result<R, DosingError> {
    loss.validate()?;
    check_doses(candidate, domains, "candidate")?;
    let all: Vec<R> = past_doses.iter().chain(candidate).copied().collect();
    let tr = simulate(params, gammas, &all, domains)?;
    let t0 = past_doses.len();
    let mut total = R::zero();
    for s in &tr.states[t0 + 1..] {
        total += loss.hour(s.y, params.yb);
    }
    Ok(total)
}

struct Prepared<R> {
    params: PatientParams<R>,
    weight: R,
    start: PatientState<R>,
}

struct Objective<'a, R> {
    scen: Vec<Prepared<R>>,
    total_weight: R,
    loss: &'a LossSpec<R>,
    gammas: &'a GlobalDecayRates<R>,
    domains: &'a Domains<R>,
}

impl<R: Real> Objective<'_, R> {
    /// Continues scenario `s` from `state` with running loss `acc`.
    #[inline]
    fn roll(&self, s: usize, mut state: PatientState<R>, mut acc: R, doses: &[R]) -> R {
        let p = &self.scen[s];
        for &u in doses {
            state = advance(&state, u, &p.params, self.gammas, self.domains).state;
            acc += self.loss.hour(state.y, p.params.yb);
        }
        acc
    }

    fn per_scenario(&self, doses: &[R]) -> Vec<R> {
        (0..self.scen.len())
            .map(|s| self.roll(s, self.scen[s].start, R::zero(), doses))
            .collect()
    }

    fn combine(&self, losses: &[R]) -> R {
        let mut acc = R::zero();
        for (p, &l) in self.scen.iter().zip(losses) {
            acc += p.weight * l;
        }
        acc / self.total_weight
    }

    fn value(&self, doses: &[R]) -> R {
        self.combine(&self.per_scenario(doses))
    }

    /// Coordinate descent to a fixed point; each coordinate moves to its best
    /// level, ties to the smallest level.
    fn descend(&self, mut doses: Vec<R>, levels: &[R], max_sweeps: usize) -> (Vec<R>, R) {
        let n = doses.len();
        let m = self.scen.len();
        let mut best = self.value(&doses);
        for _ in 0..max_sweeps {
            let mut changed = false;
            for i in 0..n {
                // States and running losses after the first i hours.
                let mut states = Vec::with_capacity(m);
                let mut prefix = Vec::with_capacity(m);
                for s in 0..m {
                    let p = &self.scen[s];
                    let mut st = p.start;
                    let mut acc = R::zero();
                    for &u in &doses[..i] {
                        st = advance(&st, u, &p.params, self.gammas, self.domains).state;
                        acc += self.loss.hour(st.y, p.params.yb);
                    }
                    states.push(st);
                    prefix.push(acc);
                }
                let mut arg = doses[i];
                let mut arg_val = best;
                let mut trial = doses.clone();
                let mut losses = vec![R::zero(); m];
                for &lv in levels {
                    trial[i] = lv;
                    for s in 0..m {
                        losses[s] = self.roll(s, states[s], prefix[s], &trial[i..]);
                    }
                    let v = self.combine(&losses);
                    if v < arg_val || (v == arg_val && lv < arg) {
                        arg = lv;
                        arg_val = v;
                    }
                }
                if arg != doses[i] {
                    doses[i] = arg;
                    best = arg_val;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        (doses, best)
    }

    fn enumerate(&self, n: usize, levels: &[R]) -> (Vec<R>, R) {
        let mut idx = vec![0usize; n];
        let mut best: Option<(Vec<R>, R)> = None;
        loop {
            let cand: Vec<R> = idx.iter().map(|&i| levels[i]).collect();
            let v = self.value(&cand);
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((cand, v));
            }
            // Odometer with the first hour most significant keeps the order lexicographic.
            let mut pos = n;
            loop {
                if pos == 0 {
                    return best.unwrap();
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < levels.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
}

fn lex_less<R: Real>(a: &[R], b: &[R]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn snap<R: Real>(u: R, levels: &[R]) -> R {
    let mut best = levels[0];
    for &l in levels {
        if (l - u).abs() < (best - u).abs() {
            best = l;
        }
    }
    best
}

/// Minimizes the weight-averaged scenario loss over dose sequences on the mesh.
///
/// `warm` is an optional previous plan already shifted to the current hour; it
/// is used as a third start by the mesh search.
pub fn plan_ptc_sgm<R: Real>(
    table: &ScenarioTable<R>,
    past_doses: &[R],
    loss: &LossSpec<R>,
    cfg: &PlannerConfig<R>,
    gammas: &GlobalDecayRates<R>,
    domains: &Domains<R>,
    warm: Option<&[R]>,
) -> Result<DosePlan<R>, DosingError> {
    loss.validate()?;
    cfg.validate()?;
    check_doses(past_doses, domains, "past")?;
    let mut scen = Vec::new();
    for e in &table.scenarios {
        let Some(p) = e.params else { continue };
        p.validate(domains)?;
        let tr = simulate(&p, gammas, past_doses, domains)?;
        if e.weight > R::zero() {
            scen.push(Prepared {
                params: p,
                weight: e.weight,
                start: *tr.states.last().unwrap(),
            });
        }
    }
    if scen.is_empty() {
        return Err(DosingError::PlanningFailed("no scenario carries positive weight".into()));
    }
    let total_weight = scen.iter().map(|p| p.weight).sum();
    let obj = Objective {
        scen,
        total_weight,
        loss,
        gammas,
        domains,
    };
    let n = cfg.horizon;
    let levels = dose_levels(cfg.dose_step, domains.u_max);
    let (doses, value) = match cfg.mode {
        PlanMode::ExactSmall => {
            if n > 4 || levels.len() > 8 {
                return Err(DosingError::InvalidInput(format!(
                    "exact enumeration needs n <= 4 and at most 8 levels (n = {n}, {} levels)",
                    levels.len()
                )));
            }
            obj.enumerate(n, &levels)
        }
        PlanMode::MeshSearch => {
            let mut starts = vec![vec![R::zero(); n], vec![levels[1.min(levels.len() - 1)]; n]];
            if let Some(w) = warm {
                starts.push(shift_plan(w, 0, n).into_iter().map(|u| snap(u, &levels)).collect());
            }
            // Constant sequences at every level get past the flat stretches of
            // the indicator loss, where single-hour moves change nothing.
            starts.extend(levels.iter().skip(2).map(|&l| vec![l; n]));
            let mut best: Option<(Vec<R>, R)> = None;
            for s in starts {
                let (d, v) = obj.descend(s, &levels, cfg.max_sweeps);
                let take = match &best {
                    None => true,
                    Some((bd, bv)) => v < *bv || (v == *bv && lex_less(&d, bd)),
                };
                if take {
                    best = Some((d, v));
                }
            }
            best.unwrap()
        }
    };
    let mut plan = evaluate_plan(table, past_doses, &doses, loss, gammas, domains)?;
    plan.expected_loss = value;
    Ok(plan)
}

/// Scores a fixed dose sequence under every fitted scenario of `table`.
/// `expected_loss` is the weight-averaged loss over scenarios with positive weight.
pub fn evaluate_plan<R: Real>(
    table: &ScenarioTable<R>,
    past_doses: &[R],
    doses: &[R],
    loss: &LossSpec<R>,
    gammas: &GlobalDecayRates<R>,
    domains: &Domains<R>,
) -> Result<DosePlan<R>, DosingError> {
    loss.validate()?;
    check_doses(past_doses, domains, "past")?;
    check_doses(doses, domains, "candidate")?;
    let mut scenario_losses = Vec::new();
    let (mut num, mut den) = (R::zero(), R::zero());
    for e in &table.scenarios {
        let Some(p) = e.params else { continue };
        p.validate(domains)?;
        let mut st = simulate(&p, gammas, past_doses, domains)?.states.last().copied().unwrap();
        let mut acc = R::zero();
        for &u in doses {
            st = advance(&st, u, &p, gammas, domains).state;
            acc += loss.hour(st.y, p.yb);
        }
        if e.weight > R::zero() {
            num += e.weight * acc;
            den += e.weight;
        }
        scenario_losses.push(ScenarioLoss {
            alpha: p.alpha,
            b: p.b,
            weight: e.weight,
            loss: acc,
        });
    }
    if !(den > R::zero()) {
        return Err(DosingError::PlanningFailed("no scenario carries positive weight".into()));
    }
    Ok(DosePlan {
        planning_time: past_doses.len(),
        horizon: doses.len(),
        doses: doses.to_vec(),
        expected_loss: num / den,
        scenario_losses,
    })
}

/// Plans as if the point estimate were the true patient.
pub fn plan_ptc_mle<R: Real>(
    estimate: &EstimateResult<R>,
    past_doses: &[R],
    loss: &LossSpec<R>,
    cfg: &PlannerConfig<R>,
    gammas: &GlobalDecayRates<R>,
    domains: &Domains<R>,
    warm: Option<&[R]>,
) -> Result<DosePlan<R>, DosingError> {
    let table = ScenarioTable::singleton(estimate.params);
    plan_ptc_sgm(&table, past_doses, loss, cfg, gammas, domains, warm)
}
