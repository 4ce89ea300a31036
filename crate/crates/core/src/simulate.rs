//! Monte Carlo checks: the reflected optimal policy against `v`, the Dynkin
//! game against `v_c`, and perturbed policies against the optimum.
//!
//! Paths are keyed by `(seed, index)`, so any two runs with the same seed see
//! the same demand paths (common random numbers), and the reduction is a
//! pairwise sum in index order, so results do not depend on scheduling.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::BoundaryTable;
use crate::cost::QuadraticCost;
use crate::diffusion::{path_rng, DiffusionKind, DiffusionModel};
use crate::numerics::pairwise_sum;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Reflect,
    DoNothing,
}

/// A boundary policy: keep `c` between `ĉ₊(d) + shift_plus` and
/// `ĉ₋(d) + shift_minus`, or never act.
#[derive(Debug, Clone, Copy)]
pub struct PolicySpec<'a> {
    pub table: &'a BoundaryTable,
    pub shift_plus: f64,
    pub shift_minus: f64,
    pub mode: Mode,
}

impl<'a> PolicySpec<'a> {
    pub fn optimal(table: &'a BoundaryTable) -> Self {
        Self::shifted(table, 0.0, 0.0)
    }

    pub fn shifted(table: &'a BoundaryTable, shift_plus: f64, shift_minus: f64) -> Self {
        Self {
            table,
            shift_plus,
            shift_minus,
            mode: Mode::Reflect,
        }
    }

    pub fn do_nothing(table: &'a BoundaryTable) -> Self {
        Self {
            mode: Mode::DoNothing,
            ..Self::optimal(table)
        }
    }

    pub fn label(&self) -> String {
        match self.mode {
            Mode::DoNothing => "do-nothing".into(),
            Mode::Reflect if self.shift_plus == 0.0 && self.shift_minus == 0.0 => "optimal".into(),
            Mode::Reflect => format!("shift({:+}, {:+})", self.shift_plus, self.shift_minus),
        }
    }

    fn lower(&self, d: f64) -> f64 {
        self.table.chat_plus(d) + self.shift_plus
    }

    fn upper(&self, d: f64) -> f64 {
        self.table.chat_minus(d) + self.shift_minus
    }
}

/// New capacity and the (minimal) control increments that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub c: f64,
    pub invest: f64,
    pub disinvest: f64,
}

/// `c_new = min(max(c_prev, ĉ₊(d) + s⁺), ĉ₋(d) + s⁻)`.
pub fn reflect_step(policy: &PolicySpec, c_prev: f64, d_new: f64) -> Step {
    if policy.mode == Mode::DoNothing {
        return Step {
            c: c_prev,
            invest: 0.0,
            disinvest: 0.0,
        };
    }
    let c = c_prev.max(policy.lower(d_new)).min(policy.upper(d_new));
    Step {
        c,
        invest: (c - c_prev).max(0.0),
        disinvest: (c_prev - c).max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimResult {
    pub discounted_cost: f64,
    pub total_invest: f64,
    pub total_disinvest: f64,
    pub n_paths: usize,
    pub std_error: f64,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

/// A plain Monte Carlo mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Test boundaries against bridge-sampled extremes within each step
    /// rather than only at the grid points.
    pub bridge: bool,
}

impl McParams {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            n_paths,
            seed,
            bridge: true,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidArgument("dt and horizon must be positive".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidArgument("at least one path is needed".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).ceil() as usize
    }
}

/// `T = ln(S/ε)/(ρ − K)`: past `T` the discounted tail of a quantity of size
/// `S` at the start, growing at most like `e^{Kt}`, is below `ε`.
pub fn tail_horizon(model: &DiffusionModel, scale: f64, eps: f64) -> f64 {
    let rate = model.rho() - model.growth_rate();
    (scale.max(1.0) / eps).ln().max(0.0) / rate
}

/// One row of a path dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathRecord {
    pub t: f64,
    pub d: f64,
    pub c: f64,
    pub d_invest: f64,
    pub d_disinvest: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PathOutcome {
    cost: f64,
    invest: f64,
    disinvest: f64,
}

/// Per-step random draws shared by every policy and game on the same path:
/// a normal increment and two unit exponentials that fix the bridge maximum
/// and minimum of the step.
struct Draws {
    rng: rand_chacha::ChaCha8Rng,
}

impl Draws {
    fn new(seed: u64, index: u64) -> Self {
        Self {
            rng: path_rng(seed, index),
        }
    }

    fn next(&mut self) -> (f64, f64, f64) {
        let z: f64 = self.rng.sample(StandardNormal);
        let e_max: f64 = self.rng.sample(Exp1);
        let e_min: f64 = self.rng.sample(Exp1);
        (z, e_max, e_min)
    }
}

/// One step in the bridge coordinate `y` (log-demand for GBM, demand
/// otherwise), with the draws that pin the bridge extremes.
#[derive(Debug, Clone, Copy)]
struct Move {
    a: f64,
    b: f64,
    s2: f64,
    e_max: f64,
    e_min: f64,
}

impl Move {
    /// With `E = −ln U`, the bridge maximum is `½(a + b + √((b−a)² + 2s²E))`.
    fn max(&self) -> f64 {
        let diff = self.b - self.a;
        0.5 * (self.a + self.b + (diff * diff + 2.0 * self.s2 * self.e_max).sqrt())
    }

    fn min(&self) -> f64 {
        let diff = self.b - self.a;
        0.5 * (self.a + self.b - (diff * diff + 2.0 * self.s2 * self.e_min).sqrt())
    }

    /// `max() > level` without the square root.
    fn max_exceeds(&self, level: f64) -> bool {
        let r = 2.0 * level - self.a - self.b;
        let diff = self.b - self.a;
        r <= 0.0 || diff * diff + 2.0 * self.s2 * self.e_max > r * r
    }

    fn min_below(&self, level: f64) -> bool {
        let r = self.a + self.b - 2.0 * level;
        let diff = self.b - self.a;
        r <= 0.0 || diff * diff + 2.0 * self.s2 * self.e_min > r * r
    }
}

struct Walker<'m> {
    model: &'m DiffusionModel,
    dt: f64,
    /// `((μ − σ²/2)dt, σ√dt)` for GBM.
    gbm: Option<(f64, f64)>,
}

impl<'m> Walker<'m> {
    fn new(model: &'m DiffusionModel, dt: f64) -> Self {
        let gbm = match model.kind() {
            DiffusionKind::Gbm { mu, sigma } => Some(((mu - 0.5 * sigma * sigma) * dt, sigma * dt.sqrt())),
            DiffusionKind::Generic => None,
        };
        Self { model, dt, gbm }
    }

    fn y_of(&self, d: f64) -> f64 {
        if d <= self.model.d_min() {
            return f64::NEG_INFINITY;
        }
        if d >= self.model.d_max() {
            return f64::INFINITY;
        }
        if self.gbm.is_some() {
            d.ln()
        } else {
            d
        }
    }

    fn d_of(&self, y: f64) -> f64 {
        if self.gbm.is_some() {
            y.exp()
        } else {
            y.clamp(self.model.d_min(), self.model.d_max())
        }
    }

    /// Advances `(d, y)` and returns the new demand with the step.
    fn advance(&self, d: f64, y: f64, draws: &mut Draws) -> (f64, Move) {
        let (z, e_max, e_min) = draws.next();
        match self.gbm {
            Some((m, s)) => {
                let b = y + m + s * z;
                (b.exp(), Move { a: y, b, s2: s * s, e_max, e_min })
            }
            None => {
                let d_new = self.model.step(d, self.dt, z);
                let s = self.model.bridge_sd(d, self.dt);
                (d_new, Move { a: d, b: d_new, s2: s * s, e_max, e_min })
            }
        }
    }
}

/// State of one policy along a path. `up`/`down` are the levels of `y`
/// beyond which the policy must act at the current capacity.
struct Track<'p, 't> {
    policy: &'p PolicySpec<'t>,
    c: f64,
    up: f64,
    down: f64,
    jumps: f64,
    running: f64,
    g_left: f64,
    invest: f64,
    disinvest: f64,
}

impl<'p, 't> Track<'p, 't> {
    fn start(policy: &'p PolicySpec<'t>, w: &Walker, cost: &QuadraticCost, c0: f64, d0: f64) -> (Self, Step) {
        let first = reflect_step(policy, c0, d0);
        let mut track = Self {
            policy,
            c: first.c,
            up: f64::INFINITY,
            down: f64::NEG_INFINITY,
            jumps: cost.q_plus() * first.invest + if first.disinvest > 0.0 { cost.q_minus() * first.disinvest } else { 0.0 },
            running: 0.0,
            g_left: cost.running_cost(first.c, d0),
            invest: first.invest,
            disinvest: first.disinvest,
        };
        track.up = track.up_level(w, first.c);
        track.down = track.down_level(w, first.c);
        if first.invest > 0.0 {
            track.up = w.y_of(d0);
        }
        if first.disinvest > 0.0 {
            track.down = w.y_of(d0);
        }
        (track, first)
    }

    fn up_level(&self, w: &Walker, c: f64) -> f64 {
        if self.policy.mode == Mode::DoNothing {
            return f64::INFINITY;
        }
        w.y_of(self.policy.table.dhat_plus(c - self.policy.shift_plus))
    }

    fn down_level(&self, w: &Walker, c: f64) -> f64 {
        if self.policy.mode == Mode::DoNothing {
            return f64::NEG_INFINITY;
        }
        w.y_of(self.policy.table.dhat_minus(c - self.policy.shift_minus))
    }

    /// Reflection for one step: the investment boundary is tested at the
    /// step maximum of demand, the disinvestment boundary at the minimum.
    fn act(&mut self, w: &Walker, m: &Move, bridge: bool) -> Step {
        let c_prev = self.c;
        if (bridge && m.max_exceeds(self.up)) || m.b >= self.up {
            let y_hi = if bridge { m.max().max(m.b) } else { m.b };
            let target = self.policy.lower(w.d_of(y_hi));
            if target > self.c {
                self.c = target;
                self.down = self.down_level(w, target);
            }
            self.up = y_hi;
        }
        if (bridge && m.min_below(self.down)) || m.b <= self.down {
            let y_lo = if bridge { m.min().min(m.b) } else { m.b };
            let target = self.policy.upper(w.d_of(y_lo));
            if target < self.c {
                self.c = target;
                self.up = self.up_level(w, target);
            }
            self.down = y_lo;
        }
        Step {
            c: self.c,
            invest: (self.c - c_prev).max(0.0),
            disinvest: (c_prev - self.c).max(0.0),
        }
    }

    fn outcome(&self, dt: f64) -> PathOutcome {
        PathOutcome {
            cost: self.jumps + 0.5 * dt * self.running,
            invest: self.invest,
            disinvest: self.disinvest,
        }
    }
}

/// Runs every policy along path `index`; the first one can be traced.
#[allow(clippy::too_many_arguments)]
fn run_path(
    specs: &[PolicySpec],
    model: &DiffusionModel,
    cost: &QuadraticCost,
    c0: f64,
    d0: f64,
    params: &McParams,
    index: u64,
    mut trace: Option<&mut Vec<PathRecord>>,
) -> Vec<PathOutcome> {
    let (qp, qm) = (cost.q_plus(), cost.q_minus());
    let (alpha0, beta0) = (cost.alpha0(), cost.beta0());
    let dt = params.dt;
    let decay = (-model.rho() * dt).exp();
    let w = Walker::new(model, dt);
    let mut draws = Draws::new(params.seed, index);
    let mut tracks = Vec::with_capacity(specs.len());
    for p in specs {
        let (t, first) = Track::start(p, &w, cost, c0, d0);
        if tracks.is_empty() {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(PathRecord {
                    t: 0.0,
                    d: d0,
                    c: first.c,
                    d_invest: first.invest,
                    d_disinvest: first.disinvest,
                });
            }
        }
        tracks.push(t);
    }
    let (mut d, mut y) = (d0, w.y_of(d0));
    let mut disc = 1.0;
    for k in 1..=params.steps() {
        let (d_new, m) = w.advance(d, y, &mut draws);
        let disc_new = disc * decay;
        let (a0, b0) = (alpha0.eval(d_new), beta0.eval(d_new));
        for (j, t) in tracks.iter_mut().enumerate() {
            let step = t.act(&w, &m, params.bridge);
            if step.invest > 0.0 {
                t.jumps += disc_new * qp * step.invest;
                t.invest += step.invest;
            }
            if step.disinvest > 0.0 {
                t.jumps += disc_new * qm * step.disinvest;
                t.disinvest += step.disinvest;
            }
            let g_right = 0.5 * (t.c * t.c - 2.0 * b0 * t.c + a0);
            t.running += disc * t.g_left + disc_new * g_right;
            t.g_left = g_right;
            if j == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(PathRecord {
                        t: k as f64 * dt,
                        d: d_new,
                        c: t.c,
                        d_invest: step.invest,
                        d_disinvest: step.disinvest,
                    });
                }
            }
        }
        d = d_new;
        y = m.b;
        disc = disc_new;
    }
    tracks.iter().map(|t| t.outcome(dt)).collect()
}

/// The realised cost functional along path 0 of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_policy(
    policy: &PolicySpec,
    model: &DiffusionModel,
    cost: &QuadraticCost,
    c0: f64,
    d0: f64,
    dt: f64,
    horizon: f64,
    seed: u64,
) -> Result<SimResult> {
    mc_value(policy, model, cost, c0, d0, &McParams::new(dt, horizon, 1, seed))
}

/// Path dump for path `index`.
pub fn trace_policy(
    policy: &PolicySpec,
    model: &DiffusionModel,
    cost: &QuadraticCost,
    start: (f64, f64),
    params: &McParams,
    index: u64,
) -> Result<Vec<PathRecord>> {
    params.check()?;
    model.check_interior(start.1)?;
    let mut out = Vec::with_capacity(params.steps() + 1);
    run_path(std::slice::from_ref(policy), model, cost, start.0, start.1, params, index, Some(&mut out));
    Ok(out)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean discounted cost of the policy over `n_paths` independent paths.
pub fn mc_value(
    policy: &PolicySpec,
    model: &DiffusionModel,
    cost: &QuadraticCost,
    c0: f64,
    d0: f64,
    params: &McParams,
) -> Result<SimResult> {
    params.check()?;
    model.check_interior(d0)?;
    let outs: Vec<PathOutcome> = (0..params.n_paths as u64)
        .into_par_iter()
        .map(|i| run_path(std::slice::from_ref(policy), model, cost, c0, d0, params, i, None)[0])
        .collect();
    let costs: Vec<f64> = outs.iter().map(|o| o.cost).collect();
    let inv: Vec<f64> = outs.iter().map(|o| o.invest).collect();
    let dis: Vec<f64> = outs.iter().map(|o| o.disinvest).collect();
    let (mean, se) = mean_and_se(&costs);
    let n = params.n_paths as f64;
    Ok(SimResult {
        discounted_cost: mean,
        total_invest: pairwise_sum(&inv) / n,
        total_disinvest: pairwise_sum(&dis) / n,
        n_paths: params.n_paths,
        std_error: se,
        horizon: params.horizon,
        dt: params.dt,
        seed: params.seed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyCost {
    pub label: String,
    pub mean: f64,
    pub std_error: f64,
    /// Mean of (this policy − first policy) over common paths, and its SE.
    pub excess: f64,
    pub excess_se: f64,
    pub rank: usize,
}

/// Costs of several policies on common random numbers, ranked by mean.
pub fn compare_policies(
    specs: &[PolicySpec],
    model: &DiffusionModel,
    cost: &QuadraticCost,
    c0: f64,
    d0: f64,
    params: &McParams,
) -> Result<Vec<PolicyCost>> {
    params.check()?;
    model.check_interior(d0)?;
    if specs.is_empty() {
        return Ok(Vec::new());
    }
    let per_path: Vec<Vec<f64>> = (0..params.n_paths as u64)
        .into_par_iter()
        .map(|i| run_path(specs, model, cost, c0, d0, params, i, None).iter().map(|o| o.cost).collect())
        .collect();
    let mut out: Vec<PolicyCost> = specs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let xs: Vec<f64> = per_path.iter().map(|r| r[j]).collect();
            let diffs: Vec<f64> = per_path.iter().map(|r| r[j] - r[0]).collect();
            let (mean, std_error) = mean_and_se(&xs);
            let (excess, excess_se) = mean_and_se(&diffs);
            PolicyCost {
                label: p.label(),
                mean,
                std_error,
                excess,
                excess_se,
                rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[a].mean.total_cmp(&out[b].mean));
    for (r, &j) in order.iter().enumerate() {
        out[j].rank = r + 1;
    }
    Ok(out)
}

/// Game at frozen capacity `c`: the stopper `σ` pays `q⁻` on reaching
/// `d̂₋(c)`, the stopper `τ` receives `q⁺` on reaching `d̂₊(c)`, and the flow
/// `g_c(c, D)` accrues until the first stop. With `bridge`, a level touched
/// between grid points counts as hit at the end of the step.
fn run_game(model: &DiffusionModel, cost: &QuadraticCost, c: f64, d0: f64, table: &BoundaryTable, params: &McParams, index: u64) -> f64 {
    let (qp, qm) = (cost.q_plus(), cost.q_minus());
    let up = table.dhat_plus(c);
    let down = table.dhat_minus(c);
    if d0 >= up && up < model.d_max() {
        return -qp;
    }
    if d0 <= down && down > model.d_min() && qm.is_finite() {
        return qm;
    }
    let dt = params.dt;
    let w = Walker::new(model, dt);
    let l_up = w.y_of(up);
    let l_down = if qm.is_finite() { w.y_of(down) } else { f64::NEG_INFINITY };
    let beta0 = cost.beta0();
    let decay = (-model.rho() * dt).exp();
    let mut draws = Draws::new(params.seed, index);
    let (mut d, mut y) = (d0, w.y_of(d0));
    let mut disc = 1.0;
    let mut g_left = c - beta0.eval(d);
    let mut acc = 0.0;
    for _ in 0..params.steps() {
        let (d_new, m) = w.advance(d, y, &mut draws);
        let disc_new = disc * decay;
        let g_right = c - beta0.eval(d_new);
        acc += disc * g_left + disc_new * g_right;
        if m.b >= l_up || (params.bridge && m.max_exceeds(l_up)) {
            return 0.5 * dt * acc - disc_new * qp;
        }
        if m.b <= l_down || (params.bridge && m.min_below(l_down)) {
            return 0.5 * dt * acc + disc_new * qm;
        }
        d = d_new;
        y = m.b;
        g_left = g_right;
        disc = disc_new;
    }
    0.5 * dt * acc
}

/// One realised game payoff (path 0 of `seed`).
#[allow(clippy::too_many_arguments)]
pub fn dynkin_payoff(
    model: &DiffusionModel,
    cost: &QuadraticCost,
    c: f64,
    d: f64,
    table: &BoundaryTable,
    dt: f64,
    horizon: f64,
    seed: u64,
) -> Result<f64> {
    let params = McParams::new(dt, horizon, 1, seed);
    params.check()?;
    model.check_interior(d)?;
    Ok(run_game(model, cost, c, d, table, &params, 0))
}

/// Monte Carlo value of the game with the saddle hitting strategies.
pub fn mc_dynkin(
    model: &DiffusionModel,
    cost: &QuadraticCost,
    c: f64,
    d: f64,
    table: &BoundaryTable,
    params: &McParams,
) -> Result<Estimate> {
    params.check()?;
    model.check_interior(d)?;
    let pays: Vec<f64> = (0..params.n_paths as u64)
        .into_par_iter()
        .map(|i| run_game(model, cost, c, d, table, params, i))
        .collect();
    let (mean, std_error) = mean_and_se(&pays);
    Ok(Estimate {
        mean,
        std_error,
        n_paths: params.n_paths,
        dt: params.dt,
        horizon: params.horizon,
        seed: params.seed,
    })
}
