//! Direct search over piecewise-constant controls: an upper bound on the
//! classical value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_classical, integrate_interval, rk4_work, substeps, total_cost, ControlRef, DynamicsError};
use crate::problem::{ClassicalControl, Closure, Problem, RegionSpec};

/// Default penalty weight.
pub const DEFAULT_RHO: f64 = 1e4;
/// Pattern search stops once the step falls below this.
pub const MIN_STEP: f64 = 1e-6;
/// Interior margin demanded in open mode.
pub const OPEN_MARGIN: f64 = 1e-6;
/// Penalty above which a result is flagged infeasible.
pub const FEASIBLE_PENALTY: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("K and starts must be at least 1")]
    BadArguments,
    #[error("no start produced a finite objective: {0}")]
    NoFiniteStart(String),
    #[error("warm start has {got} values per interval, expected {expected}")]
    WarmStartShape { got: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub k: usize,
    pub starts: usize,
    pub seed: u64,
    pub mode: Closure,
    pub dt: Option<f64>,
    pub rho: f64,
    /// Controls placed in the first start slots after refinement to `k`
    /// intervals; any remaining slots are random.
    pub warm_starts: Vec<ClassicalControl>,
    /// Objective evaluations allowed per start.
    pub max_evaluations: usize,
}

impl SolveOptions {
    pub fn new(k: usize, starts: usize, seed: u64, mode: Closure) -> Self {
        Self { k, starts, seed, mode, dt: None, rho: DEFAULT_RHO, warm_starts: Vec::new(), max_evaluations: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectSolveResult {
    pub best_cost: f64,
    pub penalty: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub starts: usize,
    pub seed: u64,
    pub mode: Closure,
    pub control: ClassicalControl,
}

impl DirectSolveResult {
    pub fn feasible(&self) -> bool {
        self.penalty <= FEASIBLE_PENALTY
    }
}

/// Penalty on leaving Ω (summed over integration nodes) and missing X.
#[derive(Debug, Clone, Copy)]
struct Penalty<'a> {
    omega: &'a RegionSpec,
    target: &'a RegionSpec,
    margin: f64,
    rho: f64,
}

impl<'a> Penalty<'a> {
    fn new(p: &'a Problem, mode: Closure, rho: f64) -> Self {
        let margin = if mode == Closure::Open { OPEN_MARGIN } else { 0.0 };
        Self { omega: &p.omega, target: &p.target, margin, rho }
    }

    fn path(&self, x: &[f64]) -> f64 {
        let v = (self.margin - self.omega.margin(x)).max(0.0);
        self.rho * v * v
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        let mut d = self.target.violation(x);
        if self.margin > 0.0 {
            d = d.max(self.margin - self.target.margin(x));
        }
        let d = d.max(0.0);
        self.rho * d * d
    }
}

/// `(cost, penalty)` of a control under the solver's penalty.
pub fn evaluate_control(
    p: &Problem,
    c: &ClassicalControl,
    mode: Closure,
    dt: Option<f64>,
) -> Result<(f64, f64), DynamicsError> {
    let dt = dt.unwrap_or_else(|| crate::dynamics::default_dt(p));
    let tr = integrate_classical(p, c, dt)?;
    let pen = Penalty::new(p, mode, DEFAULT_RHO);
    let path: f64 = tr.states.iter().map(|x| pen.path(x)).sum();
    let cost = total_cost(p, &tr).map_err(|source| DynamicsError::Eval { time: p.horizon, source })?;
    Ok((cost, path + pen.terminal(tr.final_state())))
}

/// Rollout with cached interval-start states, so that changing the control
/// on interval `k` only re-integrates from `k` on.
struct Rollout<'a> {
    p: &'a Problem,
    pen: Penalty<'a>,
    grid: Vec<f64>,
    steps: usize,
    /// Lifted state at the start of each interval (K + 1 entries).
    z: Vec<Vec<f64>>,
    /// Path penalty accumulated before each interval start (node 0 included).
    acc: Vec<f64>,
    work: [Vec<f64>; 5],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Score {
    objective: f64,
    cost: f64,
    penalty: f64,
}

impl Score {
    const INFEASIBLE: Score = Score { objective: f64::INFINITY, cost: f64::INFINITY, penalty: f64::INFINITY };
}

impl<'a> Rollout<'a> {
    fn new(p: &'a Problem, pen: Penalty<'a>, k: usize, dt: f64) -> Self {
        let grid = ClassicalControl::uniform(p.horizon, vec![vec![0.0; p.m]; k]).time_grid;
        let steps = substeps(p.horizon / k as f64, dt);
        let mut z0 = p.x0.clone();
        z0.push(0.0);
        let acc0 = pen.path(&p.x0);
        Rollout {
            p,
            pen,
            grid,
            steps,
            z: vec![z0; k + 1],
            acc: vec![acc0; k + 1],
            work: rk4_work(p.n + 1),
        }
    }

    /// Re-integrates intervals `from..K` for `c`, updating the cache.
    fn run(&mut self, c: &ClassicalControl, from: usize) -> Score {
        let n = self.p.n;
        let k_total = self.grid.len() - 1;
        for k in from..k_total {
            let mut z = self.z[k].clone();
            let mut acc = self.acc[k];
            let pen = self.pen;
            let res = integrate_interval(
                self.p,
                ControlRef::Classical(c),
                k,
                (self.grid[k], self.grid[k + 1]),
                self.steps,
                &mut z,
                &mut self.work,
                |_, zz| acc += pen.path(&zz[..n]),
            );
            if res.is_err() {
                return Score::INFEASIBLE;
            }
            self.z[k + 1] = z;
            self.acc[k + 1] = acc;
        }
        let end = &self.z[k_total];
        let Ok(g) = self.p.eval_terminal(&end[..n]) else {
            return Score::INFEASIBLE;
        };
        let cost = end[n] + g;
        let penalty = self.acc[k_total] + self.pen.terminal(&end[..n]);
        let objective = cost + penalty;
        if objective.is_finite() {
            Score { objective, cost, penalty }
        } else {
            Score::INFEASIBLE
        }
    }

    fn copy_from(&mut self, other: &Rollout<'_>, from: usize) {
        for k in from + 1..self.z.len() {
            self.z[k].copy_from_slice(&other.z[k]);
            self.acc[k] = other.acc[k];
        }
    }
}

/// Refines `c` onto `k` uniform intervals by sampling at interval midpoints.
/// Exact when `k` is a multiple of the number of intervals of a uniform `c`.
pub fn refine_control(c: &ClassicalControl, horizon: f64, k: usize) -> ClassicalControl {
    let values = (0..k)
        .map(|i| {
            let mid = horizon * (i as f64 + 0.5) / k as f64;
            c.value_at(mid).to_vec()
        })
        .collect();
    ClassicalControl::uniform(horizon, values)
}

struct StartOutcome {
    score: Score,
    control: ClassicalControl,
}

/// Penalty weights used in sequence: each stage warm-starts from the last and
/// only runs while the penalty is positive.
const CONTINUATION: [f64; 5] = [1.0, 10.0, 100.0, 1e3, 1e4];

/// Coordinate pattern search with a uniform-shift direction and an
/// extrapolation step along the net change of every improving sweep.
fn search_stage(
    p: &Problem,
    opts: &SolveOptions,
    dt: f64,
    pen: Penalty<'_>,
    c: &mut ClassicalControl,
    mut step: f64,
    evaluations: &mut usize,
) -> Score {
    let mut cur = Rollout::new(p, pen, opts.k, dt);
    let mut trial = Rollout::new(p, pen, opts.k, dt);
    let mut score = cur.run(c, 0);
    trial.copy_from(&cur, 0);
    *evaluations += 1;
    let widths: Vec<f64> = p.controls.widths().collect();
    let clamp = |v: f64, j: usize| v.clamp(p.controls.lower[j], p.controls.upper[j]);
    while step >= MIN_STEP && *evaluations < opts.max_evaluations {
        let before = c.clone();
        let mut improved = false;
        for k in 0..opts.k {
            for j in 0..p.m {
                if widths[j] == 0.0 {
                    continue;
                }
                let keep = c.values[k][j];
                for dir in [1.0, -1.0] {
                    let candidate = clamp(keep + dir * step * widths[j], j);
                    if candidate == keep {
                        continue;
                    }
                    c.values[k][j] = candidate;
                    let s = trial.run(c, k);
                    *evaluations += 1;
                    if s.objective < score.objective {
                        score = s;
                        cur.copy_from(&trial, k);
                        improved = true;
                        break;
                    }
                    c.values[k][j] = keep;
                    trial.copy_from(&cur, k);
                }
            }
        }
        for j in 0..p.m {
            for dir in [1.0, -1.0] {
                let mut shifted = c.clone();
                shifted.values.iter_mut().for_each(|v| v[j] = clamp(v[j] + dir * step * widths[j], j));
                if shifted == *c {
                    continue;
                }
                let s = trial.run(&shifted, 0);
                *evaluations += 1;
                if s.objective < score.objective {
                    score = s;
                    *c = shifted;
                    cur.copy_from(&trial, 0);
                    improved = true;
                    break;
                }
                trial.copy_from(&cur, 0);
            }
        }
        if !improved {
            step *= 0.5;
            continue;
        }
        let delta: Vec<Vec<f64>> =
            c.values.iter().zip(&before.values).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        let mut factor = 1.0;
        while *evaluations < opts.max_evaluations {
            let mut jumped = c.clone();
            for (v, d) in jumped.values.iter_mut().zip(&delta) {
                for j in 0..p.m {
                    v[j] = clamp(v[j] + factor * d[j], j);
                }
            }
            if jumped == *c {
                break;
            }
            let s = trial.run(&jumped, 0);
            *evaluations += 1;
            if s.objective < score.objective {
                score = s;
                *c = jumped;
                cur.copy_from(&trial, 0);
                factor *= 2.0;
            } else {
                trial.copy_from(&cur, 0);
                break;
            }
        }
    }
    score
}

fn run_start(p: &Problem, opts: &SolveOptions, dt: f64, mut c: ClassicalControl) -> StartOutcome {
    let base = Penalty::new(p, opts.mode, opts.rho);
    let score_at_base = |c: &ClassicalControl| Rollout::new(p, base, opts.k, dt).run(c, 0);
    let initial = StartOutcome { score: score_at_base(&c), control: c.clone() };
    let mut evaluations = 0;
    for (stage, scale) in CONTINUATION.iter().enumerate() {
        let pen = Penalty { rho: opts.rho * scale, ..base };
        let step = if stage == 0 { 1.0 } else { 1e-3 };
        let s = search_stage(p, opts, dt, pen, &mut c, step, &mut evaluations);
        if s.penalty == 0.0 || !s.objective.is_finite() {
            break;
        }
    }
    let searched = StartOutcome { score: score_at_base(&c), control: c };
    if initial.score.objective < searched.score.objective {
        initial
    } else {
        searched
    }
}

/// Multistart pattern search over `K`-piece controls.
pub fn solve_classical(p: &Problem, opts: &SolveOptions) -> Result<DirectSolveResult, SolveError> {
    if opts.k == 0 || opts.starts == 0 {
        return Err(SolveError::BadArguments);
    }
    for w in &opts.warm_starts {
        if let Some(v) = w.values.iter().find(|v| v.len() != p.m) {
            return Err(SolveError::WarmStartShape { got: v.len(), expected: p.m });
        }
    }
    let dt = opts.dt.unwrap_or_else(|| crate::dynamics::default_dt(p));
    let initial: Vec<ClassicalControl> = (0..opts.starts)
        .map(|i| match opts.warm_starts.get(i) {
            Some(w) => {
                let mut r = refine_control(w, p.horizon, opts.k);
                r.values.iter_mut().for_each(|v| p.controls.clamp(v));
                r
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(i as u64);
                let values = (0..opts.k).map(|_| p.controls.sample(&mut rng)).collect();
                ClassicalControl::uniform(p.horizon, values)
            }
        })
        .collect();
    let outcomes: Vec<StartOutcome> = initial.into_par_iter().map(|c| run_start(p, opts, dt, c)).collect();
    let (_, best) = outcomes
        .into_iter()
        .enumerate()
        .filter(|(_, o)| o.score.objective.is_finite())
        .min_by(|(ia, a), (ib, b)| {
            a.score
                .objective
                .total_cmp(&b.score.objective)
                .then(a.score.penalty.total_cmp(&b.score.penalty))
                .then(ia.cmp(ib))
        })
        .ok_or_else(|| SolveError::NoFiniteStart(format!("{} starts all blew up or failed to evaluate", opts.starts)))?;
    Ok(DirectSolveResult {
        best_cost: best.score.cost,
        penalty: best.score.penalty,
        k: opts.k,
        starts: opts.starts,
        seed: opts.seed,
        mode: opts.mode,
        control: best.control,
    })
}
