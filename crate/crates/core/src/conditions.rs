//! Sampling-based checkers for the sufficient no-gap conditions. A
//! violation comes with a witness that was re-evaluated before reporting; a
//! pass only means no sample contradicted the condition.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::exprlang::{Bindings, Var};
use crate::problem::{BoxSpec, Closure, Problem, RegionKind};

/// Default inward margin for the inward-pointing check.
pub const DEFAULT_ETA: f64 = 1e-2;
/// Control grid points per dimension used to sample `F(t, x)`.
pub const U_GRID_POINTS: usize = 101;
/// Cap on the total size of the control grid.
const U_GRID_CAP: usize = 10_201;
/// Scales `‖x − y‖` probed by the Lipschitz check, largest first.
pub const FW2_SCALES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
/// Growth of the Lipschitz ratio from the largest to the smallest scale
/// beyond which the ratios are declared divergent.
pub const FW2_DIVERGENCE: f64 = 10.0;
/// Largest allowed ratio between the time-regularity constants estimated at
/// consecutive shifts.
pub const H1_STABILITY: f64 = 2.0;
/// Nodes of the midpoint rule used for the time-shift integrals.
const H1_NODES: usize = 512;
/// Knots of the piecewise-linear probe curves.
const H1_KNOTS: usize = 5;
/// Points per dimension of the deterministic lattice added to random samples.
const LATTICE_CAP: usize = 1331;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Condition {
    FW1,
    FW2,
    H1,
    H2,
    V4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "satisfied-on-samples")]
    SatisfiedOnSamples,
    #[serde(rename = "violated")]
    Violated,
    #[serde(rename = "not-applicable")]
    NotApplicable,
}

/// A sample point with the data that makes it interesting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub kind: String,
    pub data: BTreeMap<String, Vec<f64>>,
}

impl Witness {
    fn new(kind: &str, data: impl IntoIterator<Item = (&'static str, Vec<f64>)>) -> Self {
        Self { kind: kind.to_string(), data: data.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

/// A standing hypothesis reported alongside a check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fact {
    pub holds: Option<bool>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub verdict: Verdict,
    pub constants: BTreeMap<String, f64>,
    pub witnesses: Vec<Witness>,
    pub samples: usize,
    pub seed: u64,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub facts: BTreeMap<String, Fact>,
}

impl ConditionReport {
    fn new(condition: Condition, seed: u64) -> Self {
        Self {
            condition,
            verdict: Verdict::SatisfiedOnSamples,
            constants: BTreeMap::new(),
            witnesses: Vec::new(),
            samples: 0,
            seed,
            notes: Vec::new(),
            facts: BTreeMap::new(),
        }
    }

    fn constant(&mut self, name: &str, v: f64) {
        self.constants.insert(name.to_string(), v);
    }
}

/// The checks selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Fw1,
    Fw2,
    H1,
    Ipc,
    V4,
}

impl Check {
    pub const ALL: [Check; 5] = [Check::Fw1, Check::Fw2, Check::H1, Check::Ipc, Check::V4];

    pub fn name(&self) -> &'static str {
        match self {
            Check::Fw1 => "fw1",
            Check::Fw2 => "fw2",
            Check::H1 => "h1",
            Check::Ipc => "ipc",
            Check::V4 => "v4",
        }
    }

    pub fn default_samples(&self) -> usize {
        match self {
            Check::Fw1 => 1000,
            Check::Fw2 => 200,
            Check::H1 => 20,
            Check::Ipc => 500,
            Check::V4 => 100,
        }
    }
}

impl FromStr for Check {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown check `{s}`, expected one of fw1, fw2, h1, ipc, v4"))
    }
}

/// Runs `checks` concurrently with their default sample counts; reports come
/// back in the order requested.
pub fn run_checks(p: &Problem, checks: &[Check], eta: f64, seed: u64) -> Vec<ConditionReport> {
    checks
        .par_iter()
        .map(|c| {
            let n = c.default_samples();
            match c {
                Check::Fw1 => check_fw1(p, n, seed),
                Check::Fw2 => check_fw2(p, n, seed),
                Check::H1 => check_h1(p, n, seed),
                Check::Ipc => check_ipc(p, n, eta, seed),
                Check::V4 => check_v4_convexity(p, n, seed),
            }
        })
        .collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Odd number of points per dimension keeping the lattice within `cap`, so
/// the center of the box is always a lattice point.
fn lattice(b: &BoxSpec, cap: usize, per_dim_max: usize) -> Vec<Vec<f64>> {
    let d = b.dim();
    let mut per = ((cap as f64).powf(1.0 / d as f64).floor() as usize).clamp(1, per_dim_max);
    if per % 2 == 0 {
        per -= 1;
    }
    let coord = |j: usize, i: usize| {
        if per == 1 {
            0.5 * (b.lower[j] + b.upper[j])
        } else {
            b.lower[j] + (b.upper[j] - b.lower[j]) * i as f64 / (per - 1) as f64
        }
    };
    let total = per.pow(d as u32);
    (0..total)
        .map(|mut flat| {
            (0..d)
                .map(|j| {
                    let i = flat % per;
                    flat /= per;
                    coord(j, i)
                })
                .collect()
        })
        .collect()
}

/// Dense control grid: `U_GRID_POINTS` per dimension, fewer when the product
/// would exceed the cap.
pub fn control_grid(p: &Problem) -> Vec<Vec<f64>> {
    lattice(&p.controls, U_GRID_CAP, U_GRID_POINTS)
}

fn lifted(p: &Problem, t: f64, x: &[f64], u: &[f64]) -> Option<Vec<f64>> {
    let mut out = vec![0.0; p.n + 1];
    p.eval_lifted(t, x, u, &mut out).ok()?;
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hausdorff distance between `F(t, x)` and `F(s, y)` over a shared control
/// grid, matched pointwise: an upper bound for the distance between the
/// sampled images. `None` if an evaluation fails.
fn matched_distance(p: &Problem, us: &[Vec<f64>], (t, x): (f64, &[f64]), (s, y): (f64, &[f64])) -> Option<f64> {
    let mut worst: f64 = 0.0;
    for u in us {
        let a = lifted(p, t, x, u)?;
        let b = lifted(p, s, y, u)?;
        worst = worst.max(dist(&a, &b));
    }
    Some(worst)
}

fn nonfinite(t: f64, x: &[f64], u: &[f64]) -> Witness {
    Witness::new("nonfinite evaluation", [("t", vec![t]), ("x", x.to_vec()), ("u", u.to_vec())])
}

/// Linear growth: `λ̂ = max ‖(f, L)‖ / (1 + ‖x‖)` over a lattice of the
/// bounding box of Ω and `samples` uniform draws of `(t, x, u)`.
pub fn check_fw1(p: &Problem, samples: usize, seed: u64) -> ConditionReport {
    let mut r = ConditionReport::new(Condition::FW1, seed);
    let mut rng = rng_for(seed, 1);
    let bbox = &p.omega.bounding_box;
    let us = lattice(&p.controls, 121, 11);
    let mut points: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for x in lattice(bbox, LATTICE_CAP, 11) {
        for u in &us {
            for t in [0.0, 0.5 * p.horizon, p.horizon] {
                points.push((t, x.clone(), u.clone()));
            }
        }
    }
    for _ in 0..samples {
        let t = rng.gen_range(0.0..=p.horizon);
        points.push((t, bbox.sample(&mut rng), p.controls.sample(&mut rng)));
    }
    let mut lambda: f64 = 0.0;
    for (t, x, u) in &points {
        match lifted(p, *t, x, u) {
            Some(v) => lambda = lambda.max(norm(&v) / (1.0 + norm(x))),
            None => r.witnesses.push(nonfinite(*t, x, u)),
        }
    }
    r.samples = points.len();
    r.constant("lambda_hat", lambda);
    if !r.witnesses.is_empty() {
        r.verdict = Verdict::Violated;
    }
    r.notes.push("sampled on the bounding box of omega; the constant covers that box only".into());
    r
}

/// Local Lipschitz continuity in `x`: ratios `d_H(F(t,x), F(t,y)) / ‖x − y‖`
/// at shrinking scales. Divergent ratios mean a violation.
pub fn check_fw2(p: &Problem, samples: usize, seed: u64) -> ConditionReport {
    let mut r = ConditionReport::new(Condition::FW2, seed);
    let mut rng = rng_for(seed, 2);
    let bbox = &p.omega.bounding_box;
    let us = control_grid(p);
    let mut bases: Vec<(f64, Vec<f64>)> =
        lattice(bbox, LATTICE_CAP, 11).into_iter().map(|x| (0.5 * p.horizon, x)).collect();
    for _ in 0..samples {
        let t = rng.gen_range(0.0..=p.horizon);
        bases.push((t, bbox.sample(&mut rng)));
    }
    let mut per_scale = [0.0f64; FW2_SCALES.len()];
    let mut argmax: [Option<(f64, Vec<f64>, Vec<f64>)>; FW2_SCALES.len()] = Default::default();
    let mut pairs = 0;
    for (t, x) in &bases {
        let dir = unit_vector(&mut rng, p.n);
        for (s, &scale) in FW2_SCALES.iter().enumerate() {
            let forward: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + scale * d).collect();
            let backward: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - scale * d).collect();
            let y = if bbox.contains(&forward, Closure::Closed) {
                forward
            } else if bbox.contains(&backward, Closure::Closed) {
                backward
            } else {
                continue;
            };
            pairs += 1;
            match matched_distance(p, &us, (*t, x), (*t, &y)) {
                Some(d) => {
                    let ratio = d / dist(x, &y);
                    if ratio > per_scale[s] {
                        per_scale[s] = ratio;
                        argmax[s] = Some((*t, x.clone(), y));
                    }
                }
                None => r.witnesses.push(Witness::new("nonfinite evaluation", [("t", vec![*t]), ("x", x.clone()), ("y", y)])),
            }
        }
    }
    r.samples = pairs;
    let k_hat = per_scale.iter().copied().fold(0.0, f64::max);
    r.constant("k_hat", k_hat);
    for (s, scale) in FW2_SCALES.iter().enumerate() {
        r.constant(&format!("ratio_at_{scale:e}"), per_scale[s]);
    }
    let (first, last) = (per_scale[0], per_scale[FW2_SCALES.len() - 1]);
    let growth = if first > 0.0 { last / first } else if last > 0.0 { f64::INFINITY } else { 1.0 };
    if growth > FW2_DIVERGENCE {
        if let Some((t, x, y)) = argmax[FW2_SCALES.len() - 1].clone() {
            // Re-evaluate before reporting.
            let d = matched_distance(p, &us, (t, &x), (t, &y)).unwrap_or(f64::INFINITY);
            let ratio = d / dist(&x, &y);
            if ratio > FW2_DIVERGENCE * first {
                r.witnesses.push(Witness::new(
                    "divergent Lipschitz ratio",
                    [("t", vec![t]), ("x", x), ("y", y), ("ratio", vec![ratio]), ("ratio_at_largest_scale", vec![first])],
                ));
            }
        }
    }
    if growth.is_finite() {
        r.constant("ratio_growth", growth);
    }
    if !r.witnesses.is_empty() {
        r.verdict = Verdict::Violated;
    }
    r.notes.push(format!(
        "distances are matched over a shared control grid of {} points, an upper bound for the Hausdorff distance",
        us.len()
    ));
    r
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let l = norm(&v);
        if l > 1e-3 && l <= 1.0 {
            return v.iter().map(|a| a / l).collect();
        }
    }
}

/// Time regularity: `K̂ = max ∫₀^{T−d} d_H(F(s, x(s)), F(s+d, x(s))) ds / d`
/// along random piecewise-linear probe curves for `d ∈ {T/8, T/16, T/32}`.
pub fn check_h1(p: &Problem, probes: usize, seed: u64) -> ConditionReport {
    let mut r = ConditionReport::new(Condition::H1, seed);
    if p.is_autonomous() {
        r.constant("K_hat", 0.0);
        r.notes.push("f and L do not depend on t; the condition holds automatically".into());
        return r;
    }
    let mut rng = rng_for(seed, 3);
    let bbox = &p.omega.bounding_box;
    let us = control_grid(p);
    let shifts = [p.horizon / 8.0, p.horizon / 16.0, p.horizon / 32.0];
    let mut k_per_shift = [0.0f64; 3];
    let mut worst_time = [0.0f64; 3];
    for _ in 0..probes {
        let knots: Vec<Vec<f64>> = (0..H1_KNOTS).map(|_| bbox.sample(&mut rng)).collect();
        let curve = |s: f64| -> Vec<f64> {
            let pos = (s / p.horizon).clamp(0.0, 1.0) * (H1_KNOTS - 1) as f64;
            let i = (pos.floor() as usize).min(H1_KNOTS - 2);
            let w = pos - i as f64;
            knots[i].iter().zip(&knots[i + 1]).map(|(a, b)| a + w * (b - a)).collect()
        };
        for (j, &d) in shifts.iter().enumerate() {
            let h = (p.horizon - d) / H1_NODES as f64;
            let mut integral = 0.0;
            let mut peak = (0.0, 0.0);
            for q in 0..H1_NODES {
                let s = h * (q as f64 + 0.5);
                let x = curve(s);
                let Some(v) = matched_distance(p, &us, (s, &x), (s + d, &x)) else {
                    r.witnesses.push(Witness::new("nonfinite evaluation", [("t", vec![s]), ("x", x)]));
                    continue;
                };
                integral += h * v;
                if v > peak.0 {
                    peak = (v, s);
                }
            }
            r.samples += H1_NODES;
            if integral / d > k_per_shift[j] {
                k_per_shift[j] = integral / d;
                worst_time[j] = peak.1;
            }
        }
    }
    let k_hat = k_per_shift.iter().copied().fold(0.0, f64::max);
    r.constant("K_hat", k_hat);
    for (d, k) in shifts.iter().zip(&k_per_shift) {
        r.constant(&format!("K_at_d={d:e}"), *k);
    }
    for j in 0..2 {
        let (a, b) = (k_per_shift[j], k_per_shift[j + 1]);
        let ratio = if a.min(b) > 0.0 { a.max(b) / a.min(b) } else if a.max(b) > 0.0 { f64::INFINITY } else { 1.0 };
        if ratio > H1_STABILITY {
            let at = if b > a { j + 1 } else { j };
            r.witnesses.push(Witness::new(
                "unstable time-shift constant",
                [
                    ("d", vec![shifts[j], shifts[j + 1]]),
                    ("K", vec![a, b]),
                    ("time", vec![worst_time[at]]),
                ],
            ));
        }
    }
    if !r.witnesses.is_empty() {
        r.verdict = Verdict::Violated;
    }
    r
}

/// Boundary point of Ω with the unit inward normal there.
struct BoundaryPoint {
    x: Vec<f64>,
    normal: Vec<f64>,
}

fn box_boundary(b: &BoxSpec, samples: usize, rng: &mut ChaCha8Rng) -> Vec<BoundaryPoint> {
    let n = b.dim();
    (0..samples)
        .map(|_| {
            let face = rng.gen_range(0..2 * n);
            let (axis, upper) = (face / 2, face % 2 == 1);
            let mut x = b.sample(rng);
            let mut normal = vec![0.0; n];
            if upper {
                x[axis] = b.upper[axis];
                normal[axis] = -1.0;
            } else {
                x[axis] = b.lower[axis];
                normal[axis] = 1.0;
            }
            BoundaryPoint { x, normal }
        })
        .collect()
}

/// Boundary points of `{h >= 0}` by bisection along random rays from inner
/// points. Rays leaving the bounding box first are discarded.
fn level_set_boundary(p: &Problem, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BoundaryPoint>, String> {
    let omega = &p.omega;
    let h = omega.h().expect("implicit region");
    let vars: Vec<Var> = (0..p.n).map(Var::State).collect();
    let grad = h.grad(&vars);
    if grad.any_fallback() {
        return Err("h is not smoothly differentiable; no Clarke-cone interior is computed".into());
    }
    let bbox = &omega.bounding_box;
    let level = |x: &[f64]| omega.level(x).unwrap();
    let mut out = Vec::new();
    for _ in 0..20 * samples {
        if out.len() == samples {
            break;
        }
        let inner = bbox.sample(rng);
        if !(level(&inner) > 0.0) {
            continue;
        }
        let d = unit_vector(rng, p.n);
        let exit = (0..p.n)
            .map(|j| {
                if d[j] > 0.0 {
                    (bbox.upper[j] - inner[j]) / d[j]
                } else if d[j] < 0.0 {
                    (bbox.lower[j] - inner[j]) / d[j]
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min);
        let at = |s: f64| -> Vec<f64> { inner.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
        if level(&at(exit)) >= 0.0 {
            continue;
        }
        let (mut lo, mut hi) = (0.0, exit);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if level(&at(mid)) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = at(lo);
        let env: Bindings = vars.iter().zip(&x).map(|(v, xi)| (v.name(), *xi)).collect();
        let Ok(g) = grad.eval(h, &env) else { continue };
        let gn = norm(&g);
        if !(gn > 0.0 && gn.is_finite()) {
            continue;
        }
        out.push(BoundaryPoint { normal: g.iter().map(|a| a / gn).collect(), x });
    }
    Ok(out)
}

/// Inward-pointing condition on ∂Ω: at each sampled boundary point some
/// control gives `f · n ≥ η` for the unit inward normal `n`. Only the state
/// components of the lifted field matter, since the cost coordinate is
/// unconstrained.
pub fn check_ipc(p: &Problem, boundary_samples: usize, eta: f64, seed: u64) -> ConditionReport {
    let mut r = ConditionReport::new(Condition::H2, seed);
    r.constant("eta", eta);
    let mut rng = rng_for(seed, 4);
    let points = match &p.omega.kind {
        RegionKind::Box(b) => {
            let lower = b.lower.iter().zip(&p.omega.bounding_box.lower).map(|(a, c)| a.max(*c)).collect();
            let upper = b.upper.iter().zip(&p.omega.bounding_box.upper).map(|(a, c)| a.min(*c)).collect();
            r.notes.push("box faces only; corners, where the Clarke cone is not a half-space, have probability zero".into());
            box_boundary(&BoxSpec::new(lower, upper), boundary_samples, &mut rng)
        }
        RegionKind::Implicit { .. } => match level_set_boundary(p, boundary_samples, &mut rng) {
            Ok(points) => points,
            Err(why) => {
                r.verdict = Verdict::NotApplicable;
                r.notes.push(why);
                return r;
            }
        },
    };
    if points.is_empty() {
        r.verdict = Verdict::NotApplicable;
        r.notes.push("no boundary point of omega found inside its bounding box".into());
        return r;
    }
    let autonomous = p.dynamics_autonomous();
    let us = control_grid(p);
    let inward_speed = |t: f64, bp: &BoundaryPoint| -> f64 {
        let mut f = vec![0.0; p.n];
        us.iter()
            .filter_map(|u| p.eval_f(t, &bp.x, u, &mut f).ok().map(|_| f.iter().zip(&bp.normal).map(|(a, b)| a * b).sum::<f64>()))
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut eta_hat = f64::INFINITY;
    for bp in &points {
        let t = if autonomous { 0.0 } else { rng.gen_range(0.0..=p.horizon) };
        let best = inward_speed(t, bp);
        eta_hat = eta_hat.min(best);
        if !(best >= eta) && !(inward_speed(t, bp) >= eta) {
            r.witnesses.push(Witness::new(
                "no inward velocity",
                [("t", vec![t]), ("x", bp.x.clone()), ("inward_normal", bp.normal.clone()), ("best_inward_speed", vec![best])],
            ));
        }
    }
    r.samples = points.len();
    if eta_hat.is_finite() {
        r.constant("eta_hat", eta_hat);
    }
    r.constant("violating_points", r.witnesses.len() as f64);
    if !r.witnesses.is_empty() {
        r.verdict = Verdict::Violated;
    }
    if !autonomous {
        r.notes.push(format!(
            "f depends on t, so the autonomous form of the condition does not apply; a heuristic at sampled times was {}",
            if r.witnesses.is_empty() { "satisfied" } else { "violated" }
        ));
        r.verdict = Verdict::NotApplicable;
    }
    r.notes.push("only the boundary of omega is checked, not the target".into());
    r
}

/// Sampled reduced Lagrangian at one `(t, x)`: per occupied velocity bin the
/// smallest `L` and the control attaining it.
struct ReducedLagrangian {
    bins: BTreeMap<Vec<i64>, (f64, usize)>,
    width: Vec<f64>,
    origin: Vec<f64>,
}

/// Midpoint convexity of the reduced Lagrangian `L̄(t, x, v)` on the sampled
/// velocity set `f(t, x, U)`.
pub fn check_v4_convexity(p: &Problem, probes: usize, seed: u64) -> ConditionReport {
    let mut r = ConditionReport::new(Condition::V4, seed);
    let mut rng = rng_for(seed, 5);
    let bbox = &p.omega.bounding_box;
    let us = control_grid(p);
    let mut per = ((51.0 * 51.0f64).powf(1.0 / p.n as f64).floor() as usize).clamp(3, 51);
    if per % 2 == 0 {
        per -= 1;
    }
    let mut finite = true;
    let mut holes = 0usize;
    let mut pairs_checked = 0usize;
    let mut worst_excess: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.gen_range(0.0..=p.horizon);
        let x = bbox.sample(&mut rng);
        let mut images = Vec::with_capacity(us.len());
        for u in &us {
            match lifted(p, t, &x, u) {
                Some(v) => images.push(v),
                None => {
                    finite = false;
                    images.push(Vec::new());
                }
            }
        }
        let Some(rl) = reduce(p.n, per, &images) else { continue };
        let occupied: Vec<&Vec<i64>> = rl.bins.keys().collect();
        let slope = adjacent_slope(&rl);
        let wmax = rl.width.iter().copied().fold(0.0, f64::max);
        let tol = 1e-9 + 2.0 * slope * wmax;
        let pairs: Vec<(usize, usize)> = if occupied.len() <= 128 {
            (0..occupied.len()).flat_map(|a| (a + 1..occupied.len()).map(move |b| (a, b))).collect()
        } else {
            (0..4096).map(|_| (rng.gen_range(0..occupied.len()), rng.gen_range(0..occupied.len()))).collect()
        };
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (a, b) in pairs {
            let (ia, ib) = (occupied[a], occupied[b]);
            if ia == ib || ia.iter().zip(ib).any(|(i, j)| (i - j) % 2 != 0) {
                continue;
            }
            let mid: Vec<i64> = ia.iter().zip(ib).map(|(i, j)| (i + j) / 2).collect();
            let Some(&(lm, um)) = rl.bins.get(&mid) else {
                holes += 1;
                continue;
            };
            pairs_checked += 1;
            let (la, ua) = rl.bins[ia];
            let (lb, ub) = rl.bins[ib];
            let excess = lm - 0.5 * (la + lb) - tol;
            if excess > 0.0 && best.map_or(true, |b| excess > b.0) {
                best = Some((excess, ua, ub, um));
            }
        }
        if let Some((excess, ua, ub, um)) = best {
            // Re-evaluate the three controls directly.
            let ev = |i: usize| lifted(p, t, &x, &us[i]).expect("evaluated above");
            let (va, vb, vm) = (ev(ua), ev(ub), ev(um));
            let n = p.n;
            let recheck = vm[n] - 0.5 * (va[n] + vb[n]) - tol;
            if recheck > 0.0 && bin_of(&rl, &vm[..n]) == bin_mid(&rl, &va[..n], &vb[..n]) {
                worst_excess = worst_excess.max(excess);
                r.witnesses.push(Witness::new(
                    "midpoint convexity fails",
                    [
                        ("t", vec![t]),
                        ("x", x.clone()),
                        ("v1", va[..n].to_vec()),
                        ("v2", vb[..n].to_vec()),
                        ("v_mid", vm[..n].to_vec()),
                        ("Lbar", vec![va[n], vb[n], vm[n]]),
                        ("u1", us[ua].clone()),
                        ("u2", us[ub].clone()),
                        ("u_mid", us[um].clone()),
                    ],
                ));
            }
        }
    }
    r.samples = probes;
    r.constant("pairs_checked", pairs_checked as f64);
    r.constant("max_excess", worst_excess);
    if !r.witnesses.is_empty() {
        r.verdict = Verdict::Violated;
    }
    r.notes.push(format!(
        "velocities binned on {per} bins per dimension over a {}-point control grid; tolerance is twice the largest adjacent-bin slope times the bin width",
        us.len()
    ));
    r.facts.insert(
        "V1".into(),
        Fact { holds: Some(finite), detail: "f and L evaluate finitely at every sampled (t, x, u)".into() },
    );
    r.facts.insert(
        "V2".into(),
        Fact { holds: Some(true), detail: "U is a box and omega lies in its bounding box, so both are bounded".into() },
    );
    r.facts.insert(
        "V3".into(),
        Fact {
            holds: Some(holes == 0),
            detail: format!("{holes} sampled velocity pairs had an unoccupied midpoint bin (nonconvex velocity set)"),
        },
    );
    r.facts.insert(
        "V5".into(),
        Fact { holds: None, detail: "not evaluated here; a feasible classical solve witnesses it".into() },
    );
    r
}

fn reduce(n: usize, per: usize, images: &[Vec<f64>]) -> Option<ReducedLagrangian> {
    let live: Vec<usize> = (0..images.len()).filter(|&i| !images[i].is_empty()).collect();
    if live.is_empty() {
        return None;
    }
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for &i in &live {
        for j in 0..n {
            lo[j] = lo[j].min(images[i][j]);
            hi[j] = hi[j].max(images[i][j]);
        }
    }
    let width: Vec<f64> = (0..n).map(|j| if hi[j] > lo[j] { (hi[j] - lo[j]) / per as f64 } else { 0.0 }).collect();
    let mut rl = ReducedLagrangian { bins: BTreeMap::new(), width, origin: lo };
    let max_index = per as i64 - 1;
    for &i in &live {
        let key: Vec<i64> = (0..n)
            .map(|j| if rl.width[j] > 0.0 { (((images[i][j] - rl.origin[j]) / rl.width[j]).floor() as i64).min(max_index) } else { 0 })
            .collect();
        let l = images[i][n];
        let e = rl.bins.entry(key).or_insert((l, i));
        if l < e.0 {
            *e = (l, i);
        }
    }
    Some(rl)
}

fn bin_of(rl: &ReducedLagrangian, v: &[f64]) -> Vec<i64> {
    let max_index = rl.bins.keys().flat_map(|k| k.iter().copied()).max().unwrap_or(0);
    v.iter()
        .enumerate()
        .map(|(j, vj)| if rl.width[j] > 0.0 { (((vj - rl.origin[j]) / rl.width[j]).floor() as i64).clamp(0, max_index.max(0)) } else { 0 })
        .collect()
}

fn bin_mid(rl: &ReducedLagrangian, a: &[f64], b: &[f64]) -> Vec<i64> {
    bin_of(rl, a).iter().zip(bin_of(rl, b)).map(|(i, j)| (i + j) / 2).collect()
}

/// Largest `|ΔL̄| / ‖Δv‖` between occupied bins adjacent along one axis.
fn adjacent_slope(rl: &ReducedLagrangian) -> f64 {
    let mut slope: f64 = 0.0;
    for (k, (l, _)) in &rl.bins {
        for j in 0..k.len() {
            let mut next = k.clone();
            next[j] += 1;
            if let Some((ln, _)) = rl.bins.get(&next) {
                slope = slope.max((ln - l).abs() / rl.width[j]);
            }
        }
    }
    slope
}
