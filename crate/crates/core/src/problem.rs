//! Problem data: dynamics, costs, state/target regions, control box, and the
//! piecewise-constant classical and Young-measure control representations.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exprlang::{EvalError, Expr, ParseError, Program, Var, VarLayout};

/// Tolerance on row sums of Young-measure weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("cannot read `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("expression in `{field}`: {source}")]
    Expr { field: String, source: ParseError },
    #[error("invariant `{check}` violated: {detail}")]
    Invariant { check: &'static str, detail: String },
    #[error("inner approximation empty at ε = {eps}")]
    InnerApproximationEmpty { eps: f64 },
}

impl ProblemError {
    pub(crate) fn invariant(check: &'static str, detail: impl Into<String>) -> Self {
        ProblemError::Invariant { check, detail: detail.into() }
    }
}

/// Open or closed reading of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Closure {
    Open,
    #[default]
    Closed,
}

impl fmt::Display for Closure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Closure::Open => "open",
            Closure::Closed => "closed",
        })
    }
}

impl std::str::FromStr for Closure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "open" => Ok(Closure::Open),
            "closed" => Ok(Closure::Closed),
            other => Err(format!("mode must be `open` or `closed`, got `{other}`")),
        }
    }
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l)
    }

    pub fn contains(&self, x: &[f64], mode: Closure) -> bool {
        self.lower.iter().zip(&self.upper).zip(x).all(|((l, u), v)| match mode {
            Closure::Open => l < v && v < u,
            Closure::Closed => l <= v && v <= u,
        })
    }

    /// Signed distance-like margin: positive inside, the smallest distance to
    /// a face; negative outside.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(x)
            .map(|((l, u), v)| (v - l).min(u - v))
            .fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance from `x` to the box (zero inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(x)
            .map(|((l, u), v)| {
                let d = (l - v).max(v - u).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Uniform sample from the box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l })
            .collect()
    }

    fn validate(&self, what: &'static str, dim: usize, strict: bool) -> Result<(), ProblemError> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(ProblemError::invariant(
                what,
                format!("expected dimension {dim}, got lower {} / upper {}", self.lower.len(), self.upper.len()),
            ));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(ProblemError::invariant(what, format!("bound {i} is not finite")));
            }
            if (strict && u <= l) || (!strict && u < l) {
                return Err(ProblemError::invariant(what, format!("component {i}: lower {l} vs upper {u}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum RegionKind {
    /// `{x : h(x) > 0}`, closure `{x : h(x) >= 0}`.
    Implicit { h: Expr, program: Program },
    Box(BoxSpec),
}

/// State or target region, always intersected with a compact bounding box.
#[derive(Debug, Clone)]
pub struct RegionSpec {
    pub kind: RegionKind,
    pub bounding_box: BoxSpec,
}

impl RegionSpec {
    pub fn boxed(b: BoxSpec, bounding_box: BoxSpec) -> Self {
        Self { kind: RegionKind::Box(b), bounding_box }
    }

    pub fn implicit(h: Expr, n: usize, bounding_box: BoxSpec) -> Result<Self, ProblemError> {
        let program = h
            .compile(VarLayout::new(n, 0))
            .map_err(|e| ProblemError::invariant("h depends on x only", e.to_string()))?;
        Ok(Self { kind: RegionKind::Implicit { h, program }, bounding_box })
    }

    pub fn dim(&self) -> usize {
        self.bounding_box.dim()
    }

    pub fn h(&self) -> Option<&Expr> {
        match &self.kind {
            RegionKind::Implicit { h, .. } => Some(h),
            RegionKind::Box(_) => None,
        }
    }

    /// Value of the defining function; `None` for box regions. Evaluation
    /// failures read as `-inf` (outside).
    pub fn level(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            RegionKind::Implicit { program, .. } => {
                Some(program.eval_at(0.0, x, &[]).ok().filter(|v| !v.is_nan()).unwrap_or(f64::NEG_INFINITY))
            }
            RegionKind::Box(_) => None,
        }
    }

    pub fn contains(&self, x: &[f64], mode: Closure) -> bool {
        if !self.bounding_box.contains(x, mode) {
            return false;
        }
        match &self.kind {
            RegionKind::Box(b) => b.contains(x, mode),
            RegionKind::Implicit { .. } => {
                let h = self.level(x).unwrap();
                match mode {
                    Closure::Open => h > 0.0,
                    Closure::Closed => h >= 0.0,
                }
            }
        }
    }

    /// Signed margin, positive inside: `min(h(x), bbox margin)` for implicit
    /// regions, the face distance for boxes.
    pub fn margin(&self, x: &[f64]) -> f64 {
        let bbox = self.bounding_box.margin(x);
        match &self.kind {
            RegionKind::Box(b) => b.margin(x).min(bbox),
            RegionKind::Implicit { .. } => self.level(x).unwrap().min(bbox),
        }
    }

    /// Distance surrogate to the closed region: exact for boxes, `max(0,-h)`
    /// plus the bounding-box distance for implicit regions.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let bbox = self.bounding_box.distance(x);
        match &self.kind {
            RegionKind::Box(b) => b.distance(x).max(bbox),
            RegionKind::Implicit { .. } => (-self.level(x).unwrap()).max(0.0) + bbox,
        }
    }

    /// Inner approximation: `{h >= eps}` for implicit regions, each face
    /// moved inward by `eps` for boxes. The bounding box is unchanged.
    pub fn shrink(&self, eps: f64) -> Result<RegionSpec, ProblemError> {
        let shrunk = match &self.kind {
            RegionKind::Box(b) => {
                let lower: Vec<f64> = b.lower.iter().map(|l| l + eps).collect();
                let upper: Vec<f64> = b.upper.iter().map(|u| u - eps).collect();
                if lower.iter().zip(&upper).any(|(l, u)| l > u) {
                    return Err(ProblemError::InnerApproximationEmpty { eps });
                }
                RegionSpec::boxed(BoxSpec::new(lower, upper), self.bounding_box.clone())
            }
            RegionKind::Implicit { h, .. } => {
                let h_eps = Expr::binary(crate::exprlang::BinOp::Sub, h.clone(), Expr::num(eps));
                RegionSpec::implicit(h_eps, self.dim(), self.bounding_box.clone())?
            }
        };
        if !shrunk.probe_nonempty() {
            return Err(ProblemError::InnerApproximationEmpty { eps });
        }
        Ok(shrunk)
    }

    /// Looks for a point of the closed region on a lattice plus random
    /// samples of the bounding box.
    fn probe_nonempty(&self) -> bool {
        if let RegionKind::Box(b) = &self.kind {
            return self.bounding_box.contains(&b.center(), Closure::Closed) || {
                let mut c = b.center();
                self.bounding_box.clamp(&mut c);
                b.contains(&c, Closure::Closed)
            };
        }
        let n = self.dim();
        let per_dim = match n {
            1 => 4001,
            2 => 201,
            3 => 41,
            _ => 11,
        };
        let mut idx = vec![0usize; n];
        let mut x = vec![0.0; n];
        loop {
            for d in 0..n {
                let (l, u) = (self.bounding_box.lower[d], self.bounding_box.upper[d]);
                x[d] = l + (u - l) * idx[d] as f64 / (per_dim - 1) as f64;
            }
            if self.contains(&x, Closure::Closed) {
                return true;
            }
            let mut d = 0;
            loop {
                if d == n {
                    break;
                }
                idx[d] += 1;
                if idx[d] < per_dim {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        (0..10_000).any(|_| self.contains(&self.bounding_box.sample(&mut rng), Closure::Closed))
    }
}

/// Wire format of a region.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFile {
    pub kind: RegionFileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    pub bounding_box: BoxSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionFileKind {
    Implicit,
    Box,
}

/// Wire format of a problem file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub name: String,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T", alias = "t")]
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub f: Vec<String>,
    pub lagrangian: String,
    pub terminal_cost: String,
    pub omega: RegionFile,
    pub target: RegionFile,
    pub controls: BoxSpec,
}

/// A validated optimal control problem with compiled evaluators.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub f: Vec<Expr>,
    pub lagrangian: Expr,
    pub terminal_cost: Expr,
    pub omega: RegionSpec,
    pub target: RegionSpec,
    pub controls: BoxSpec,
    f_prog: Vec<Program>,
    l_prog: Program,
    g_prog: Program,
}

fn parse_field(field: impl Into<String>, src: &str, allowed: &dyn Fn(Var) -> bool, declared: &[String]) -> Result<Expr, ProblemError> {
    let field = field.into();
    let e = Expr::parse(src).map_err(|source| ProblemError::Expr { field: field.clone(), source })?;
    if let Some(bad) = e.variables().into_iter().find(|v| !allowed(*v)) {
        return Err(ProblemError::Expr {
            field,
            source: ParseError::UnknownIdentifier {
                name: bad.name(),
                offset: src.find(&bad.name()).unwrap_or(0),
                declared: declared.to_vec(),
            },
        });
    }
    Ok(e)
}

fn region_from_file(r: &RegionFile, field: &str, n: usize) -> Result<RegionSpec, ProblemError> {
    r.bounding_box.validate(if field == "omega" { "omega bounding box" } else { "target bounding box" }, n, true)?;
    let state_names: Vec<String> = (0..n).map(|i| Var::State(i).name()).collect();
    match r.kind {
        RegionFileKind::Implicit => {
            let src = r.h.as_deref().ok_or_else(|| ProblemError::Schema {
                path: format!("{field}.h"),
                message: "implicit regions need `h`".into(),
            })?;
            let h = parse_field(format!("{field}.h"), src, &|v| matches!(v, Var::State(i) if i < n), &state_names)?;
            RegionSpec::implicit(h, n, r.bounding_box.clone())
        }
        RegionFileKind::Box => {
            let (Some(lower), Some(upper)) = (&r.lower, &r.upper) else {
                return Err(ProblemError::Schema {
                    path: format!("{field}.lower"),
                    message: "box regions need `lower` and `upper`".into(),
                });
            };
            let b = BoxSpec::new(lower.clone(), upper.clone());
            b.validate(if field == "omega" { "omega box" } else { "target box" }, n, false)?;
            Ok(RegionSpec::boxed(b, r.bounding_box.clone()))
        }
    }
}

impl ProblemFile {
    pub fn build(&self) -> Result<Problem, ProblemError> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(ProblemError::invariant("n >= 1 and m >= 1", format!("n = {n}, m = {m}")));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ProblemError::invariant("T > 0", format!("T = {}", self.horizon)));
        }
        if self.x0.len() != n {
            return Err(ProblemError::invariant("len(x0) = n", format!("got {}", self.x0.len())));
        }
        if self.f.len() != n {
            return Err(ProblemError::invariant("len(f) = n", format!("got {}", self.f.len())));
        }
        self.controls.validate("controls box", m, false)?;

        let mut all_names = vec!["t".to_string()];
        all_names.extend((0..n).map(|i| Var::State(i).name()));
        all_names.extend((0..m).map(|j| Var::Control(j).name()));
        let state_names: Vec<String> = (0..n).map(|i| Var::State(i).name()).collect();
        let in_layout = |v: Var| VarLayout::new(n, m).slot(v).is_some();
        let only_state = |v: Var| matches!(v, Var::State(i) if i < n);

        let f = self
            .f
            .iter()
            .enumerate()
            .map(|(i, s)| parse_field(format!("f[{i}]"), s, &in_layout, &all_names))
            .collect::<Result<Vec<_>, _>>()?;
        let lagrangian = parse_field("lagrangian", &self.lagrangian, &in_layout, &all_names)?;
        let terminal_cost = parse_field("terminal_cost", &self.terminal_cost, &only_state, &state_names)?;
        let omega = region_from_file(&self.omega, "omega", n)?;
        let target = region_from_file(&self.target, "target", n)?;

        let p = Problem::assemble(
            self.name.clone(),
            self.horizon,
            self.x0.clone(),
            f,
            lagrangian,
            terminal_cost,
            omega,
            target,
            self.controls.clone(),
        );
        p.validate()?;
        Ok(p)
    }

    pub fn from_json_str(src: &str) -> Result<ProblemFile, ProblemError> {
        let de = &mut serde_json::Deserializer::from_str(src);
        serde_path_to_error::deserialize(de).map_err(|e| ProblemError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }
}

/// Reads, parses and validates a problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|source| ProblemError::Io { path: path.display().to_string(), source })?;
    Problem::from_json_str(&src)
}

impl Problem {
    pub fn from_json_str(src: &str) -> Result<Problem, ProblemError> {
        ProblemFile::from_json_str(src)?.build()
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        name: String,
        horizon: f64,
        x0: Vec<f64>,
        f: Vec<Expr>,
        lagrangian: Expr,
        terminal_cost: Expr,
        omega: RegionSpec,
        target: RegionSpec,
        controls: BoxSpec,
    ) -> Problem {
        let layout = VarLayout::new(x0.len(), controls.dim());
        let f_prog = f.iter().map(|e| e.compile(layout).expect("checked variables")).collect();
        let l_prog = lagrangian.compile(layout).expect("checked variables");
        let g_prog = terminal_cost.compile(layout).expect("checked variables");
        Problem {
            name,
            n: layout.n,
            m: layout.m,
            horizon,
            x0,
            f,
            lagrangian,
            terminal_cost,
            omega,
            target,
            controls,
            f_prog,
            l_prog,
            g_prog,
        }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        if !self.omega.contains(&self.x0, Closure::Closed) {
            return Err(ProblemError::invariant("x0 ∈ Ω", format!("x0 = {:?}", self.x0)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dx = vec![0.0; self.n];
        for _ in 0..100 {
            let t = rng.gen_range(0.0..=self.horizon);
            let x = self.omega.bounding_box.sample(&mut rng);
            let u = self.controls.sample(&mut rng);
            let ok = self.eval_f(t, &x, &u, &mut dx).is_ok()
                && dx.iter().all(|v| v.is_finite())
                && self.eval_lagrangian(t, &x, &u).is_ok_and(f64::is_finite);
            if !ok {
                return Err(ProblemError::invariant(
                    "f and L evaluate finitely",
                    format!("at t = {t}, x = {x:?}, u = {u:?}"),
                ));
            }
            for (region, check) in [(&self.omega, "omega h is finite"), (&self.target, "target h is finite")] {
                if let RegionKind::Implicit { program, .. } = &region.kind {
                    let xs = region.bounding_box.sample(&mut rng);
                    if !program.eval_at(0.0, &xs, &[]).is_ok_and(f64::is_finite) {
                        return Err(ProblemError::invariant(check, format!("at x = {xs:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Same problem with different state and target regions.
    pub fn with_regions(&self, omega: RegionSpec, target: RegionSpec) -> Problem {
        let mut p = self.clone();
        p.omega = omega;
        p.target = target;
        p
    }

    pub fn layout(&self) -> VarLayout {
        VarLayout::new(self.n, self.m)
    }

    pub fn eval_f(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let slots = self.slots(t, x, u);
        for (o, p) in out.iter_mut().zip(&self.f_prog) {
            *o = p.eval(&slots)?;
        }
        Ok(())
    }

    pub fn eval_lagrangian(&self, t: f64, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
        self.l_prog.eval(&self.slots(t, x, u))
    }

    pub fn eval_terminal(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.g_prog.eval_at(0.0, x, &vec![0.0; self.m])
    }

    /// `(f, L)` at one point, written into `out` of length `n + 1`.
    pub fn eval_lifted(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let slots = self.slots(t, x, u);
        for (o, p) in out.iter_mut().zip(&self.f_prog) {
            *o = p.eval(&slots)?;
        }
        out[self.n] = self.l_prog.eval(&slots)?;
        Ok(())
    }

    fn slots(&self, t: f64, x: &[f64], u: &[f64]) -> smallvec::SmallVec<[f64; 16]> {
        let mut s = smallvec::SmallVec::with_capacity(1 + self.n + self.m);
        s.push(t);
        s.extend_from_slice(&x[..self.n]);
        s.extend_from_slice(&u[..self.m]);
        s
    }

    /// True when neither `f` nor `L` mentions `t`.
    pub fn is_autonomous(&self) -> bool {
        !self.f.iter().any(|e| e.depends_on(Var::Time)) && !self.lagrangian.depends_on(Var::Time)
    }

    pub fn dynamics_autonomous(&self) -> bool {
        !self.f.iter().any(|e| e.depends_on(Var::Time))
    }
}

/// `region_contains` from the problem-level API.
pub fn region_contains(r: &RegionSpec, x: &[f64], mode: Closure) -> bool {
    r.contains(x, mode)
}

fn validate_time_grid(grid: &[f64], horizon: Option<f64>) -> Result<(), ProblemError> {
    if grid.len() < 2 {
        return Err(ProblemError::invariant("time grid has at least two breakpoints", format!("got {}", grid.len())));
    }
    if grid[0] != 0.0 {
        return Err(ProblemError::invariant("time grid starts at 0", format!("starts at {}", grid[0])));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ProblemError::invariant("time grid strictly increasing", format!("{grid:?}")));
    }
    if let Some(t) = horizon {
        let end = *grid.last().unwrap();
        if (end - t).abs() > 1e-9 * t.max(1.0) {
            return Err(ProblemError::invariant("time grid ends at T", format!("ends at {end}, T = {t}")));
        }
    }
    Ok(())
}

fn uniform_grid(horizon: f64, k: usize) -> Vec<f64> {
    (0..=k).map(|i| if i == k { horizon } else { horizon * i as f64 / k as f64 }).collect()
}

/// Locates the interval of `grid` containing `t` (right-continuous, last
/// interval closed).
pub fn interval_index(grid: &[f64], t: f64) -> usize {
    let k = grid.len() - 1;
    match grid.binary_search_by(|g| g.partial_cmp(&t).unwrap()) {
        Ok(i) => i.min(k - 1),
        Err(i) => i.saturating_sub(1).min(k - 1),
    }
}

/// Piecewise-constant control: `values[k]` on `[time_grid[k], time_grid[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalControl {
    pub time_grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ClassicalControl {
    pub fn new(time_grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, ProblemError> {
        validate_time_grid(&time_grid, None)?;
        if values.len() + 1 != time_grid.len() {
            return Err(ProblemError::invariant(
                "one control value per interval",
                format!("{} intervals, {} values", time_grid.len() - 1, values.len()),
            ));
        }
        Ok(Self { time_grid, values })
    }

    /// `K` equal intervals over `[0, T]`.
    pub fn uniform(horizon: f64, values: Vec<Vec<f64>>) -> Self {
        Self { time_grid: uniform_grid(horizon, values.len()), values }
    }

    pub fn constant(horizon: f64, u: Vec<f64>) -> Self {
        Self::uniform(horizon, vec![u])
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        &self.values[interval_index(&self.time_grid, t)]
    }

    /// Checks the grid spans `[0, T]` and every value lies in `U`.
    pub fn validate_for(&self, p: &Problem) -> Result<(), ProblemError> {
        validate_time_grid(&self.time_grid, Some(p.horizon))?;
        for (k, v) in self.values.iter().enumerate() {
            if v.len() != p.m || !p.controls.contains(v, Closure::Closed) {
                return Err(ProblemError::invariant("control values lie in U", format!("interval {k}: {v:?}")));
            }
        }
        Ok(())
    }

    /// Dirac Young measure carrying the same control.
    pub fn to_young(&self) -> YoungMeasureControl {
        YoungMeasureControl {
            time_grid: self.time_grid.clone(),
            atoms: self.values.clone(),
            weights: (0..self.values.len())
                .map(|k| (0..self.values.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }
}

/// Piecewise-constant family of finitely supported probability measures on
/// `U`: on interval `k`, atom `i` carries weight `weights[k][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoungMeasureControl {
    pub time_grid: Vec<f64>,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl YoungMeasureControl {
    pub fn new(time_grid: Vec<f64>, atoms: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Self, ProblemError> {
        validate_time_grid(&time_grid, None)?;
        if atoms.is_empty() {
            return Err(ProblemError::invariant("at least one atom", "no atoms"));
        }
        if weights.len() + 1 != time_grid.len() {
            return Err(ProblemError::invariant(
                "one weight row per interval",
                format!("{} intervals, {} rows", time_grid.len() - 1, weights.len()),
            ));
        }
        for (k, row) in weights.iter().enumerate() {
            if row.len() != atoms.len() {
                return Err(ProblemError::invariant("one weight per atom", format!("row {k} has {} entries", row.len())));
            }
            if row.iter().any(|w| !(*w >= 0.0)) {
                return Err(ProblemError::invariant("weights are nonnegative", format!("row {k}: {row:?}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(ProblemError::invariant("weight rows sum to 1", format!("row {k} sums to {s}")));
            }
        }
        Ok(Self { time_grid, atoms, weights })
    }

    /// One interval spanning `[0, T]`.
    pub fn stationary(horizon: f64, atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, ProblemError> {
        Self::new(vec![0.0, horizon], atoms, vec![weights])
    }

    pub fn intervals(&self) -> usize {
        self.weights.len()
    }

    pub fn validate_for(&self, p: &Problem) -> Result<(), ProblemError> {
        validate_time_grid(&self.time_grid, Some(p.horizon))?;
        for (i, a) in self.atoms.iter().enumerate() {
            if a.len() != p.m || !p.controls.contains(a, Closure::Closed) {
                return Err(ProblemError::invariant("atoms lie in U", format!("atom {i}: {a:?}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    /// Problem JSON with the given pieces; regions are boxes unless an `h`
    /// is supplied.
    pub fn problem_json(f: &str, l: &str, g: &str, x0: f64, omega: &str, target: &str) -> String {
        format!(
            r#"{{"name":"fixture","n":1,"m":1,"T":1,"x0":[{x0}],"f":["{f}"],"lagrangian":"{l}","terminal_cost":"{g}",
            "omega":{omega},"target":{target},"controls":{{"lower":[-1],"upper":[1]}}}}"#
        )
    }

    pub fn box_region(lo: f64, hi: f64) -> String {
        format!(r#"{{"kind":"box","lower":[{lo}],"upper":[{hi}],"bounding_box":{{"lower":[{lo}],"upper":[{hi}]}}}}"#)
    }

    pub fn example1() -> String {
        problem_json("u1", "(u1^2-1)^2 + x1^2", "0", 0.0, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn implicit(h: &str, lo: f64, hi: f64) -> RegionSpec {
        RegionSpec::implicit(Expr::parse(h).unwrap(), 1, BoxSpec::new(vec![lo], vec![hi])).unwrap()
    }

    #[test]
    fn loads_double_well_problem() {
        let p = Problem::from_json_str(&example1()).unwrap();
        assert_eq!((p.n, p.m, p.horizon), (1, 1, 1.0));
        assert_eq!(p.eval_lagrangian(0.0, &[0.0], &[1.0]).unwrap(), 0.0);
        assert!(p.is_autonomous());
    }

    #[test]
    fn rejects_zero_horizon() {
        let src = example1().replace(r#""T":1"#, r#""T":0"#);
        let err = Problem::from_json_str(&src).unwrap_err();
        assert!(err.to_string().contains("T > 0"), "{err}");
    }

    #[test]
    fn rejects_initial_point_outside_omega() {
        let src = problem_json("u1", "0", "0", 3.0, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0));
        let err = Problem::from_json_str(&src).unwrap_err();
        assert!(err.to_string().contains("x0 ∈ Ω"), "{err}");
    }

    #[test]
    fn schema_errors_carry_the_field_path() {
        let src = example1().replace(r#""x0":[0]"#, r#""x0":"zero""#);
        match Problem::from_json_str(&src).unwrap_err() {
            ProblemError::Schema { path, .. } => assert_eq!(path, "x0"),
            other => panic!("unexpected {other}"),
        }
        let src = example1().replace(r#""kind":"box""#, r#""kind":"ball""#);
        match Problem::from_json_str(&src).unwrap_err() {
            ProblemError::Schema { path, .. } => assert_eq!(path, "omega.kind"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_variables_list_declared_names() {
        let src = problem_json("u2", "0", "0", 0.0, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0));
        match Problem::from_json_str(&src).unwrap_err() {
            ProblemError::Expr { field, source: ParseError::UnknownIdentifier { name, declared, .. } } => {
                assert_eq!(field, "f[0]");
                assert_eq!(name, "u2");
                assert_eq!(declared, vec!["t", "x1", "u1"]);
            }
            other => panic!("unexpected {other}"),
        }
        let src = problem_json("u1", "0", "u1", 0.0, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0));
        assert!(matches!(Problem::from_json_str(&src), Err(ProblemError::Expr { .. })));
    }

    #[test]
    fn implicit_region_membership() {
        let r = implicit("1 - x1^2", -2.0, 2.0);
        assert!(region_contains(&r, &[0.0], Closure::Open));
        assert!(!region_contains(&r, &[1.0], Closure::Open));
        assert!(region_contains(&r, &[1.0], Closure::Closed));
        let b = RegionSpec::boxed(BoxSpec::new(vec![-2.0], vec![2.0]), BoxSpec::new(vec![-2.0], vec![2.0]));
        assert!(!region_contains(&b, &[3.0], Closure::Open));
        assert!(!region_contains(&b, &[3.0], Closure::Closed));
    }

    #[test]
    fn open_membership_implies_closed() {
        let regions = [
            implicit("1 - x1^2", -2.0, 2.0),
            implicit("x1 - 0.5", -1.0, 1.0),
            RegionSpec::boxed(BoxSpec::new(vec![-1.0], vec![0.5]), BoxSpec::new(vec![-2.0], vec![2.0])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in &regions {
            for _ in 0..10_000 {
                let x = [rng.gen_range(-2.5..2.5)];
                if r.contains(&x, Closure::Open) {
                    assert!(r.contains(&x, Closure::Closed));
                }
            }
        }
    }

    #[test]
    fn shrinking() {
        let r = implicit("1 - x1^2", -2.0, 2.0).shrink(0.19).unwrap();
        assert!(r.contains(&[0.899_999_9], Closure::Closed));
        assert!(!r.contains(&[0.9001], Closure::Closed));
        assert!(r.contains(&[-0.899_999_9], Closure::Closed));
        let b = RegionSpec::boxed(BoxSpec::new(vec![-2.0], vec![2.0]), BoxSpec::new(vec![-2.0], vec![2.0]));
        let s = b.shrink(0.5).unwrap();
        assert!(s.contains(&[1.5], Closure::Closed) && !s.contains(&[1.5001], Closure::Closed));
        assert!(matches!(b.shrink(2.5), Err(ProblemError::InnerApproximationEmpty { .. })));
        assert!(matches!(
            implicit("1 - x1^2", -2.0, 2.0).shrink(1.5),
            Err(ProblemError::InnerApproximationEmpty { .. })
        ));
    }

    #[test]
    fn young_measure_rows_must_be_stochastic() {
        let ok = YoungMeasureControl::stationary(1.0, vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5]);
        assert!(ok.is_ok());
        let bad = YoungMeasureControl::stationary(1.0, vec![vec![1.0], vec![-1.0]], vec![0.5, 0.6]);
        assert!(bad.is_err());
        let neg = YoungMeasureControl::stationary(1.0, vec![vec![1.0], vec![-1.0]], vec![1.5, -0.5]);
        assert!(neg.is_err());
    }

    #[test]
    fn controls_outside_u_are_rejected() {
        let p = Problem::from_json_str(&example1()).unwrap();
        assert!(ClassicalControl::constant(1.0, vec![1.0]).validate_for(&p).is_ok());
        assert!(ClassicalControl::constant(1.0, vec![1.5]).validate_for(&p).is_err());
        assert!(ClassicalControl::constant(0.5, vec![0.0]).validate_for(&p).is_err());
    }

    #[test]
    fn interval_lookup() {
        let g = [0.0, 0.25, 0.5, 1.0];
        assert_eq!(interval_index(&g, 0.0), 0);
        assert_eq!(interval_index(&g, 0.25), 1);
        assert_eq!(interval_index(&g, 0.3), 1);
        assert_eq!(interval_index(&g, 1.0), 2);
    }
}
