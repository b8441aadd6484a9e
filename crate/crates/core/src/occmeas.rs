//! Grid discretization of the occupation-measure relaxation.
//!
//! Time and state are split into cells and represented by their centers;
//! controls are represented by equispaced nodes that include the endpoints
//! of `U`. Test functions are the monomials `t^a x^α` of total degree at
//! most `test_degree`, and the weak Liouville identity is imposed with
//! midpoint quadrature at the cell centers.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlRef, Trajectory};
use crate::exprlang::EvalError;
use crate::lp::{LinearProgram, LpError};
use crate::problem::{BoxSpec, Closure, Problem, ProblemError, RegionSpec};

#[derive(Debug, thiserror::Error)]
pub enum OccError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("inner approximation empty at ε = {eps}")]
    InnerApproximationEmpty { eps: f64 },
    #[error("evaluation failed at a cell center: {0}")]
    Eval(#[from] EvalError),
    #[error("occupation LP infeasible (row `{row}`): {source}")]
    Infeasible { row: String, source: LpError },
    #[error("occupation LP unbounded: check that L and g are bounded below on the box")]
    Unbounded,
    #[error("LP solver failure: {0}")]
    Solver(LpError),
    #[error("malformed LP file, line {line}: {message}")]
    LpFormat { line: usize, message: String },
}

impl From<ProblemError> for OccError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::InnerApproximationEmpty { eps } => OccError::InnerApproximationEmpty { eps },
            other => OccError::Grid(other.to_string()),
        }
    }
}

/// Resolution of the discretization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nt: usize,
    /// Cells per state dimension over the bounding box of Ω (the target grid
    /// uses the same counts over the target's bounding box).
    pub nx: Vec<usize>,
    /// Nodes per control dimension, endpoints included.
    pub nu: Vec<usize>,
    pub test_degree: u32,
}

impl GridSpec {
    pub fn uniform(p: &Problem, nt: usize, nx: usize, nu: usize, test_degree: u32) -> Self {
        Self { nt, nx: vec![nx; p.n], nu: vec![nu; p.m], test_degree }
    }

    /// Default resolution: 20 × 40 per state dimension × 21 per control
    /// dimension, degree 4.
    pub fn default_for(p: &Problem) -> Self {
        Self::uniform(p, 20, 40, 21, 4)
    }

    pub fn validate(&self, p: &Problem) -> Result<(), OccError> {
        if self.nx.len() != p.n || self.nu.len() != p.m {
            return Err(OccError::Grid(format!(
                "expected {} state and {} control counts, got {} and {}",
                p.n,
                p.m,
                self.nx.len(),
                self.nu.len()
            )));
        }
        if self.nt < 2 || self.nx.iter().chain(&self.nu).any(|&c| c < 2) {
            return Err(OccError::Grid("all counts must be at least 2".into()));
        }
        if self.test_degree < 1 {
            return Err(OccError::Grid("test degree must be at least 1".into()));
        }
        Ok(())
    }

    /// Scales every count by `factor`, keeping the degree.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            nt: self.nt * factor,
            nx: self.nx.iter().map(|c| c * factor).collect(),
            nu: self.nu.iter().map(|c| (c - 1) * factor + 1).collect(),
            test_degree: self.test_degree,
        }
    }
}

/// Exponent vectors over `(t, x1..xn)` of total degree `<= degree`, graded
/// by degree and then in reverse lexicographic order of the exponents.
pub fn monomials(n: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if dim == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=left).rev() {
            prefix.push(k);
            rec(dim - 1, left - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree {
        rec(n + 1, d, &mut Vec::new(), &mut out);
    }
    out
}

pub fn monomial_name(exps: &[u32]) -> String {
    let mut parts = Vec::new();
    for (i, &e) in exps.iter().enumerate() {
        if e == 0 {
            continue;
        }
        let var = if i == 0 { "t".to_string() } else { format!("x{i}") };
        parts.push(if e == 1 { var } else { format!("{var}^{e}") });
    }
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

fn centers(lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    let w = (hi - lo) / cells as f64;
    (0..cells).map(|k| lo + (k as f64 + 0.5) * w).collect()
}

fn nodes(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| if k + 1 == count { hi } else { lo + (hi - lo) * k as f64 / (count - 1) as f64 })
        .collect()
}

/// Cell index of `v` on `cells` equal cells of `[lo, hi]`, clamped.
fn cell_of(v: f64, lo: f64, hi: f64, cells: usize) -> usize {
    let k = ((v - lo) / (hi - lo) * cells as f64).floor();
    (k.max(0.0) as usize).min(cells - 1)
}

fn nearest_node(v: f64, lo: f64, hi: f64, count: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let k = ((v - lo) / (hi - lo) * (count - 1) as f64).round();
    (k.max(0.0) as usize).min(count - 1)
}

/// Product grid of points, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
struct Lattice {
    axes: Vec<Vec<f64>>,
}

impl Lattice {
    fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn point(&self, mut flat: usize, out: &mut [f64]) {
        for d in (0..self.axes.len()).rev() {
            let k = self.axes[d].len();
            out[d] = self.axes[d][flat % k];
            flat /= k;
        }
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (i, a)| acc * a.len() + i)
    }
}

/// Cell geometry for one problem and grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub grid: GridSpec,
    pub horizon: f64,
    pub t_centers: Vec<f64>,
    x: Lattice,
    u: Lattice,
    target: Lattice,
    omega_box: BoxSpec,
    target_box: BoxSpec,
    controls: BoxSpec,
}

impl Discretization {
    pub fn new(p: &Problem, grid: &GridSpec) -> Result<Self, OccError> {
        grid.validate(p)?;
        let axes = |b: &BoxSpec, counts: &[usize]| Lattice {
            axes: (0..b.dim()).map(|d| centers(b.lower[d], b.upper[d], counts[d])).collect(),
        };
        Ok(Self {
            grid: grid.clone(),
            horizon: p.horizon,
            t_centers: centers(0.0, p.horizon, grid.nt),
            x: axes(&p.omega.bounding_box, &grid.nx),
            u: Lattice {
                axes: (0..p.m).map(|d| nodes(p.controls.lower[d], p.controls.upper[d], grid.nu[d])).collect(),
            },
            target: axes(&p.target.bounding_box, &grid.nx),
            omega_box: p.omega.bounding_box.clone(),
            target_box: p.target.bounding_box.clone(),
            controls: p.controls.clone(),
        })
    }

    pub fn x_cells(&self) -> usize {
        self.x.len()
    }

    pub fn u_nodes(&self) -> usize {
        self.u.len()
    }

    pub fn mu_len(&self) -> usize {
        self.grid.nt * self.x.len() * self.u.len()
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    /// `(t, x, u)` of μ cell `idx`.
    pub fn mu_cell(&self, idx: usize, x: &mut [f64], u: &mut [f64]) -> f64 {
        let nu = self.u.len();
        let nx = self.x.len();
        self.u.point(idx % nu, u);
        self.x.point((idx / nu) % nx, x);
        self.t_centers[idx / (nu * nx)]
    }

    pub fn target_cell(&self, idx: usize, x: &mut [f64]) {
        self.target.point(idx, x);
    }

    fn mu_index(&self, it: usize, ix: usize, iu: usize) -> usize {
        (it * self.x.len() + ix) * self.u.len() + iu
    }

    fn x_index(&self, x: &[f64], b: &BoxSpec, lattice: &Lattice) -> usize {
        let idx: Vec<usize> =
            (0..x.len()).map(|d| cell_of(x[d], b.lower[d], b.upper[d], lattice.axes[d].len())).collect();
        lattice.flatten(&idx)
    }

    fn u_index(&self, u: &[f64]) -> usize {
        let idx: Vec<usize> = (0..u.len())
            .map(|d| nearest_node(u[d], self.controls.lower[d], self.controls.upper[d], self.u.axes[d].len()))
            .collect();
        self.u.flatten(&idx)
    }
}

/// Assembled occupation LP together with its column map.
#[derive(Debug, Clone)]
pub struct OccupationLp {
    pub disc: Discretization,
    pub lp: LinearProgram,
    pub tests: Vec<Vec<u32>>,
    /// μ cell index of each of the first `mu_columns.len()` LP columns.
    pub mu_columns: Vec<usize>,
    /// Target cell index of each remaining LP column.
    pub target_columns: Vec<usize>,
    pub mode: Closure,
    pub eps: f64,
}

fn powers(v: f64, degree: usize) -> Vec<f64> {
    let mut p = vec![1.0; degree + 1];
    for k in 1..=degree {
        p[k] = p[k - 1] * v;
    }
    p
}

/// Value and gradient `(∂t, ∂x1..∂xn)` of monomial `e` given per-variable
/// power tables.
fn monomial_parts(e: &[u32], pw: &[Vec<f64>], grad: &mut [f64]) -> f64 {
    let mut val = 1.0;
    for (i, &k) in e.iter().enumerate() {
        val *= pw[i][k as usize];
    }
    for j in 0..e.len() {
        if e[j] == 0 {
            grad[j] = 0.0;
            continue;
        }
        let mut g = e[j] as f64 * pw[j][e[j] as usize - 1];
        for (i, &k) in e.iter().enumerate() {
            if i != j {
                g *= pw[i][k as usize];
            }
        }
        grad[j] = g;
    }
    val
}

/// Builds the LP for `mode` on the regions shrunk by `eps` (no shrinking for
/// `eps = 0`).
pub fn assemble_lp(p: &Problem, grid: &GridSpec, mode: Closure, eps: f64) -> Result<OccupationLp, OccError> {
    let disc = Discretization::new(p, grid)?;
    let (omega, target): (RegionSpec, RegionSpec) = if eps > 0.0 {
        (p.omega.shrink(eps)?, p.target.shrink(eps)?)
    } else {
        (p.omega.clone(), p.target.clone())
    };
    let n = p.n;
    let deg = grid.test_degree as usize;
    let tests = monomials(n, grid.test_degree);
    let rows = tests.len() + 1;

    let mut x = vec![0.0; n];
    let x_ok: Vec<bool> = (0..disc.x.len())
        .map(|ix| {
            disc.x.point(ix, &mut x);
            omega.contains(&x, mode)
        })
        .collect();
    let mut mu_columns = Vec::new();
    for idx in 0..disc.mu_len() {
        if x_ok[(idx / disc.u.len()) % disc.x.len()] {
            mu_columns.push(idx);
        }
    }
    let target_columns: Vec<usize> = (0..disc.target.len())
        .filter(|&j| {
            disc.target.point(j, &mut x);
            target.contains(&x, mode)
        })
        .collect();
    if mu_columns.is_empty() || target_columns.is_empty() {
        return Err(OccError::InnerApproximationEmpty { eps });
    }

    let cols = mu_columns.len() + target_columns.len();
    let mut lp = LinearProgram::new(rows, cols);
    let (mu_part, target_part) = lp.matrix_mut().split_at_mut(mu_columns.len() * rows);
    let costs: Vec<Result<f64, EvalError>> = mu_part
        .par_chunks_mut(rows)
        .zip(mu_columns.par_iter())
        .map(|(col, &idx)| {
            let mut x = vec![0.0; n];
            let mut u = vec![0.0; p.m];
            let mut fx = vec![0.0; n + 1];
            let mut grad = vec![0.0; n + 1];
            let t = disc.mu_cell(idx, &mut x, &mut u);
            p.eval_lifted(t, &x, &u, &mut fx)?;
            let pw: Vec<Vec<f64>> = std::iter::once(t).chain(x.iter().copied()).map(|v| powers(v, deg)).collect();
            for (r, e) in tests.iter().enumerate() {
                monomial_parts(e, &pw, &mut grad);
                col[r] = grad[0] + (0..n).map(|i| grad[1 + i] * fx[i]).sum::<f64>();
            }
            Ok(fx[n])
        })
        .collect();
    let target_costs: Vec<Result<f64, EvalError>> = target_part
        .par_chunks_mut(rows)
        .zip(target_columns.par_iter())
        .map(|(col, &j)| {
            let mut x = vec![0.0; n];
            let mut grad = vec![0.0; n + 1];
            disc.target.point(j, &mut x);
            let pw: Vec<Vec<f64>> =
                std::iter::once(p.horizon).chain(x.iter().copied()).map(|v| powers(v, deg)).collect();
            for (r, e) in tests.iter().enumerate() {
                col[r] = -monomial_parts(e, &pw, &mut grad);
            }
            col[rows - 1] = 1.0;
            p.eval_terminal(&x)
        })
        .collect();
    for (c, v) in lp.c.iter_mut().zip(costs.into_iter().chain(target_costs)) {
        *c = v?;
    }
    let pw0: Vec<Vec<f64>> = std::iter::once(0.0).chain(p.x0.iter().copied()).map(|v| powers(v, deg)).collect();
    let mut grad = vec![0.0; n + 1];
    for (r, e) in tests.iter().enumerate() {
        lp.b[r] = -monomial_parts(e, &pw0, &mut grad);
    }
    lp.b[rows - 1] = 1.0;
    Ok(OccupationLp { disc, lp, tests, mu_columns, target_columns, mode, eps })
}

impl OccupationLp {
    pub fn row_name(&self, row: usize) -> String {
        if row < self.tests.len() {
            format!("test function {}", monomial_name(&self.tests[row]))
        } else {
            "normalization".into()
        }
    }

    pub fn solve(&self) -> Result<DiscreteOccupationMeasure, OccError> {
        let sol = self.lp.solve().map_err(|e| match e {
            LpError::Infeasible { row, .. } => OccError::Infeasible { row: self.row_name(row), source: e },
            LpError::Unbounded { .. } => OccError::Unbounded,
            other => OccError::Solver(other),
        })?;
        let mut mu = vec![0.0; self.disc.mu_len()];
        let mut boundary = vec![0.0; self.disc.target_len()];
        let k = self.mu_columns.len();
        for (&idx, &w) in self.mu_columns.iter().zip(&sol.x[..k]) {
            mu[idx] = w;
        }
        for (&idx, &w) in self.target_columns.iter().zip(&sol.x[k..]) {
            boundary[idx] = w;
        }
        Ok(DiscreteOccupationMeasure {
            disc: self.disc.clone(),
            mu,
            boundary,
            objective: sol.objective,
            max_residual: sol.max_residual,
            iterations: sol.iterations,
            mode: self.mode,
            eps: self.eps,
        })
    }

    /// Sparse triplet text dump:
    ///
    /// ```text
    /// rows <m>
    /// cols <n>
    /// entries <nnz>
    /// <row> <col> <value>      (nnz lines)
    /// rhs
    /// <row> <value>            (m lines)
    /// objective
    /// <col> <value>            (n lines)
    /// ```
    ///
    /// The problem is `min objectiveᵀx  s.t.  A x = rhs, x ≥ 0`; values use
    /// the shortest representation that round-trips.
    pub fn to_triplet_text(&self) -> String {
        write_triplets(&self.lp)
    }
}

pub fn write_triplets(lp: &LinearProgram) -> String {
    let mut out = String::new();
    let mut entries = Vec::new();
    for j in 0..lp.cols {
        for (i, v) in lp.column(j).iter().enumerate() {
            if *v != 0.0 {
                entries.push((i, j, *v));
            }
        }
    }
    let _ = writeln!(out, "rows {}", lp.rows);
    let _ = writeln!(out, "cols {}", lp.cols);
    let _ = writeln!(out, "entries {}", entries.len());
    for (i, j, v) in entries {
        let _ = writeln!(out, "{i} {j} {v:?}");
    }
    out.push_str("rhs\n");
    for (i, v) in lp.b.iter().enumerate() {
        let _ = writeln!(out, "{i} {v:?}");
    }
    out.push_str("objective\n");
    for (j, v) in lp.c.iter().enumerate() {
        let _ = writeln!(out, "{j} {v:?}");
    }
    out
}

/// Parses the format written by [`write_triplets`].
pub fn read_triplets(src: &str) -> Result<LinearProgram, OccError> {
    let mut lines = src.lines().enumerate();
    let bad = |line: usize, message: &str| OccError::LpFormat { line: line + 1, message: message.into() };
    let mut header = |key: &str| -> Result<usize, OccError> {
        let (no, l) = lines.next().ok_or_else(|| bad(0, "unexpected end of file"))?;
        l.strip_prefix(key)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad(no, &format!("expected `{key} <count>`")))
    };
    let rows = header("rows")?;
    let cols = header("cols")?;
    let nnz = header("entries")?;
    let mut lp = LinearProgram::new(rows, cols);
    let mut next = |what: &str| lines.next().ok_or_else(|| bad(0, &format!("unexpected end of file in {what}")));
    let num = |no: usize, s: Option<&str>| -> Result<f64, OccError> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(no, "malformed number"))
    };
    let idx = |no: usize, s: Option<&str>, limit: usize| -> Result<usize, OccError> {
        s.and_then(|v| v.parse().ok()).filter(|&v| v < limit).ok_or_else(|| bad(no, "index out of range"))
    };
    for _ in 0..nnz {
        let (no, l) = next("entries")?;
        let mut it = l.split_whitespace();
        let i = idx(no, it.next(), rows)?;
        let j = idx(no, it.next(), cols)?;
        lp.set(i, j, num(no, it.next())?);
    }
    let (no, l) = next("rhs")?;
    if l.trim() != "rhs" {
        return Err(bad(no, "expected `rhs`"));
    }
    for _ in 0..rows {
        let (no, l) = next("rhs")?;
        let mut it = l.split_whitespace();
        let i = idx(no, it.next(), rows)?;
        lp.b[i] = num(no, it.next())?;
    }
    let (no, l) = next("objective")?;
    if l.trim() != "objective" {
        return Err(bad(no, "expected `objective`"));
    }
    for _ in 0..cols {
        let (no, l) = next("objective")?;
        let mut it = l.split_whitespace();
        let j = idx(no, it.next(), cols)?;
        lp.c[j] = num(no, it.next())?;
    }
    Ok(lp)
}

/// Optimal (or trajectory-induced) cell weights.
#[derive(Debug, Clone)]
pub struct DiscreteOccupationMeasure {
    pub disc: Discretization,
    /// Weight per μ cell (time·mass), zero outside the admissible cells.
    pub mu: Vec<f64>,
    /// Probability weight per target cell.
    pub boundary: Vec<f64>,
    pub objective: f64,
    /// `max |Ax - b|` of the LP solution.
    pub max_residual: f64,
    pub iterations: usize,
    pub mode: Closure,
    pub eps: f64,
}

impl DiscreteOccupationMeasure {
    pub fn total_mass(&self) -> f64 {
        self.mu.iter().sum()
    }

    pub fn boundary_mass(&self) -> f64 {
        self.boundary.iter().sum()
    }

    /// CSV `t_center, x1_center.., u1_center.., weight` over cells with
    /// nonzero weight.
    pub fn to_csv(&self) -> String {
        let n = self.disc.x.axes.len();
        let m = self.disc.u.axes.len();
        let mut out = String::from("t_center");
        for i in 1..=n {
            let _ = write!(out, ",x{i}_center");
        }
        for j in 1..=m {
            let _ = write!(out, ",u{j}_center");
        }
        out.push_str(",weight\n");
        let mut x = vec![0.0; n];
        let mut u = vec![0.0; m];
        for (idx, &w) in self.mu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let t = self.disc.mu_cell(idx, &mut x, &mut u);
            let _ = write!(out, "{t}");
            for v in x.iter().chain(&u) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{w}");
        }
        out
    }

    /// CSV `x1_center.., weight` of the terminal measure.
    pub fn boundary_csv(&self) -> String {
        let n = self.disc.target.axes.len();
        let mut out = String::new();
        for i in 1..=n {
            let _ = write!(out, "x{i}_center,");
        }
        out.push_str("weight\n");
        let mut x = vec![0.0; n];
        for (idx, &w) in self.boundary.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.disc.target_cell(idx, &mut x);
            for v in &x {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{w}");
        }
        out
    }
}

/// Solves the occupation LP; the objective is the relaxed value estimate.
pub fn solve_occupation(
    p: &Problem,
    grid: &GridSpec,
    mode: Closure,
    eps: f64,
) -> Result<DiscreteOccupationMeasure, OccError> {
    assemble_lp(p, grid, mode, eps)?.solve()
}

/// Pushes a trajectory forward to cell weights: every integration step
/// deposits its length at the cell of its midpoint (split over atoms for
/// Young measures) and the terminal measure is a Dirac at the cell of
/// `γ(T)`. Returns the largest violation of the Liouville rows.
pub fn liouville_residual(
    p: &Problem,
    tr: &Trajectory,
    control: ControlRef<'_>,
    grid: &GridSpec,
) -> Result<f64, OccError> {
    let disc = Discretization::new(p, grid)?;
    let n = p.n;
    let deg = grid.test_degree as usize;
    let tests = monomials(n, grid.test_degree);
    let mut weights: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    let breaks = control.breakpoints();
    let mut mid = vec![0.0; n];
    for k in 0..tr.len() - 1 {
        let (t0, t1) = (tr.times[k], tr.times[k + 1]);
        let dt = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        for i in 0..n {
            mid[i] = 0.5 * (tr.states[k][i] + tr.states[k + 1][i]);
        }
        let it = cell_of(tm, 0.0, p.horizon, grid.nt);
        let ix = disc.x_index(&mid, &disc.omega_box, &disc.x);
        let interval = crate::problem::interval_index(breaks, tm);
        match control {
            ControlRef::Classical(c) => {
                *weights.entry(disc.mu_index(it, ix, disc.u_index(&c.values[interval]))).or_default() += dt;
            }
            ControlRef::Young(y) => {
                for (w, atom) in y.weights[interval].iter().zip(&y.atoms) {
                    if *w > 0.0 {
                        *weights.entry(disc.mu_index(it, ix, disc.u_index(atom))).or_default() += w * dt;
                    }
                }
            }
        }
    }
    let end = disc.x_index(tr.final_state(), &disc.target_box, &disc.target);

    let mut residual = vec![0.0; tests.len()];
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; p.m];
    let mut fx = vec![0.0; n + 1];
    let mut grad = vec![0.0; n + 1];
    for (&idx, &w) in &weights {
        let t = disc.mu_cell(idx, &mut x, &mut u);
        p.eval_lifted(t, &x, &u, &mut fx)?;
        let pw: Vec<Vec<f64>> = std::iter::once(t).chain(x.iter().copied()).map(|v| powers(v, deg)).collect();
        for (r, e) in tests.iter().enumerate() {
            monomial_parts(e, &pw, &mut grad);
            residual[r] += w * (grad[0] + (0..n).map(|i| grad[1 + i] * fx[i]).sum::<f64>());
        }
    }
    disc.target_cell(end, &mut x);
    let pw_t: Vec<Vec<f64>> = std::iter::once(p.horizon).chain(x.iter().copied()).map(|v| powers(v, deg)).collect();
    let pw_0: Vec<Vec<f64>> = std::iter::once(0.0).chain(p.x0.iter().copied()).map(|v| powers(v, deg)).collect();
    for (r, e) in tests.iter().enumerate() {
        residual[r] += monomial_parts(e, &pw_0, &mut grad) - monomial_parts(e, &pw_t, &mut grad);
    }
    Ok(residual.iter().fold(0.0, |m, r| m.max(r.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_classical;
    use crate::problem::fixtures::*;
    use crate::problem::ClassicalControl;

    fn example1() -> Problem {
        Problem::from_json_str(&crate::problem::fixtures::example1()).unwrap()
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 4).len(), 15);
        assert_eq!(monomials(2, 4).len(), 35);
        assert_eq!(monomials(1, 1), vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
        assert_eq!(monomial_name(&[1, 2]), "t*x1^2");
    }

    #[test]
    fn lp_shape_for_double_well() {
        let p = example1();
        let occ = assemble_lp(&p, &GridSpec::default_for(&p), Closure::Closed, 0.0).unwrap();
        assert_eq!(occ.mu_columns.len(), 20 * 40 * 21);
        assert_eq!(occ.target_columns.len(), 40);
        assert_eq!(occ.lp.rows, 16);
        // φ = 1: no μ coefficients, -1 on every target cell, rhs -1.
        assert!(occ.mu_columns.iter().enumerate().all(|(c, _)| occ.lp.get(0, c) == 0.0));
        assert_eq!(occ.lp.get(0, occ.mu_columns.len()), -1.0);
        assert_eq!(occ.lp.b[0], -1.0);
        // φ = t: coefficient 1 on μ, -T on targets, rhs 0.
        let t_row = occ.tests.iter().position(|e| e == &vec![1, 0]).unwrap();
        assert_eq!(occ.lp.get(t_row, 0), 1.0);
        assert_eq!(occ.lp.get(t_row, occ.mu_columns.len()), -1.0);
        assert_eq!(occ.lp.b[t_row], 0.0);
    }

    #[test]
    fn double_well_relaxed_value_is_near_zero() {
        let p = example1();
        let m = solve_occupation(&p, &GridSpec::uniform(&p, 10, 20, 11, 4), Closure::Closed, 0.0).unwrap();
        assert!(m.objective.abs() <= 0.05, "{}", m.objective);
        assert!(m.mu.iter().all(|w| *w >= 0.0));
        assert!((m.boundary_mass() - 1.0).abs() < 1e-8);
        assert!((m.total_mass() - 1.0).abs() < 1e-8);
        assert!(m.max_residual < 1e-8);
    }

    #[test]
    fn zero_problem_has_zero_value() {
        let src = problem_json("u1", "0", "0", 0.0, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0));
        let p = Problem::from_json_str(&src).unwrap();
        let m = solve_occupation(&p, &GridSpec::uniform(&p, 4, 8, 3, 2), Closure::Closed, 0.0).unwrap();
        assert_eq!(m.objective, 0.0);
    }

    #[test]
    fn value_grows_with_degree_and_shrinking() {
        let src = problem_json("u1", "u1^2 + x1^2", "x1^2", 0.5, &box_region(-1.0, 1.0), &box_region(-1.0, 1.0));
        let p = Problem::from_json_str(&src).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for d in 1..=4 {
            let v = solve_occupation(&p, &GridSpec::uniform(&p, 8, 16, 9, d), Closure::Closed, 0.0).unwrap().objective;
            assert!(v >= prev - 1e-9, "degree {d}: {v} < {prev}");
            prev = v;
        }
        let mut prev = f64::NEG_INFINITY;
        for eps in [0.0, 0.1, 0.3] {
            let v = solve_occupation(&p, &GridSpec::uniform(&p, 8, 16, 9, 3), Closure::Closed, eps).unwrap().objective;
            assert!(v >= prev - 1e-9, "eps {eps}: {v} < {prev}");
            prev = v;
        }
        assert!(matches!(
            assemble_lp(&p, &GridSpec::uniform(&p, 8, 16, 9, 3), Closure::Closed, 1.5),
            Err(OccError::InnerApproximationEmpty { .. })
        ));
    }

    #[test]
    fn triplet_text_round_trips() {
        let p = example1();
        let occ = assemble_lp(&p, &GridSpec::uniform(&p, 3, 4, 3, 2), Closure::Closed, 0.0).unwrap();
        let text = occ.to_triplet_text();
        assert!(text.starts_with("rows 7\ncols 40\n"));
        assert_eq!(read_triplets(&text).unwrap(), occ.lp);
        assert!(read_triplets("rows 2\ncols x\n").is_err());
    }

    #[test]
    fn residual_of_trajectory_decreases_linearly() {
        // γ(1) = 1 sits on a cell edge, so the terminal Dirac is off by half a
        // cell and the residual is first order in the cell width.
        let p = example1();
        let c = ClassicalControl::constant(1.0, vec![1.0]);
        let mut prev = f64::INFINITY;
        for k in [1, 2, 4] {
            let tr = integrate_classical(&p, &c, 1e-3 / k as f64).unwrap();
            let grid = GridSpec::uniform(&p, 20 * k, 40 * k, 21, 3);
            let r = liouville_residual(&p, &tr, (&c).into(), &grid).unwrap();
            assert!(r <= 0.17 / k as f64, "refinement {k}: {r}");
            assert!(r <= prev / 1.9, "refinement {k}: {r} after {prev}");
            prev = r;
        }
        // With the endpoint at a cell center the quadrature errors cancel.
        let tr = integrate_classical(&p, &c, 1e-3).unwrap();
        let r = liouville_residual(&p, &tr, (&c).into(), &GridSpec::uniform(&p, 20, 42, 21, 3)).unwrap();
        assert!(r <= 5e-2, "{r}");
    }

    #[test]
    fn young_pushforward_splits_mass_over_atoms() {
        let p = example1();
        let y = crate::problem::YoungMeasureControl::stationary(1.0, vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5]).unwrap();
        let tr = crate::dynamics::integrate_young(&p, &y, 1e-3).unwrap();
        // x stays at 0, a cell center when the cell count is odd; the ±1
        // velocities then cancel in every row and only the time quadrature
        // error of the pure t^a rows remains.
        let r = liouville_residual(&p, &tr, (&y).into(), &GridSpec::uniform(&p, 20, 41, 21, 3)).unwrap();
        assert!(r <= 1e-3, "{r}");
    }

    #[test]
    fn resting_trajectory_residual_vanishes_under_refinement() {
        let src = problem_json("0", "0", "0", 0.3, &box_region(-1.0, 1.0), &box_region(-1.0, 1.0));
        let p = Problem::from_json_str(&src).unwrap();
        let c = ClassicalControl::constant(1.0, vec![0.0]);
        let tr = integrate_classical(&p, &c, 1e-2).unwrap();
        let coarse = liouville_residual(&p, &tr, (&c).into(), &GridSpec::uniform(&p, 4, 4, 3, 2)).unwrap();
        let fine = liouville_residual(&p, &tr, (&c).into(), &GridSpec::uniform(&p, 4, 64, 3, 2)).unwrap();
        assert!(fine < coarse / 4.0, "{coarse} -> {fine}");
    }
}
