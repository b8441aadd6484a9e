//! Inner approximations of the state and target sets and the resulting
//! estimate of the relaxation gap:
//! `M_c(Ω̄, X̄) − M_o(Ω̄, X̄) ≤ M_o(Ω_ε, X_ε) − M_o(Ω̄, X̄)`.

use serde::Serialize;

use crate::classical::{solve_classical, SolveOptions};
use crate::occmeas::{solve_occupation, GridSpec};
use crate::problem::{ClassicalControl, Closure, Problem, ProblemError, RegionSpec};

pub const DEFAULT_LADDER: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
/// Gap estimates below `-GAP_TOLERANCE` indicate a numerical problem.
pub const GAP_TOLERANCE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum GapError {
    #[error("the ε ladder must be nonempty, positive and strictly decreasing: {0:?}")]
    BadLadder(Vec<f64>),
    #[error("occupation LP on the full domain failed: {0}")]
    Lower(#[from] crate::occmeas::OccError),
}

#[derive(Debug, Clone)]
pub struct InnerApproximation {
    pub epsilon: f64,
    pub omega: RegionSpec,
    pub target: RegionSpec,
    /// Whether `x0 ∈ Ω_ε`; a rung without it is invalid.
    pub x0_inside: bool,
}

impl InnerApproximation {
    /// The problem posed on `(Ω_ε, X_ε)`.
    pub fn problem(&self, p: &Problem) -> Problem {
        p.with_regions(self.omega.clone(), self.target.clone())
    }
}

/// Shrinks Ω and X by `eps`. Fails if either becomes empty.
pub fn shrink(p: &Problem, eps: f64) -> Result<InnerApproximation, ProblemError> {
    if !(eps > 0.0) {
        return Err(ProblemError::invariant("eps > 0", format!("eps = {eps}")));
    }
    let omega = p.omega.shrink(eps)?;
    let target = p.target.shrink(eps)?;
    let x0_inside = omega.contains(&p.x0, Closure::Closed);
    Ok(InnerApproximation { epsilon: eps, omega, target, x0_inside })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RungStatus {
    Ok,
    /// The classical solve ended with a penalty above the feasibility flag.
    Infeasible,
    /// `x0 ∉ Ω_ε`.
    Invalid,
    /// Shrinking or solving failed; see `message`.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rung {
    pub epsilon: f64,
    pub status: RungStatus,
    /// Classical upper bound on `(Ω_ε, X_ε)`; over-estimates the minuend.
    pub upper_shrunk: Option<f64>,
    pub upper_penalty: Option<f64>,
    /// Occupation LP value on `(Ω̄, X̄)`; an uncertified estimate of the
    /// subtrahend.
    pub lower_full: f64,
    pub gap_bound: Option<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub epsilon_ladder: Vec<f64>,
    pub mode: Closure,
    pub grid: GridSpec,
    #[serde(rename = "K")]
    pub k: usize,
    pub starts: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub per_eps: Vec<Rung>,
    pub caveats: Vec<String>,
}

impl GapReport {
    /// `epsilon,upper_shrunk,lower_full,gap_bound`, missing values empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("epsilon,upper_shrunk,lower_full,gap_bound\n");
        for r in &self.per_eps {
            out.push_str(&format!("{:?},{},{:?},{}\n", r.epsilon, opt(r.upper_shrunk), r.lower_full, opt(r.gap_bound)));
        }
        out
    }

    pub fn rung(&self, eps: f64) -> Option<&Rung> {
        self.per_eps.iter().find(|r| r.epsilon == eps)
    }
}

#[derive(Debug, Clone)]
pub struct GapOptions {
    pub ladder: Vec<f64>,
    pub grid: GridSpec,
    pub k: usize,
    pub starts: usize,
    pub seed: u64,
    pub mode: Closure,
}

/// Runs the classical solver down the ladder, largest ε first, warm-starting
/// each rung from the last successful one, and subtracts the occupation LP
/// value on the full domain.
pub fn gap_bound(p: &Problem, opts: &GapOptions) -> Result<GapReport, GapError> {
    let ladder = &opts.ladder;
    if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0)) || ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(GapError::BadLadder(ladder.clone()));
    }
    let lower = solve_occupation(p, &opts.grid, Closure::Closed, 0.0)?.objective;
    let mut warm: Option<ClassicalControl> = None;
    let mut per_eps = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let mut rung = Rung {
            epsilon: eps,
            status: RungStatus::Ok,
            upper_shrunk: None,
            upper_penalty: None,
            lower_full: lower,
            gap_bound: None,
            message: None,
        };
        match shrink(p, eps) {
            Err(e) => {
                rung.status = RungStatus::Failed;
                rung.message = Some(e.to_string());
            }
            Ok(inner) if !inner.x0_inside => {
                rung.status = RungStatus::Invalid;
                rung.message = Some(format!("x0 lies outside omega shrunk by {eps}"));
            }
            Ok(inner) => {
                let q = inner.problem(p);
                let mut so = SolveOptions::new(opts.k, opts.starts, opts.seed, opts.mode);
                so.warm_starts = warm.iter().cloned().collect();
                match solve_classical(&q, &so) {
                    Ok(r) => {
                        if !r.feasible() {
                            rung.status = RungStatus::Infeasible;
                        }
                        rung.upper_shrunk = Some(r.best_cost);
                        rung.upper_penalty = Some(r.penalty);
                        rung.gap_bound = Some(r.best_cost - lower);
                        warm = Some(r.control);
                    }
                    Err(e) => {
                        rung.status = RungStatus::Failed;
                        rung.message = Some(e.to_string());
                    }
                }
            }
        }
        per_eps.push(rung);
    }
    Ok(GapReport {
        epsilon_ladder: ladder.clone(),
        mode: opts.mode,
        grid: opts.grid.clone(),
        k: opts.k,
        starts: opts.starts,
        seed: opts.seed,
        tolerance: GAP_TOLERANCE,
        per_eps,
        caveats: vec![
            "upper_shrunk is a classical direct-search value on the shrunken sets and over-estimates the minuend".into(),
            "lower_full is a grid occupation LP value; it is not a certified lower bound and depends on the grid resolution".into(),
            format!("classical values were computed with {} boundary handling", opts.mode),
        ],
    })
}
