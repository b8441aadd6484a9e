//! Classical controls from Young measures by time slicing, and the error of
//! the resulting approximation.

use serde::Serialize;

use crate::dynamics::{integrate_classical, integrate_young, total_cost, DynamicsError};
use crate::problem::{Closure, ClassicalControl, Problem, YoungMeasureControl};

/// Splits every Young-measure interval into `n` equal frames and every frame
/// into consecutive slots, one per atom of positive weight, in atom order,
/// with lengths proportional to the weights.
pub fn chatter(y: &YoungMeasureControl, n: usize) -> ClassicalControl {
    let n = n.max(1);
    let mut time_grid = vec![y.time_grid[0]];
    let mut values = Vec::new();
    for (k, row) in y.weights.iter().enumerate() {
        let (a, b) = (y.time_grid[k], y.time_grid[k + 1]);
        let frame = (b - a) / n as f64;
        for j in 0..n {
            let start = a + frame * j as f64;
            let end = if j + 1 == n { b } else { a + frame * (j + 1) as f64 };
            let live: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0.0).collect();
            let mut used = 0.0;
            for (pos, &i) in live.iter().enumerate() {
                used += row[i];
                let t = if pos + 1 == live.len() { end } else { start + frame * used };
                if t > *time_grid.last().unwrap() {
                    time_grid.push(t);
                    values.push(y.atoms[i].clone());
                }
            }
        }
    }
    ClassicalControl { time_grid, values }
}

/// Deviation between the Young trajectory and the trajectory of its
/// chattered control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatteringReport {
    pub n: usize,
    pub dt: f64,
    /// Max state deviation over the Young trajectory's integration nodes.
    pub state_err: f64,
    /// Deviation of the running cost at `T`.
    pub cost_err: f64,
    /// Frame length: the longest Young interval divided by `n`.
    pub frame_length: f64,
    /// `state_err / (frame_length · (1 + T))`; an empirical ratio, not a
    /// bound on any constant.
    pub empirical_ratio: f64,
    pub young_cost: f64,
    pub chattered_cost: f64,
    pub chattered_in_omega_closed: bool,
    pub chattered_in_omega_open: bool,
    pub chattered_endpoint_in_target: bool,
}

/// Compares the Young trajectory with the chattered one on the Young
/// trajectory's nodes. The chattered control is integrated with every such
/// node added as a breakpoint so both are sampled at the same times.
pub fn chattering_error(
    p: &Problem,
    y: &YoungMeasureControl,
    n: usize,
    dt: f64,
) -> Result<(ClassicalControl, ChatteringReport), DynamicsError> {
    let young = integrate_young(p, y, dt)?;
    let c = chatter(y, n);
    let merged = with_breakpoints(&c, &young.times);
    let chattered = integrate_classical(p, &merged, dt)?;
    let mut state_err: f64 = 0.0;
    let mut j = 0;
    for (t, x) in young.times.iter().zip(&young.states) {
        while chattered.times[j] < *t {
            j += 1;
        }
        let d = x.iter().zip(&chattered.states[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        state_err = state_err.max(d);
    }
    let cost_err = (young.final_running_cost() - chattered.final_running_cost()).abs();
    let frame_length = y.time_grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max) / n.max(1) as f64;
    let eval = |source| DynamicsError::Eval { time: p.horizon, source };
    let report = ChatteringReport {
        n,
        dt,
        state_err,
        cost_err,
        frame_length,
        empirical_ratio: state_err / (frame_length * (1.0 + p.horizon)),
        young_cost: total_cost(p, &young).map_err(eval)?,
        chattered_cost: total_cost(p, &chattered).map_err(eval)?,
        chattered_in_omega_closed: chattered.stays_in_omega(Closure::Closed),
        chattered_in_omega_open: chattered.stays_in_omega(Closure::Open),
        chattered_endpoint_in_target: p.target.contains(chattered.final_state(), Closure::Closed),
    };
    Ok((c, report))
}

/// Same control with the extra `times` inserted as breakpoints.
fn with_breakpoints(c: &ClassicalControl, times: &[f64]) -> ClassicalControl {
    let mut grid: Vec<f64> = c.time_grid.iter().chain(times).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let values = grid[..grid.len() - 1].iter().map(|&t| c.value_at(t).to_vec()).collect();
    ClassicalControl { time_grid: grid, values }
}

/// Least-squares slope of `log err` against `log n`, negated: the observed
/// convergence order.
pub fn fitted_rate(ns: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    -sxy / sxx
}
