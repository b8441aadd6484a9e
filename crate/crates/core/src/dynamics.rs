//! Fixed-step RK4 integration of the lifted system `(x, ∫L)` under classical
//! or Young-measure controls.

use std::fmt::Write as _;

use crate::exprlang::EvalError;
use crate::problem::{ClassicalControl, Closure, Problem, YoungMeasureControl};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("state blew up at t = {time}")]
    BlowUp { time: f64 },
    #[error("evaluation failed at t = {time}: {source}")]
    Eval { time: f64, source: EvalError },
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
}

/// Relative slack when deciding whether `dt` already divides an interval.
const DIVIDES_TOL: f64 = 1e-9;

/// Default step: `T / 1000`.
pub fn default_dt(p: &Problem) -> f64 {
    p.horizon / 1000.0
}

/// Number of equal substeps used on an interval of length `len` for a
/// requested step `dt`: exact when `dt` divides `len`, rounded up otherwise.
pub fn substeps(len: f64, dt: f64) -> usize {
    let q = len / dt;
    let r = q.round();
    if (q - r).abs() <= DIVIDES_TOL * q.max(1.0) {
        (r as usize).max(1)
    } else {
        (q.ceil() as usize).max(1)
    }
}

/// A control seen by the integrator: piecewise constant on `breakpoints`.
#[derive(Debug, Clone, Copy)]
pub enum ControlRef<'a> {
    Classical(&'a ClassicalControl),
    Young(&'a YoungMeasureControl),
}

impl<'a> From<&'a ClassicalControl> for ControlRef<'a> {
    fn from(c: &'a ClassicalControl) -> Self {
        ControlRef::Classical(c)
    }
}

impl<'a> From<&'a YoungMeasureControl> for ControlRef<'a> {
    fn from(y: &'a YoungMeasureControl) -> Self {
        ControlRef::Young(y)
    }
}

impl ControlRef<'_> {
    pub fn breakpoints(&self) -> &[f64] {
        match self {
            ControlRef::Classical(c) => &c.time_grid,
            ControlRef::Young(y) => &y.time_grid,
        }
    }

    /// Lifted field `(f, L)` on control interval `k`, averaged over atoms for
    /// Young measures.
    pub fn lifted(&self, p: &Problem, k: usize, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        match self {
            ControlRef::Classical(c) => p.eval_lifted(t, x, &c.values[k], out),
            ControlRef::Young(y) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut buf = vec![0.0; out.len()];
                for (w, atom) in y.weights[k].iter().zip(&y.atoms) {
                    if *w == 0.0 {
                        continue;
                    }
                    p.eval_lifted(t, x, atom, &mut buf)?;
                    for (o, b) in out.iter_mut().zip(&buf) {
                        *o += w * b;
                    }
                }
                Ok(())
            }
        }
    }
}

/// One RK4 step of `z' = rhs(t, z)` in place.
pub(crate) fn rk4_step<F>(rhs: &mut F, t: f64, h: f64, z: &mut [f64], work: &mut [Vec<f64>; 5]) -> Result<(), EvalError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), EvalError>,
{
    let [k1, k2, k3, k4, tmp] = work;
    rhs(t, z, k1)?;
    for i in 0..z.len() {
        tmp[i] = z[i] + 0.5 * h * k1[i];
    }
    rhs(t + 0.5 * h, tmp, k2)?;
    for i in 0..z.len() {
        tmp[i] = z[i] + 0.5 * h * k2[i];
    }
    rhs(t + 0.5 * h, tmp, k3)?;
    for i in 0..z.len() {
        tmp[i] = z[i] + h * k3[i];
    }
    rhs(t + h, tmp, k4)?;
    for i in 0..z.len() {
        z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

pub(crate) fn rk4_work(dim: usize) -> [Vec<f64>; 5] {
    std::array::from_fn(|_| vec![0.0; dim])
}

/// Integrates the lifted state `z = (x, running cost)` across control
/// interval `k` from `a` to `b` in `steps` equal steps, calling `on_node`
/// after every step.
pub(crate) fn integrate_interval(
    p: &Problem,
    control: ControlRef<'_>,
    k: usize,
    (a, b): (f64, f64),
    steps: usize,
    z: &mut [f64],
    work: &mut [Vec<f64>; 5],
    mut on_node: impl FnMut(f64, &[f64]),
) -> Result<(), DynamicsError> {
    let n = p.n;
    let h = (b - a) / steps as f64;
    let mut rhs = |t: f64, zz: &[f64], out: &mut [f64]| control.lifted(p, k, t, &zz[..n], out);
    for j in 0..steps {
        let t = a + h * j as f64;
        rk4_step(&mut rhs, t, h, z, work).map_err(|source| DynamicsError::Eval { time: t, source })?;
        let t_next = if j + 1 == steps { b } else { a + h * (j + 1) as f64 };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::BlowUp { time: t_next });
        }
        on_node(t_next, z);
    }
    Ok(())
}

/// Integral curve sampled at integration nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Accumulated `∫L` at each node.
    pub running_cost: Vec<f64>,
    pub in_omega_open: Vec<bool>,
    pub in_omega_closed: Vec<bool>,
}

impl Trajectory {
    fn start(p: &Problem, t0: f64, x: &[f64]) -> Self {
        let mut tr = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            running_cost: Vec::new(),
            in_omega_open: Vec::new(),
            in_omega_closed: Vec::new(),
        };
        tr.push(p, t0, x, 0.0);
        tr
    }

    fn push(&mut self, p: &Problem, t: f64, x: &[f64], cost: f64) {
        self.times.push(t);
        self.states.push(x.to_vec());
        self.running_cost.push(cost);
        self.in_omega_open.push(p.omega.contains(x, Closure::Open));
        self.in_omega_closed.push(p.omega.contains(x, Closure::Closed));
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one node")
    }

    pub fn final_running_cost(&self) -> f64 {
        *self.running_cost.last().expect("trajectory has at least one node")
    }

    pub fn stays_in_omega(&self, mode: Closure) -> bool {
        match mode {
            Closure::Open => self.in_omega_open.iter().all(|&b| b),
            Closure::Closed => self.in_omega_closed.iter().all(|&b| b),
        }
    }

    /// CSV with columns `t, x1..xn, running_cost, in_omega_open, in_omega_closed`.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        out.push_str(",running_cost,in_omega_open,in_omega_closed\n");
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.times[k]);
            for v in &self.states[k] {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{}",
                self.running_cost[k], self.in_omega_open[k] as u8, self.in_omega_closed[k] as u8
            );
        }
        out
    }
}

/// Integrates on `[t0, t1]` from `x_start`, splitting steps at the control's
/// breakpoints. The running cost restarts at zero.
pub fn integrate_window(
    p: &Problem,
    control: ControlRef<'_>,
    dt: f64,
    (t0, t1): (f64, f64),
    x_start: &[f64],
) -> Result<Trajectory, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::BadStep(dt));
    }
    let n = p.n;
    let mut tr = Trajectory::start(p, t0, x_start);
    let mut z = x_start.to_vec();
    z.push(0.0);
    let mut work = rk4_work(n + 1);
    let grid = control.breakpoints();
    for k in 0..grid.len() - 1 {
        let a = grid[k].max(t0);
        let b = grid[k + 1].min(t1);
        if b <= a {
            continue;
        }
        let steps = substeps(b - a, dt);
        integrate_interval(p, control, k, (a, b), steps, &mut z, &mut work, |t, zz| {
            tr.push(p, t, &zz[..n], zz[n]);
        })?;
    }
    Ok(tr)
}

pub fn integrate_classical(p: &Problem, c: &ClassicalControl, dt: f64) -> Result<Trajectory, DynamicsError> {
    integrate_window(p, c.into(), dt, (0.0, p.horizon), &p.x0)
}

pub fn integrate_young(p: &Problem, y: &YoungMeasureControl, dt: f64) -> Result<Trajectory, DynamicsError> {
    integrate_window(p, y.into(), dt, (0.0, p.horizon), &p.x0)
}

/// `∫L + g(γ(T))`.
pub fn total_cost(p: &Problem, tr: &Trajectory) -> Result<f64, EvalError> {
    Ok(tr.final_running_cost() + p.eval_terminal(tr.final_state())?)
}

/// Evaluator of the lifted field `(f, L)`.
pub fn lifted_field(p: &Problem) -> impl Fn(f64, &[f64], &[f64]) -> Result<Vec<f64>, EvalError> + '_ {
    move |t, x, u| {
        let mut out = vec![0.0; p.n + 1];
        p.eval_lifted(t, x, u, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::fixtures::*;
    use proptest::prelude::*;

    fn example1() -> Problem {
        Problem::from_json_str(&crate::problem::fixtures::example1()).unwrap()
    }

    fn square_wave(n: usize) -> ClassicalControl {
        ClassicalControl::uniform(1.0, (0..n).map(|k| vec![if k % 2 == 0 { 1.0 } else { -1.0 }]).collect())
    }

    #[test]
    fn constant_unit_control() {
        let p = example1();
        let tr = integrate_classical(&p, &ClassicalControl::constant(1.0, vec![1.0]), 1e-3).unwrap();
        assert_eq!(tr.len(), 1001);
        assert!((tr.final_state()[0] - 1.0).abs() <= 1e-9);
        assert!((tr.final_running_cost() - 1.0 / 3.0).abs() <= 1e-6);
        assert!((total_cost(&p, &tr).unwrap() - 1.0 / 3.0).abs() <= 1e-6);
        assert!(tr.running_cost.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_dynamics_stay_put() {
        let src = problem_json("0", "0", "0", 0.5, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0));
        let p = Problem::from_json_str(&src).unwrap();
        let tr = integrate_classical(&p, &square_wave(7), 1e-2).unwrap();
        assert!(tr.states.iter().all(|x| x[0] == 0.5));
    }

    #[test]
    fn fast_switching_is_cheap() {
        // (-1)^floor(10 t) on [0,1]: triangle wave of amplitude 1/10.
        let p = example1();
        let tr = integrate_classical(&p, &square_wave(10), 1e-3).unwrap();
        assert!(tr.final_running_cost() <= 0.01);
    }

    #[test]
    fn symmetric_young_measure_costs_nothing() {
        let p = example1();
        let y = YoungMeasureControl::stationary(1.0, vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5]).unwrap();
        let tr = integrate_young(&p, &y, 1e-3).unwrap();
        assert!(tr.states.iter().all(|x| x[0] == 0.0));
        assert_eq!(total_cost(&p, &tr).unwrap(), 0.0);
        let y3 = YoungMeasureControl::stationary(1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![1.0 / 3.0; 3]);
        let tr = integrate_young(&p, &y3.unwrap(), 1e-3).unwrap();
        assert!(tr.states.iter().all(|x| x[0].abs() < 1e-15));
    }

    #[test]
    fn terminal_cost_is_added() {
        let src = problem_json("2", "0", "x1", 0.0, &box_region(-3.0, 3.0), &box_region(-3.0, 3.0));
        let p = Problem::from_json_str(&src).unwrap();
        let tr = integrate_classical(&p, &ClassicalControl::constant(1.0, vec![0.0]), 1e-2).unwrap();
        assert!((total_cost(&p, &tr).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lifted_field_values() {
        let p = example1();
        let f = lifted_field(&p);
        assert_eq!(f(0.0, &[0.0], &[1.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(f(0.0, &[0.0], &[0.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn blow_up_is_reported() {
        let src = problem_json("x1^2", "0", "0", 1.0, &box_region(-2.0, 2.0), &box_region(-2.0, 2.0));
        let src = src.replace(r#""T":1"#, r#""T":3"#);
        let p = Problem::from_json_str(&src).unwrap();
        let err = integrate_classical(&p, &ClassicalControl::constant(3.0, vec![0.0]), 1e-2).unwrap_err();
        match err {
            DynamicsError::BlowUp { time } => assert!(time > 0.9 && time < 1.2, "{time}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let src = problem_json("-x1 + sin(3*t) * u1", "x1^2", "0", 1.0, &box_region(-5.0, 5.0), &box_region(-5.0, 5.0));
        let p = Problem::from_json_str(&src).unwrap();
        let c = ClassicalControl::constant(1.0, vec![0.7]);
        let reference = integrate_classical(&p, &c, 1e-5).unwrap().final_state()[0];
        let mut prev = None;
        for dt in [0.1, 0.05, 0.025] {
            let err = (integrate_classical(&p, &c, dt).unwrap().final_state()[0] - reference).abs();
            if let Some(e) = prev {
                assert!(e / err >= 8.0, "dt {dt}: ratio {}", e / err);
            }
            prev = Some(err);
        }
    }

    #[test]
    fn cost_is_additive_across_restart() {
        let src = problem_json("-x1 + t * u1", "x1^2 + u1^2", "0", 1.0, &box_region(-5.0, 5.0), &box_region(-5.0, 5.0));
        let p = Problem::from_json_str(&src).unwrap();
        let c = ClassicalControl::uniform(1.0, vec![vec![0.3], vec![-0.8], vec![0.5], vec![1.0]]);
        let full = integrate_classical(&p, &c, 1e-3).unwrap();
        let first = integrate_window(&p, (&c).into(), 1e-3, (0.0, 0.5), &p.x0).unwrap();
        let second = integrate_window(&p, (&c).into(), 1e-3, (0.5, 1.0), first.final_state()).unwrap();
        let split = first.final_running_cost() + second.final_running_cost();
        assert!((full.final_running_cost() - split).abs() <= 1e-10);
        assert_eq!(full.len(), first.len() + second.len() - 1);
    }

    #[test]
    fn steps_split_at_switches() {
        assert_eq!(substeps(0.1, 1e-3), 100);
        assert_eq!(substeps(1.0 / 3.0, 0.1), 4);
        let p = example1();
        let c = ClassicalControl::new(vec![0.0, 0.3, 1.0], vec![vec![1.0], vec![-1.0]]).unwrap();
        let tr = integrate_classical(&p, &c, 0.25).unwrap();
        let expected = [0.0, 0.15, 0.3, 0.3 + 0.7 / 3.0, 0.3 + 1.4 / 3.0, 1.0];
        assert_eq!(tr.len(), expected.len());
        assert!(tr.times.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!((tr.final_state()[0] - (0.3 - 0.7)).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let p = example1();
        let tr = integrate_classical(&p, &ClassicalControl::constant(1.0, vec![1.0]), 0.5).unwrap();
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,running_cost,in_omega_open,in_omega_closed");
        assert_eq!(lines[1], "0,0,0,1,1");
        assert_eq!(lines.len(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn dirac_young_matches_classical(values in proptest::collection::vec(-1.0f64..1.0, 1..8)) {
            let src = problem_json("-x1 + t * u1 + u1^2", "(u1^2-1)^2 + x1^2", "x1", 0.2, &box_region(-5.0, 5.0), &box_region(-5.0, 5.0));
            let p = Problem::from_json_str(&src).unwrap();
            let c = ClassicalControl::uniform(1.0, values.into_iter().map(|v| vec![v]).collect());
            let a = integrate_classical(&p, &c, 1e-2).unwrap();
            let b = integrate_young(&p, &c.to_young(), 1e-2).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for k in 0..a.len() {
                prop_assert!((a.states[k][0] - b.states[k][0]).abs() <= 1e-12);
                prop_assert!((a.running_cost[k] - b.running_cost[k]).abs() <= 1e-12);
            }
        }
    }
}
