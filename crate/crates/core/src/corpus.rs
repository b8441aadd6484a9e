//! Bundled example problems with known values.

use std::path::Path;

use serde::Serialize;

use crate::occmeas::GridSpec;
use crate::problem::{load_problem, Problem, ProblemError};

/// Where an expected value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Stated in the literature the example is taken from.
    Published,
    /// Worked out by hand (closed form, calculus of variations).
    Analytic,
    /// Immediate from the data, e.g. a zero cost.
    Trivial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Expected {
    pub value: f64,
    pub tolerance: f64,
    pub basis: Basis,
}

/// Resolution at which an example is solved by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Reference {
    pub nt: usize,
    pub nx: usize,
    pub nu: usize,
    pub test_degree: u32,
    pub k: usize,
    pub starts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Example {
    pub name: &'static str,
    pub summary: &'static str,
    #[serde(skip)]
    pub source: &'static str,
    pub expected: Option<Expected>,
    pub reference: Reference,
    /// Whether the inward-pointing condition is expected to hold on ∂Ω.
    pub inward_pointing: Option<bool>,
}

impl Example {
    pub fn problem(&self) -> Problem {
        Problem::from_json_str(self.source).expect("bundled problems are valid")
    }

    pub fn grid(&self, p: &Problem) -> GridSpec {
        let r = self.reference;
        GridSpec::uniform(p, r.nt, r.nx, r.nu, r.test_degree)
    }
}

const DEFAULT_REFERENCE: Reference = Reference { nt: 20, nx: 40, nu: 21, test_degree: 4, k: 20, starts: 8 };

pub fn list_examples() -> Vec<Example> {
    vec![
        Example {
            name: "example1",
            summary: "double-well Lagrangian (u²-1)² + x², value 0 reached only by chattering",
            source: include_str!("../corpus/example1.json"),
            expected: Some(Expected { value: 0.0, tolerance: 0.05, basis: Basis::Published }),
            reference: Reference { k: 100, starts: 16, ..DEFAULT_REFERENCE },
            inward_pointing: Some(true),
        },
        Example {
            name: "convex_steer",
            summary: "steer 1 into [-0.1, 0.1] with cost ∫u², optimum u ≡ -0.9",
            source: include_str!("../corpus/convex_steer.json"),
            expected: Some(Expected { value: 0.81, tolerance: 0.05, basis: Basis::Analytic }),
            reference: DEFAULT_REFERENCE,
            inward_pointing: Some(true),
        },
        Example {
            name: "zero",
            summary: "zero running and terminal cost",
            source: include_str!("../corpus/zero.json"),
            expected: Some(Expected { value: 0.0, tolerance: 1e-9, basis: Basis::Trivial }),
            reference: Reference { nt: 10, nx: 20, nu: 11, k: 10, starts: 4, ..DEFAULT_REFERENCE },
            inward_pointing: Some(true),
        },
        Example {
            name: "tangential_disk",
            summary: "rotation field tangent to the boundary of the unit disk",
            source: include_str!("../corpus/tangential_disk.json"),
            // u has no effect on the motion, so u ≡ 0 and the cost is
            // ∫₀¹ (cos t / 2)² dt = (1/2 + sin 2 / 4) / 4.
            expected: Some(Expected {
                value: 0.25 * (0.5 + 0.25 * 0.909_297_426_825_681_7),
                tolerance: 0.05,
                basis: Basis::Analytic,
            }),
            reference: Reference { nt: 10, nx: 24, nu: 5, test_degree: 3, k: 10, starts: 4 },
            inward_pointing: Some(false),
        },
        Example {
            name: "terminal_linear",
            summary: "minimize the endpoint with unit speed bound, optimum u ≡ -1",
            source: include_str!("../corpus/terminal_linear.json"),
            expected: Some(Expected { value: -1.0, tolerance: 0.05, basis: Basis::Analytic }),
            reference: Reference { k: 10, starts: 4, ..DEFAULT_REFERENCE },
            inward_pointing: Some(true),
        },
    ]
}

pub fn example(name: &str) -> Option<Example> {
    list_examples().into_iter().find(|e| e.name == name)
}

/// Name reserved for a user-supplied problem with a suspected relaxation
/// gap. None is bundled.
pub const GAP_CANDIDATE: &str = "gap_candidate";

/// Loads a user-supplied gap candidate; it has no expected value.
pub fn load_gap_candidate(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
    load_problem(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Closure;

    #[test]
    fn every_example_loads() {
        let all = list_examples();
        assert_eq!(all.len(), 5);
        for e in &all {
            let p = e.problem();
            assert_eq!(p.name, e.name);
            assert!(p.omega.contains(&p.x0, Closure::Closed));
            e.grid(&p).validate(&p).unwrap();
        }
        assert!(example(GAP_CANDIDATE).is_none());
    }

    #[test]
    fn tangential_disk_value() {
        // Independent check of the closed form by trapezoidal quadrature.
        let n = 100_000;
        let h = 1.0 / n as f64;
        let q: f64 = (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * (0.5 * (k as f64 * h).cos()).powi(2)
            })
            .sum::<f64>()
            * h;
        let e = example("tangential_disk").unwrap().expected.unwrap();
        assert!((q - e.value).abs() < 1e-9);
    }
}
