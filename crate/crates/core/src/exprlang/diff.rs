//! Symbolic differentiation.
//!
//! Only the smooth part of the language is differentiated symbolically.
//! When the variable reaches an `abs`, `floor`, `min`, `max` or a power with
//! a variable exponent, the component is flagged and callers fall back to
//! central differences with step [`super::FD_STEP`].

use super::{BinOp, Bindings, EvalError, Expr, Func, Var, FD_STEP};

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub vars: Vec<Var>,
    /// One entry per variable; meaningless where `fallback[i]` is set.
    pub parts: Vec<Expr>,
    pub fallback: Vec<bool>,
}

impl Gradient {
    pub fn any_fallback(&self) -> bool {
        self.fallback.iter().any(|&f| f)
    }

    /// Evaluates the gradient of `source` at `env`, using central differences
    /// for flagged components.
    pub fn eval(&self, source: &Expr, env: &Bindings) -> Result<Vec<f64>, EvalError> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if self.fallback[i] {
                    central_difference(source, *v, env)
                } else {
                    self.parts[i].eval(env)
                }
            })
            .collect()
    }
}

pub(crate) fn central_difference(e: &Expr, v: Var, env: &Bindings) -> Result<f64, EvalError> {
    let name = v.name();
    let x = *env.get(&name).ok_or_else(|| EvalError::Unbound(name.clone()))?;
    let mut shifted = env.clone();
    shifted.insert(name.clone(), x + FD_STEP);
    let hi = e.eval(&shifted)?;
    shifted.insert(name, x - FD_STEP);
    let lo = e.eval(&shifted)?;
    Ok((hi - lo) / (2.0 * FD_STEP))
}

pub(super) fn gradient(e: &Expr, vars: &[Var]) -> Gradient {
    let mut parts = Vec::with_capacity(vars.len());
    let mut fallback = Vec::with_capacity(vars.len());
    for v in vars {
        match derivative(e, *v) {
            Some(d) => {
                parts.push(d);
                fallback.push(false);
            }
            None => {
                parts.push(Expr::Num(0.0));
                fallback.push(true);
            }
        }
    }
    Gradient { vars: vars.to_vec(), parts, fallback }
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 1.0)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (is_zero(&a), is_zero(&b)) {
        (true, _) => b,
        (_, true) => a,
        _ => Expr::binary(BinOp::Add, a, b),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (is_zero(&a), is_zero(&b)) {
        (_, true) => a,
        (true, _) => neg(b),
        _ => Expr::binary(BinOp::Sub, a, b),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) || is_zero(&b) {
        Expr::Num(0.0)
    } else if is_one(&a) {
        b
    } else if is_one(&b) {
        a
    } else {
        Expr::binary(BinOp::Mul, a, b)
    }
}

fn neg(a: Expr) -> Expr {
    if is_zero(&a) {
        a
    } else {
        Expr::Neg(Box::new(a))
    }
}

fn derivative(e: &Expr, v: Var) -> Option<Expr> {
    if !e.depends_on(v) {
        return Some(Expr::Num(0.0));
    }
    Some(match e {
        Expr::Num(_) => Expr::Num(0.0),
        Expr::Var(w) => Expr::Num(if *w == v { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(derivative(a, v)?),
        Expr::Binary(op, a, b) => {
            let (a, b) = (a.as_ref(), b.as_ref());
            match op {
                BinOp::Add => add(derivative(a, v)?, derivative(b, v)?),
                BinOp::Sub => sub(derivative(a, v)?, derivative(b, v)?),
                BinOp::Mul => add(mul(derivative(a, v)?, b.clone()), mul(a.clone(), derivative(b, v)?)),
                BinOp::Div => {
                    let num = sub(mul(derivative(a, v)?, b.clone()), mul(a.clone(), derivative(b, v)?));
                    Expr::binary(BinOp::Div, num, Expr::binary(BinOp::Pow, b.clone(), Expr::Num(2.0)))
                }
                BinOp::Pow => {
                    if b.depends_on(v) {
                        return None;
                    }
                    let lowered = match b {
                        Expr::Num(c) => Expr::num(c - 1.0),
                        _ => Expr::binary(BinOp::Sub, b.clone(), Expr::Num(1.0)),
                    };
                    let power = if is_one(&lowered) {
                        a.clone()
                    } else if is_zero(&lowered) {
                        Expr::Num(1.0)
                    } else {
                        Expr::binary(BinOp::Pow, a.clone(), lowered)
                    };
                    mul(mul(b.clone(), power), derivative(a, v)?)
                }
            }
        }
        Expr::Call(f, args) => {
            if f.is_nonsmooth() {
                return None;
            }
            let a = &args[0];
            let inner = derivative(a, v)?;
            let outer = match f {
                Func::Sin => Expr::call(Func::Cos, vec![a.clone()]),
                Func::Cos => neg(Expr::call(Func::Sin, vec![a.clone()])),
                Func::Exp => Expr::call(Func::Exp, vec![a.clone()]),
                Func::Sqrt => Expr::binary(
                    BinOp::Div,
                    Expr::Num(1.0),
                    Expr::binary(BinOp::Mul, Expr::Num(2.0), Expr::call(Func::Sqrt, vec![a.clone()])),
                ),
                Func::Abs | Func::Floor | Func::Min | Func::Max => unreachable!(),
            };
            mul(outer, inner)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env_x(x: f64) -> Bindings {
        [("x1".to_string(), x)].into_iter().collect()
    }

    #[test]
    fn square_rule() {
        let e = Expr::parse("x1^2").unwrap();
        let g = e.grad(&[Var::State(0)]);
        assert!(!g.any_fallback());
        assert_eq!(g.parts[0].to_string(), "2 * x1");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            assert_eq!(g.parts[0].eval(&env_x(x)).unwrap(), 2.0 * x);
        }
    }

    #[test]
    fn double_well_is_stationary_at_unit_control() {
        let e = Expr::parse("(u1^2-1)^2 + x1^2").unwrap();
        let g = e.grad(&[Var::Control(0)]);
        let env: Bindings = [("x1".to_string(), 0.0), ("u1".to_string(), 1.0)].into_iter().collect();
        assert_eq!(g.eval(&e, &env).unwrap(), vec![0.0]);
        let env: Bindings = [("x1".to_string(), 0.0), ("u1".to_string(), 0.5)].into_iter().collect();
        let d = g.eval(&e, &env).unwrap()[0];
        assert!((d - 4.0 * 0.5 * (0.25 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn nonsmooth_sets_fallback() {
        let e = Expr::parse("abs(x1)").unwrap();
        let g = e.grad(&[Var::State(0)]);
        assert_eq!(g.fallback, vec![true]);
        let d = g.eval(&e, &env_x(0.7)).unwrap()[0];
        assert!((d - 1.0).abs() < 1e-9);
        // Nonsmooth pieces that do not involve the variable are fine.
        let e = Expr::parse("abs(u1) * x1").unwrap();
        assert_eq!(e.grad(&[Var::State(0)]).fallback, vec![false]);
        let e = Expr::parse("2^x1").unwrap();
        assert_eq!(e.grad(&[Var::State(0)]).fallback, vec![true]);
    }

    #[test]
    fn symbolic_matches_finite_differences() {
        let sources = [
            "sin(x1) * exp(-x2^2) + x1 / (2 + cos(x2))",
            "sqrt(1 + x1^2 + x2^2) - x1^3 * x2",
            "(x1 - x2)^4 / (3 + x1^2)",
            "cos(x1 * x2) ^ 2 + exp(x1 / 4)",
        ];
        let vars = [Var::State(0), Var::State(1)];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for src in sources {
            let e = Expr::parse(src).unwrap();
            let g = e.grad(&vars);
            assert!(!g.any_fallback(), "{src}");
            for _ in 0..20 {
                let env: Bindings = [
                    ("x1".to_string(), rng.gen_range(-2.0..2.0)),
                    ("x2".to_string(), rng.gen_range(-2.0..2.0)),
                ]
                .into_iter()
                .collect();
                for (i, v) in vars.iter().enumerate() {
                    let sym = g.parts[i].eval(&env).unwrap();
                    let fd = central_difference(&e, *v, &env).unwrap();
                    let scale = sym.abs().max(fd.abs()).max(1.0);
                    assert!((sym - fd).abs() <= 1e-5 * scale, "{src} d/d{v}: {sym} vs {fd}");
                }
            }
        }
    }
}
