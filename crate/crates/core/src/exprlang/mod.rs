//! Scalar expression language used for every piece of problem data.
//!
//! Expressions are small ASTs over real literals, the variables `t`,
//! `x1..xn`, `u1..um`, the binary operators `+ - * / ^`, unary minus and
//! the functions `sin cos exp sqrt abs min max floor`.
//!
//! ```
//! use relaxgap::exprlang::{Bindings, Expr};
//!
//! let lagrangian = Expr::parse("(u1^2-1)^2 + x1^2").unwrap();
//! let mut env = Bindings::new();
//! env.insert("x1".into(), 0.0);
//! env.insert("u1".into(), 0.0);
//! assert_eq!(lagrangian.eval(&env).unwrap(), 1.0);
//! ```
//!
//! Hot loops should not go through [`Expr::eval`]; compile once with
//! [`Expr::compile`] and run the resulting [`Program`] on a flat slot array.

mod diff;
mod parse;
mod program;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

pub use diff::Gradient;
pub use parse::ParseError;
pub use program::{Program, VarLayout};

/// Central finite-difference step callers use when a gradient is flagged as
/// nonsmooth.
pub const FD_STEP: f64 = 1e-6;

/// Variable bindings for tree-walking evaluation.
pub type Bindings = HashMap<String, f64>;

/// A variable of the expression language. Indices are zero-based; the
/// printed names are one-based (`x1` is `State(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    Time,
    State(usize),
    Control(usize),
}

impl Var {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Parses `t`, `x<k>` or `u<k>` with `k >= 1`.
    pub fn from_name(name: &str) -> Option<Var> {
        if name == "t" {
            return Some(Var::Time);
        }
        let (head, digits) = name.split_at(1);
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return None;
        }
        let k: usize = digits.parse().ok()?;
        match head {
            "x" => Some(Var::State(k - 1)),
            "u" => Some(Var::Control(k - 1)),
            _ => None,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Time => write!(f, "t"),
            Var::State(i) => write!(f, "x{}", i + 1),
            Var::Control(i) => write!(f, "u{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Floor,
    Min,
    Max,
}

impl Func {
    pub const ALL: [Func; 8] = [
        Func::Sin,
        Func::Cos,
        Func::Exp,
        Func::Sqrt,
        Func::Abs,
        Func::Floor,
        Func::Min,
        Func::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Floor => "floor",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Functions whose derivative is not available symbolically.
    pub fn is_nonsmooth(self) -> bool {
        matches!(self, Func::Abs | Func::Floor | Func::Min | Func::Max)
    }
}

/// Expression tree. Literals are finite and nonnegative; a negative constant
/// is `Neg(Num(..))`, which is also what the parser produces for `-3`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error: {reason} in `{subexpr}`")]
    Domain { reason: &'static str, subexpr: String },
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ParseError> {
        parse::parse(source)
    }

    /// Builds a literal, mapping negative values to `Neg(Num(|v|))`.
    pub fn num(v: f64) -> Expr {
        if v < 0.0 {
            Expr::Neg(Box::new(Expr::Num(-v)))
        } else {
            Expr::Num(v)
        }
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Expr {
        debug_assert_eq!(args.len(), f.arity());
        Expr::Call(f, args)
    }

    /// Every variable occurring in the tree.
    pub fn variables(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Neg(a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) => a.depends_on(v),
            Expr::Binary(_, a, b) => a.depends_on(v) || b.depends_on(v),
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on(v)),
        }
    }

    /// Tree-walking evaluation against named bindings.
    pub fn eval(&self, env: &Bindings) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(v) => {
                let name = v.name();
                env.get(&name).copied().ok_or(EvalError::Unbound(name))
            }
            Expr::Neg(a) => Ok(-a.eval(env)?),
            Expr::Binary(op, a, b) => {
                let x = a.eval(env)?;
                let y = b.eval(env)?;
                apply_binary(*op, x, y).map_err(|reason| self.domain(reason))
            }
            Expr::Call(f, args) => {
                let x = args[0].eval(env)?;
                let y = match args.get(1) {
                    Some(e) => e.eval(env)?,
                    None => 0.0,
                };
                apply_func(*f, x, y).map_err(|reason| self.domain(reason))
            }
        }
    }

    fn domain(&self, reason: &'static str) -> EvalError {
        EvalError::Domain { reason, subexpr: self.to_string() }
    }

    pub fn compile(&self, layout: VarLayout) -> Result<Program, program::CompileError> {
        Program::compile(self, layout)
    }

    /// Symbolic partial derivatives with respect to `vars`.
    pub fn grad(&self, vars: &[Var]) -> Gradient {
        diff::gradient(self, vars)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Neg(_) => 3,
            Expr::Num(v) if *v < 0.0 => 3,
            _ => 5,
        }
    }
}

pub(crate) fn apply_binary(op: BinOp, x: f64, y: f64) -> Result<f64, &'static str> {
    match op {
        BinOp::Add => Ok(x + y),
        BinOp::Sub => Ok(x - y),
        BinOp::Mul => Ok(x * y),
        BinOp::Div => {
            if y == 0.0 {
                Err("division by zero")
            } else {
                Ok(x / y)
            }
        }
        BinOp::Pow => {
            if x < 0.0 && y.fract() != 0.0 {
                Err("negative base with non-integer exponent")
            } else if x == 0.0 && y < 0.0 {
                Err("zero raised to a negative power")
            } else {
                Ok(x.powf(y))
            }
        }
    }
}

pub(crate) fn apply_func(f: Func, x: f64, y: f64) -> Result<f64, &'static str> {
    Ok(match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Exp => x.exp(),
        Func::Sqrt => {
            if x < 0.0 {
                return Err("square root of a negative number");
            }
            x.sqrt()
        }
        Func::Abs => x.abs(),
        Func::Floor => x.floor(),
        Func::Min => x.min(y),
        Func::Max => x.max(y),
    })
}

impl fmt::Display for Expr {
    /// Prints with the minimal parentheses needed for `parse` to rebuild the
    /// same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 => write!(f, "(-{})", -v),
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                if a.precedence() < 3 {
                    write!(f, "-({a})")
                } else {
                    write!(f, "-{a}")
                }
            }
            Expr::Binary(BinOp::Pow, a, b) => {
                if a.precedence() <= 4 {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, "^")?;
                if b.precedence() < 3 {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                if a.precedence() < p {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {} ", op.symbol())?;
                if b.precedence() <= p {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}
