use smallvec::SmallVec;

use super::{apply_binary, apply_func, BinOp, EvalError, Expr, Func, Var};

/// Slot layout `[t, x1..xn, u1..um]` shared by all compiled programs of a
/// problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub n: usize,
    pub m: usize,
}

impl VarLayout {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m }
    }

    pub fn width(&self) -> usize {
        1 + self.n + self.m
    }

    pub fn slot(&self, v: Var) -> Option<usize> {
        match v {
            Var::Time => Some(0),
            Var::State(i) if i < self.n => Some(1 + i),
            Var::Control(j) if j < self.m => Some(1 + self.n + j),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error("variable `{0}` is outside the declared layout")]
    OutOfLayout(String),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Load(usize),
    Neg,
    Bin(BinOp, u32),
    Call(Func, u32),
}

/// Postfix program compiled from an [`Expr`]. Evaluation performs the same
/// IEEE operations in the same order as [`Expr::eval`], so both paths agree
/// bit for bit.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    sites: Vec<String>,
    layout: VarLayout,
    constant: Option<f64>,
}

impl Program {
    pub fn compile(e: &Expr, layout: VarLayout) -> Result<Program, CompileError> {
        let mut p = Program { ops: Vec::new(), sites: Vec::new(), layout, constant: None };
        p.emit(e)?;
        if let [Op::Const(c)] = p.ops.as_slice() {
            p.constant = Some(*c);
        }
        Ok(p)
    }

    fn emit(&mut self, e: &Expr) -> Result<(), CompileError> {
        match e {
            Expr::Num(v) => self.ops.push(Op::Const(*v)),
            Expr::Var(v) => {
                let slot = self.layout.slot(*v).ok_or_else(|| CompileError::OutOfLayout(v.name()))?;
                self.ops.push(Op::Load(slot));
            }
            Expr::Neg(a) => {
                self.emit(a)?;
                self.ops.push(Op::Neg);
            }
            Expr::Binary(op, a, b) => {
                self.emit(a)?;
                self.emit(b)?;
                let site = self.site(e);
                self.ops.push(Op::Bin(*op, site));
            }
            Expr::Call(f, args) => {
                for a in args {
                    self.emit(a)?;
                }
                let site = self.site(e);
                self.ops.push(Op::Call(*f, site));
            }
        }
        Ok(())
    }

    fn site(&mut self, e: &Expr) -> u32 {
        self.sites.push(e.to_string());
        (self.sites.len() - 1) as u32
    }

    pub fn layout(&self) -> VarLayout {
        self.layout
    }

    /// `Some(c)` when the program is a single literal.
    pub fn constant(&self) -> Option<f64> {
        self.constant
    }

    /// Evaluates on a slot array laid out as `[t, x.., u..]`.
    pub fn eval(&self, slots: &[f64]) -> Result<f64, EvalError> {
        if let Some(c) = self.constant {
            return Ok(c);
        }
        let mut stack: SmallVec<[f64; 16]> = SmallVec::new();
        for op in &self.ops {
            match *op {
                Op::Const(c) => stack.push(c),
                Op::Load(s) => stack.push(slots[s]),
                Op::Neg => {
                    let a = stack.pop().unwrap();
                    stack.push(-a);
                }
                Op::Bin(bop, site) => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    let v = apply_binary(bop, a, b).map_err(|reason| self.domain(reason, site))?;
                    stack.push(v);
                }
                Op::Call(f, site) => {
                    let (x, y) = if f.arity() == 2 {
                        let y = stack.pop().unwrap();
                        (stack.pop().unwrap(), y)
                    } else {
                        (stack.pop().unwrap(), 0.0)
                    };
                    let v = apply_func(f, x, y).map_err(|reason| self.domain(reason, site))?;
                    stack.push(v);
                }
            }
        }
        Ok(stack.pop().unwrap())
    }

    fn domain(&self, reason: &'static str, site: u32) -> EvalError {
        EvalError::Domain { reason, subexpr: self.sites[site as usize].clone() }
    }

    /// Convenience wrapper that assembles the slot array.
    pub fn eval_at(&self, t: f64, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
        let mut slots: SmallVec<[f64; 16]> = SmallVec::with_capacity(self.layout.width());
        slots.push(t);
        slots.extend_from_slice(&x[..self.layout.n]);
        slots.extend_from_slice(&u[..self.layout.m]);
        self.eval(&slots)
    }
}
