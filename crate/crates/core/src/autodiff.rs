//! Reverse-mode automatic differentiation over a scalar expression tape.
//!
//! A [`Tape`] is an append-only list of nodes in topological order. Each node
//! records its operation, up to two operand indices and its primal value.
//! [`Tape::backward`] runs the usual adjoint sweep. [`Tape::derivative_graph`]
//! instead *emits* the adjoint computation as new nodes on the same tape, so
//! the derivative is itself a [`Var`] that can be differentiated again. This
//! is how PDE residuals containing `u_x`, `u_xx`, `u_t` of the network output
//! stay differentiable with respect to the network parameters.

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("non-finite value {0} cannot be lifted onto the tape")]
    NonFiniteInput(f64),
    #[error("variable belongs to tape {var_tape}, not tape {tape}")]
    TapeMismatch { tape: u32, var_tape: u32 },
    #[error("division by zero in primal evaluation")]
    DivisionByZero,
    #[error("{op:?} is undefined at {value}")]
    Domain { op: Op, value: f64 },
    #[error("{op:?} produced a non-finite value")]
    Overflow { op: Op },
    #[error("{op:?} expects {expected} operand(s), got {actual}")]
    Arity { op: Op, expected: usize, actual: usize },
    #[error("derivative_graph requires a leaf variable")]
    NotLeaf,
    #[error("non-finite function value during gradient check")]
    NonFiniteCheck,
}

impl AdError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            AdError::DivisionByZero | AdError::Domain { .. } | AdError::Overflow { .. } | AdError::NonFiniteCheck
        )
    }
}

/// Primitive operations recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    /// Heaviside step, `1` for `x > 0` and `0` otherwise. Used as the
    /// derivative of `Relu`; its own derivative is zero.
    Step,
    Softplus,
    PowInt(i32),
    /// `z * z`, the real-valued `|z|^2`.
    AbsSq,
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    args: [u32; 2],
    value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Hyperbolic tangent via `exp`/`expm1`; within a few ulp of the libm
/// version and noticeably cheaper.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let t = if a > 20.0 {
        1.0
    } else if a < 0.5 {
        let e = (2.0 * a).exp_m1();
        e / (e + 2.0)
    } else {
        1.0 - 2.0 / ((2.0 * a).exp() + 1.0)
    };
    t.copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn primal(op: Op, x: f64, y: f64) -> Result<f64, AdError> {
    let v = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add => x + y,
        Op::Sub => x - y,
        Op::Mul => x * y,
        Op::Div => {
            if y == 0.0 {
                return Err(AdError::DivisionByZero);
            }
            x / y
        }
        Op::Neg => -x,
        Op::Sin => x.sin(),
        Op::Cos => x.cos(),
        Op::Exp => x.exp(),
        Op::Ln => {
            if x <= 0.0 {
                return Err(AdError::Domain { op, value: x });
            }
            x.ln()
        }
        Op::Tanh => tanh(x),
        Op::Sigmoid => sigmoid(x),
        Op::Relu => x.max(0.0),
        Op::Step => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Op::Softplus => softplus(x),
        Op::PowInt(n) => {
            if n < 0 && x == 0.0 {
                return Err(AdError::DivisionByZero);
            }
            x.powi(n)
        }
        Op::AbsSq => x * x,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AdError::Overflow { op })
    }
}

/// Adjoints from one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    /// `d output / d var`; zero for nodes that are not ancestors of the output
    /// or were created after it.
    pub fn wrt(&self, var: Var) -> f64 {
        self.adjoints.get(var.index()).copied().unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn with_capacity(capacity: usize) -> Self {
        let mut tape = Tape::new();
        tape.nodes.reserve(capacity);
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes and start a fresh tape generation. Vars created before
    /// the reset are rejected afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<(), AdError> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(AdError::TapeMismatch {
                tape: self.id,
                var_tape: v.tape,
            });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, args: [u32; 2], value: f64) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { op, args, value });
        Var { tape: self.id, index }
    }

    pub fn lift(&mut self, value: f64) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFiniteInput(value));
        }
        Ok(self.push(Op::Leaf, [0, 0], value))
    }

    pub fn lift_all(&mut self, values: &[f64]) -> Result<Vec<Var>, AdError> {
        values.iter().map(|&v| self.lift(v)).collect()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    /// Checked application of a primitive.
    pub fn apply(&mut self, op: Op, operands: &[Var]) -> Result<Var, AdError> {
        let arity = op.arity();
        if op == Op::Leaf || operands.len() != arity {
            return Err(AdError::Arity {
                op,
                expected: arity,
                actual: operands.len(),
            });
        }
        for &v in operands {
            self.check(v)?;
        }
        let x = self.value(operands[0]);
        let (y, b) = if arity == 2 {
            (self.value(operands[1]), operands[1].index)
        } else {
            (0.0, 0)
        };
        let value = primal(op, x, y)?;
        Ok(self.push(op, [operands[0].index, b], value))
    }

    fn op1(&mut self, op: Op, x: Var) -> Var {
        self.apply(op, &[x])
            .unwrap_or_else(|e| panic!("tape operation failed: {e}"))
    }

    fn op2(&mut self, op: Op, x: Var, y: Var) -> Var {
        self.apply(op, &[x, y])
            .unwrap_or_else(|e| panic!("tape operation failed: {e}"))
    }

    // Convenience forms of `apply`. They panic on misuse (wrong tape, division
    // by a zero primal); use `apply` where that must be recoverable.

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        self.op2(Op::Add, x, y)
    }
    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        self.op2(Op::Sub, x, y)
    }
    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        self.op2(Op::Mul, x, y)
    }
    pub fn div(&mut self, x: Var, y: Var) -> Var {
        self.op2(Op::Div, x, y)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.op1(Op::Neg, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.op1(Op::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.op1(Op::Cos, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.op1(Op::Exp, x)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.op1(Op::Ln, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.op1(Op::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.op1(Op::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.op1(Op::Relu, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.op1(Op::Softplus, x)
    }
    pub fn powi(&mut self, x: Var, n: i32) -> Var {
        self.op1(Op::PowInt(n), x)
    }
    pub fn abs_sq(&mut self, x: Var) -> Var {
        self.op1(Op::AbsSq, x)
    }

    /// `x * c` for a plain constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = self.lift(c).expect("finite scale factor");
        self.mul(x, c)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var, AdError> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return self.lift(0.0);
        };
        self.check(first)?;
        let mut acc = first;
        for &t in iter {
            acc = self.apply(Op::Add, &[acc, t])?;
        }
        Ok(acc)
    }

    /// Reverse sweep from `output`.
    pub fn backward(&self, output: Var) -> Result<Gradient, AdError> {
        self.check(output)?;
        let n = output.index() + 1;
        let mut adj = vec![0.0; n];
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            let a = node.args[0] as usize;
            let b = node.args[1] as usize;
            match node.op {
                Op::Leaf => {}
                Op::Add => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul => {
                    let (x, y) = (self.nodes[a].value, self.nodes[b].value);
                    adj[a] += g * y;
                    adj[b] += g * x;
                }
                Op::Div => {
                    let y = self.nodes[b].value;
                    adj[a] += g / y;
                    adj[b] -= g * node.value / y;
                }
                op => {
                    let x = self.nodes[a].value;
                    adj[a] += g * unary_partial(op, x, node.value);
                }
            }
        }
        Ok(Gradient { adjoints: adj })
    }

    /// Emit `d output / d wrt` as a new differentiable node.
    ///
    /// Only the part of the graph that depends on `wrt` is transformed, so
    /// repeated application (u -> u_x -> u_xx -> d u_xx / d theta) stays small.
    pub fn derivative_graph(&mut self, output: Var, wrt: Var) -> Result<Var, AdError> {
        self.check(output)?;
        self.check(wrt)?;
        if self.nodes[wrt.index()].op != Op::Leaf {
            return Err(AdError::NotLeaf);
        }
        let n = output.index() + 1;
        let w = wrt.index();
        if w >= n {
            return self.lift(0.0);
        }
        let mut depends = vec![false; n];
        depends[w] = true;
        for i in (w + 1)..n {
            let node = self.nodes[i];
            let arity = node.op.arity();
            depends[i] =
                (arity >= 1 && depends[node.args[0] as usize]) || (arity == 2 && depends[node.args[1] as usize]);
        }
        if !depends[n - 1] {
            return self.lift(0.0);
        }

        let id = self.id;
        let var = |index: usize| Var {
            tape: id,
            index: index as u32,
        };
        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[n - 1] = Some(self.lift(1.0)?);
        for i in (w..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !depends[i] {
                continue;
            }
            let node = self.nodes[i];
            let this = var(i);
            let a = node.args[0] as usize;
            let b = node.args[1] as usize;
            let (xa, xb) = (var(a), var(b));
            let mut contributions: [(usize, Option<Var>); 2] = [(a, None), (b, None)];
            match node.op {
                Op::Leaf | Op::Step => {}
                Op::Add => {
                    contributions = [(a, Some(g)), (b, Some(g))];
                }
                Op::Sub => {
                    let ng = if depends[b] { Some(self.neg(g)) } else { None };
                    contributions = [(a, Some(g)), (b, ng)];
                }
                Op::Mul => {
                    let da = if depends[a] { Some(self.mul(g, xb)) } else { None };
                    let db = if depends[b] { Some(self.mul(g, xa)) } else { None };
                    contributions = [(a, da), (b, db)];
                }
                Op::Div => {
                    let da = if depends[a] {
                        Some(self.apply(Op::Div, &[g, xb])?)
                    } else {
                        None
                    };
                    let db = if depends[b] {
                        let q = self.apply(Op::Div, &[this, xb])?;
                        let t = self.mul(g, q);
                        Some(self.neg(t))
                    } else {
                        None
                    };
                    contributions = [(a, da), (b, db)];
                }
                op => {
                    let local = self.unary_partial_graph(op, xa, this)?;
                    contributions[0].1 = local.map(|l| self.mul(g, l));
                }
            }
            for (target, contrib) in contributions {
                let Some(c) = contrib else { continue };
                if !depends[target] {
                    continue;
                }
                adj[target] = Some(match adj[target] {
                    Some(prev) => self.add(prev, c),
                    None => c,
                });
            }
        }
        match adj[w] {
            Some(v) => Ok(v),
            None => self.lift(0.0),
        }
    }

    /// Local derivative of a unary op as nodes; `None` means identically zero.
    fn unary_partial_graph(&mut self, op: Op, x: Var, y: Var) -> Result<Option<Var>, AdError> {
        Ok(Some(match op {
            Op::Neg => self.lift(-1.0)?,
            Op::Sin => self.cos(x),
            Op::Cos => {
                let s = self.sin(x);
                self.neg(s)
            }
            Op::Exp => y,
            Op::Ln => {
                let one = self.lift(1.0)?;
                self.apply(Op::Div, &[one, x])?
            }
            Op::Tanh => {
                let one = self.lift(1.0)?;
                let sq = self.abs_sq(y);
                self.sub(one, sq)
            }
            Op::Sigmoid => {
                let one = self.lift(1.0)?;
                let c = self.sub(one, y);
                self.mul(y, c)
            }
            Op::Relu => self.op1(Op::Step, x),
            Op::Step => return Ok(None),
            Op::Softplus => self.sigmoid(x),
            Op::PowInt(0) => return Ok(None),
            Op::PowInt(1) => self.lift(1.0)?,
            Op::PowInt(n) => {
                let p = self.apply(Op::PowInt(n - 1), &[x])?;
                self.scale(p, f64::from(n))
            }
            Op::AbsSq => self.add(x, x),
            Op::Leaf | Op::Add | Op::Sub | Op::Mul | Op::Div => {
                unreachable!("not a unary op")
            }
        }))
    }
}

fn unary_partial(op: Op, x: f64, y: f64) -> f64 {
    match op {
        Op::Neg => -1.0,
        Op::Sin => x.cos(),
        Op::Cos => -x.sin(),
        Op::Exp => y,
        Op::Ln => 1.0 / x,
        Op::Tanh => 1.0 - y * y,
        Op::Sigmoid => y * (1.0 - y),
        Op::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Op::Step => 0.0,
        Op::Softplus => sigmoid(x),
        Op::PowInt(0) => 0.0,
        Op::PowInt(n) => f64::from(n) * x.powi(n - 1),
        Op::AbsSq => 2.0 * x,
        Op::Leaf | Op::Add | Op::Sub | Op::Mul | Op::Div => unreachable!("not a unary op"),
    }
}

/// Largest relative disagreement between the tape gradient of `f` and a
/// central finite difference with the given step:
/// `max_i |ad_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let ad = {
        let mut tape = Tape::new();
        let xs = tape.lift_all(point)?;
        let y = f(&mut tape, &xs)?;
        if !tape.value(y).is_finite() {
            return Err(AdError::NonFiniteCheck);
        }
        tape.backward(y)?.wrt_all(&xs)
    };
    let eval = |p: &[f64]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let xs = tape.lift_all(p)?;
        let y = f(&mut tape, &xs)?;
        let v = tape.value(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AdError::NonFiniteCheck)
        }
    };
    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + step;
        let up = eval(&p)?;
        p[i] = point[i] - step;
        let down = eval(&p)?;
        p[i] = point[i];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((ad[i] - fd).abs() / (fd.abs() + 1e-12));
    }
    Ok(worst)
}
