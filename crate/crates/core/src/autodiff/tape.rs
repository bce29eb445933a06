//! Scalar reverse-mode tape.
//!
//! Every arithmetic operation on a [`Var`] appends one node holding its value,
//! up to two parent indices and the local partial derivatives with respect to
//! those parents. Parents always precede the node, so a single reverse sweep
//! accumulates adjoints.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Inputs to `asin`/`acos` are clamped to this distance from the poles.
pub const POLE_GUARD: f64 = 1e-12;

const NO_PARENT: u32 = u32::MAX;

/// Operation kind of a recorded node. Constants used by the operation are
/// stored inline so the tape can be replayed on new inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddC(f64),
    CSub(f64),
    MulC(f64),
    DivC(f64),
    CDiv(f64),
    PowI(i32),
    PowF(f64),
    Sqrt,
    Exp,
    Ln,
    Tanh,
    Sin,
    Cos,
    Asin,
    Acos,
    MinC(f64),
    MaxC(f64),
}

/// Named unary primitives, for programs assembled at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sqrt,
    Exp,
    Ln,
    Tanh,
    Sin,
    Cos,
    Asin,
    Acos,
}

impl Unary {
    pub const ALL: [Unary; 9] = [
        Unary::Neg,
        Unary::Sqrt,
        Unary::Exp,
        Unary::Ln,
        Unary::Tanh,
        Unary::Sin,
        Unary::Cos,
        Unary::Asin,
        Unary::Acos,
    ];
}

impl FromStr for Unary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "neg" => Unary::Neg,
            "sqrt" => Unary::Sqrt,
            "exp" => Unary::Exp,
            "ln" | "log" => Unary::Ln,
            "tanh" => Unary::Tanh,
            "sin" => Unary::Sin,
            "cos" => Unary::Cos,
            "asin" | "arcsin" => Unary::Asin,
            "acos" | "arccos" => Unary::Acos,
            other => return Err(Error::UnsupportedPrimitive(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    parents: [u32; 2],
    partials: [f64; 2],
    value: f64,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_non_finite: Cell<Option<usize>>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
            first_non_finite: Cell::new(None),
        }
    }

    /// Drops all nodes but keeps the allocation. Outstanding `Var`s must not
    /// be used afterwards; the borrow checker enforces this through `&mut`.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.first_non_finite.set(None);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, value: f64) -> Var<'_> {
        self.push(Op::Input, [NO_PARENT; 2], [0.0; 2], value)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, [NO_PARENT; 2], [0.0; 2], value)
    }

    /// Index of the first node whose value was not finite, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite.get()
    }

    /// Returns `Err(NonFiniteValue)` if any recorded value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            Some(index) => Err(Error::NonFiniteValue { index }),
            None => Ok(()),
        }
    }

    fn push(&self, op: Op, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        if !value.is_finite() && self.first_non_finite.get().is_none() {
            self.first_non_finite.set(Some(index));
        }
        nodes.push(Node {
            op,
            parents,
            partials,
            value,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn unary(&self, op: Op, a: Var<'_>, value: f64, da: f64) -> Var<'_> {
        self.push(op, [a.index as u32, NO_PARENT], [da, 0.0], value)
    }

    fn binary(&self, op: Op, a: Var<'_>, b: Var<'_>, value: f64, da: f64, db: f64) -> Var<'_> {
        self.push(op, [a.index as u32, b.index as u32], [da, db], value)
    }

    /// Reverse sweep from `output`; returns adjoints of every node.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; output.index + 1];
        adj[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        adj
    }

    /// Gradient of `output` with respect to each of `wrt`.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        wrt.iter()
            .map(|v| adj.get(v.index).copied().unwrap_or(0.0))
            .collect()
    }

    /// Re-evaluates every node with new values for the input nodes (in
    /// recording order). Returns the new value of every node.
    pub fn replay(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let nodes = self.nodes.borrow();
        let mut vals: Vec<f64> = Vec::with_capacity(nodes.len());
        let mut next_input = 0;
        for n in nodes.iter() {
            let a = |k: usize| vals[n.parents[k] as usize];
            let v = match n.op {
                Op::Input => {
                    let v = *inputs.get(next_input).ok_or_else(|| {
                        Error::DimensionMismatch(format!(
                            "replay needs more than {} inputs",
                            inputs.len()
                        ))
                    })?;
                    next_input += 1;
                    v
                }
                Op::Const => n.value,
                Op::Add => a(0) + a(1),
                Op::Sub => a(0) - a(1),
                Op::Mul => a(0) * a(1),
                Op::Div => a(0) / a(1),
                Op::Neg => -a(0),
                Op::AddC(c) => a(0) + c,
                Op::CSub(c) => c - a(0),
                Op::MulC(c) => a(0) * c,
                Op::DivC(c) => a(0) / c,
                Op::CDiv(c) => c / a(0),
                Op::PowI(k) => a(0).powi(k),
                Op::PowF(c) => a(0).powf(c),
                Op::Sqrt => a(0).sqrt(),
                Op::Exp => a(0).exp(),
                Op::Ln => a(0).ln(),
                Op::Tanh => a(0).tanh(),
                Op::Sin => a(0).sin(),
                Op::Cos => a(0).cos(),
                Op::Asin => guard_pole(a(0)).asin(),
                Op::Acos => guard_pole(a(0)).acos(),
                Op::MinC(c) => a(0).min(c),
                Op::MaxC(c) => a(0).max(c),
            };
            vals.push(v);
        }
        if next_input != inputs.len() {
            return Err(Error::DimensionMismatch(format!(
                "tape has {next_input} inputs, replay got {}",
                inputs.len()
            )));
        }
        Ok(vals)
    }

    pub fn value_of(&self, index: usize) -> f64 {
        self.nodes.borrow()[index].value
    }
}

fn guard_pole(x: f64) -> f64 {
    x.clamp(-1.0 + POLE_GUARD, 1.0 - POLE_GUARD)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn square(self) -> Self {
        self.powi(2)
    }

    pub fn powi(self, k: i32) -> Self {
        let x = self.value;
        let d = if k == 0 { 0.0 } else { k as f64 * x.powi(k - 1) };
        self.tape.unary(Op::PowI(k), self, x.powi(k), d)
    }

    /// `self^c` for a constant exponent.
    pub fn powf(self, c: f64) -> Self {
        let x = self.value;
        self.tape
            .unary(Op::PowF(c), self, x.powf(c), c * x.powf(c - 1.0))
    }

    pub fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.tape.unary(Op::Sqrt, self, s, 0.5 / s)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.tape.unary(Op::Exp, self, e, e)
    }

    pub fn ln(self) -> Self {
        let x = self.value;
        self.tape.unary(Op::Ln, self, x.ln(), 1.0 / x)
    }

    pub fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.tape.unary(Op::Tanh, self, t, 1.0 - t * t)
    }

    pub fn sin(self) -> Self {
        let x = self.value;
        self.tape.unary(Op::Sin, self, x.sin(), x.cos())
    }

    pub fn cos(self) -> Self {
        let x = self.value;
        self.tape.unary(Op::Cos, self, x.cos(), -x.sin())
    }

    pub fn asin(self) -> Self {
        let x = guard_pole(self.value);
        self.tape
            .unary(Op::Asin, self, x.asin(), 1.0 / (1.0 - x * x).sqrt())
    }

    pub fn acos(self) -> Self {
        let x = guard_pole(self.value);
        self.tape
            .unary(Op::Acos, self, x.acos(), -1.0 / (1.0 - x * x).sqrt())
    }

    /// `min(self, c)`; the derivative is taken from the active branch.
    pub fn min_c(self, c: f64) -> Self {
        let x = self.value;
        let d = if x <= c { 1.0 } else { 0.0 };
        self.tape.unary(Op::MinC(c), self, x.min(c), d)
    }

    pub fn max_c(self, c: f64) -> Self {
        let x = self.value;
        let d = if x >= c { 1.0 } else { 0.0 };
        self.tape.unary(Op::MaxC(c), self, x.max(c), d)
    }

    pub fn apply(self, op: Unary) -> Self {
        match op {
            Unary::Neg => -self,
            Unary::Sqrt => self.sqrt(),
            Unary::Exp => self.exp(),
            Unary::Ln => self.ln(),
            Unary::Tanh => self.tanh(),
            Unary::Sin => self.sin(),
            Unary::Cos => self.cos(),
            Unary::Asin => self.asin(),
            Unary::Acos => self.acos(),
        }
    }
}

/// Sum of a non-empty slice, recorded as a chain of binary additions.
pub fn sum<'t>(xs: &[Var<'t>]) -> Var<'t> {
    let (first, rest) = xs.split_first().expect("sum of an empty slice");
    rest.iter().fold(*first, |acc, &x| acc + x)
}

pub fn dot<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    let prods: Vec<_> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    sum(&prods)
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(Op::Add, self, rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(Op::Sub, self, rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            Op::Mul,
            self,
            rhs,
            self.value * rhs.value,
            rhs.value,
            self.value,
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.value / rhs.value;
        self.tape
            .binary(Op::Div, self, rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(Op::Neg, self, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::AddC(c), self, self.value + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::AddC(-c), self, self.value - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::MulC(c), self, self.value * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::DivC(c), self, self.value / c, 1.0 / c)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        v.tape.unary(Op::CSub(self), v, self - v.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        let q = self / v.value;
        v.tape.unary(Op::CDiv(self), v, q, -q / v.value)
    }
}

/// A finished recording: output values plus the tape needed to differentiate them.
pub struct Recording {
    tape: Tape,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    values: Vec<f64>,
}

impl Recording {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Gradient of the (single) output with respect to every input.
    pub fn backward(&self) -> Result<Vec<f64>> {
        if self.outputs.len() != 1 {
            return Err(Error::ScalarRequired(self.outputs.len()));
        }
        self.backward_output(0)
    }

    /// Gradient of output `k` with respect to every input.
    pub fn backward_output(&self, k: usize) -> Result<Vec<f64>> {
        let out = *self.outputs.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("output {k} of {}", self.outputs.len()))
        })?;
        let var = Var {
            tape: &self.tape,
            index: out,
            value: self.values[k],
        };
        let adj = self.tape.adjoints(var);
        Ok(self
            .inputs
            .iter()
            .map(|&i| adj.get(i).copied().unwrap_or(0.0))
            .collect())
    }

    /// Replays the tape on new inputs and returns the new output values.
    pub fn replay(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let vals = self.tape.replay(inputs)?;
        Ok(self.outputs.iter().map(|&i| vals[i]).collect())
    }
}

/// Records `f` applied to fresh input variables holding `inputs`.
pub fn record<F>(inputs: &[f64], f: F) -> Result<Recording>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Vec<Var<'t>>,
{
    let tape = Tape::new();
    let (input_idx, output_idx, values) = {
        let vars: Vec<Var<'_>> = inputs.iter().map(|&x| tape.input(x)).collect();
        let outs = f(&tape, &vars);
        (
            vars.iter().map(|v| v.index).collect::<Vec<_>>(),
            outs.iter().map(|v| v.index).collect::<Vec<_>>(),
            outs.iter().map(|v| v.value).collect::<Vec<_>>(),
        )
    };
    tape.check_finite()?;
    Ok(Recording {
        tape,
        inputs: input_idx,
        outputs: output_idx,
        values,
    })
}

/// Value and gradient of a scalar function.
pub fn value_and_grad<F>(inputs: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let rec = record(inputs, |t, xs| vec![f(t, xs)])?;
    let g = rec.backward()?;
    Ok((rec.values[0], g))
}
