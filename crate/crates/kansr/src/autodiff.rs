//! Reverse-mode autodiff on a scalar operation tape.
//!
//! The tape records one scalar primitive per node with eager forward
//! evaluation, so model code can branch on current values (e.g. to pick a
//! knot interval) while recording. `backward` replays the ops in reverse and
//! accumulates adjoints; the gradient with respect to the parameter vector is
//! read off the first `n_params` nodes, which are always the parameter leaves
//! pushed by [`Tape::reset`].
//!
//! Domain guards (`guard_min`, `guard_away_zero`, `guard_unit`) clamp inputs
//! to open domains with margin [`GUARD_MARGIN`] and bump a saturation counter
//! instead of producing NaNs. Gradients through an active clamp are zero.
//!
//! [`EvalCtx`] abstracts over "record on the tape" and "just compute f64"
//! so edge and operator evaluation is written once and shared by training
//! and plain evaluation paths.

use serde::{Deserialize, Serialize};

/// Margin used by the domain guards.
pub const GUARD_MARGIN: f64 = 1e-8;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct V(pub u32);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    PowI(u32, i32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Sin(u32),
    Cos(u32),
    Tan(u32),
    Tanh(u32),
    Asinh(u32),
    Abs(u32),
    Sign(u32),
    Atan(u32),
    Asin(u32),
    Acos(u32),
    Atanh(u32),
    Gaussian(u32),
    /// w0 * a + w1, coefficients at `wbuf[w .. w+2]`.
    Affine(u32, u32),
    /// Clamp to [wbuf[w], wbuf[w+1]]; gradient 0 when clamped.
    ClampRange(u32, u32),
    /// max(a, GUARD_MARGIN); saturation counted.
    GuardMin(u32),
    /// Clamp |a| >= GUARD_MARGIN preserving sign; saturation counted.
    GuardAwayZero(u32),
    /// Clamp to [-1+GUARD_MARGIN, 1-GUARD_MARGIN]; saturation counted.
    GuardUnit(u32),
    /// dot(params[first..first+len], wbuf[w..w+len]) with constant weights.
    DotConst { first: u32, w: u32, len: u32 },
    /// dot(params[first..first+len], wbuf[w..w+len]) where the weights are a
    /// function of node `x`; `wbuf[w+len..w+2len]` holds dweight/dx so the
    /// adjoint of `x` is `dot(params, dweights)`.
    WeightedDot { first: u32, x: u32, w: u32, len: u32 },
}

/// Scalar operation tape with eager forward values.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    wbuf: Vec<f64>,
    n_params: usize,
    sat: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new(), adj: Vec::new(), wbuf: Vec::new(), n_params: 0, sat: 0 }
    }

    /// Clear the tape (keeping capacity) and push `params` as leaf nodes
    /// `0..params.len()`.
    pub fn reset(&mut self, params: &[f64]) {
        self.ops.clear();
        self.vals.clear();
        self.adj.clear();
        self.wbuf.clear();
        self.sat = 0;
        self.n_params = params.len();
        for &p in params {
            self.ops.push(Op::Leaf);
            self.vals.push(p);
        }
    }

    #[inline]
    fn push(&mut self, op: Op, val: f64) -> V {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        V(id)
    }

    /// Current value of a node.
    #[inline]
    pub fn value(&self, v: V) -> f64 {
        self.vals[v.0 as usize]
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    pub fn sat_count(&self) -> u64 {
        self.sat
    }

    /// Recompute all node values from the recorded ops. Used to check that
    /// replaying the tape reproduces the eager forward pass exactly.
    pub fn replay_forward(&self) -> Vec<f64> {
        let mut vals = vec![0.0; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            let v = |x: u32| vals[x as usize];
            vals[i] = match *op {
                Op::Leaf => self.vals[i],
                Op::Add(a, b) => v(a) + v(b),
                Op::Sub(a, b) => v(a) - v(b),
                Op::Mul(a, b) => v(a) * v(b),
                Op::Div(a, b) => v(a) / v(b),
                Op::Neg(a) => -v(a),
                Op::PowI(a, n) => v(a).powi(n),
                Op::Exp(a) => v(a).exp(),
                Op::Ln(a) => v(a).ln(),
                Op::Sqrt(a) => v(a).sqrt(),
                Op::Sin(a) => v(a).sin(),
                Op::Cos(a) => v(a).cos(),
                Op::Tan(a) => v(a).tan(),
                Op::Tanh(a) => v(a).tanh(),
                Op::Asinh(a) => v(a).asinh(),
                Op::Abs(a) => v(a).abs(),
                Op::Sign(a) => sign(v(a)),
                Op::Atan(a) => v(a).atan(),
                Op::Asin(a) => v(a).asin(),
                Op::Acos(a) => v(a).acos(),
                Op::Atanh(a) => v(a).atanh(),
                Op::Gaussian(a) => (-v(a) * v(a)).exp(),
                Op::Affine(a, w) => self.wbuf[w as usize] * v(a) + self.wbuf[w as usize + 1],
                Op::ClampRange(a, w) => v(a).clamp(self.wbuf[w as usize], self.wbuf[w as usize + 1]),
                Op::GuardMin(a) => v(a).max(GUARD_MARGIN),
                Op::GuardAwayZero(a) => guard_away_zero_val(v(a)),
                Op::GuardUnit(a) => v(a).clamp(-1.0 + GUARD_MARGIN, 1.0 - GUARD_MARGIN),
                Op::DotConst { first, w, len } => {
                    let mut acc = 0.0;
                    for k in 0..len as usize {
                        acc += vals[first as usize + k] * self.wbuf[w as usize + k];
                    }
                    acc
                }
                Op::WeightedDot { first, w, len, .. } => {
                    let mut acc = 0.0;
                    for k in 0..len as usize {
                        acc += vals[first as usize + k] * self.wbuf[w as usize + k];
                    }
                    acc
                }
            };
        }
        vals
    }

    /// Reverse pass seeding `d out / d out = 1`. Adjoints of parameter leaves
    /// are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, out: V) {
        self.adj.clear();
        self.adj.resize(self.ops.len(), 0.0);
        self.adj[out.0 as usize] = 1.0;
        for i in (0..self.ops.len()).rev() {
            let g = self.adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.adj[a as usize] += g;
                    self.adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    self.adj[a as usize] += g;
                    self.adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.vals[a as usize], self.vals[b as usize]);
                    self.adj[a as usize] += g * vb;
                    self.adj[b as usize] += g * va;
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.vals[a as usize], self.vals[b as usize]);
                    self.adj[a as usize] += g / vb;
                    self.adj[b as usize] -= g * va / (vb * vb);
                }
                Op::Neg(a) => self.adj[a as usize] -= g,
                Op::PowI(a, n) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g * f64::from(n) * va.powi(n - 1);
                }
                Op::Exp(a) => self.adj[a as usize] += g * self.vals[i],
                Op::Ln(a) => self.adj[a as usize] += g / self.vals[a as usize],
                Op::Sqrt(a) => self.adj[a as usize] += g * 0.5 / self.vals[i],
                Op::Sin(a) => self.adj[a as usize] += g * self.vals[a as usize].cos(),
                Op::Cos(a) => self.adj[a as usize] -= g * self.vals[a as usize].sin(),
                Op::Tan(a) => {
                    let t = self.vals[i];
                    self.adj[a as usize] += g * (1.0 + t * t);
                }
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    self.adj[a as usize] += g * (1.0 - t * t);
                }
                Op::Asinh(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g / (1.0 + va * va).sqrt();
                }
                Op::Abs(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g * sign(va);
                }
                Op::Sign(_) => {}
                Op::Atan(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g / (1.0 + va * va);
                }
                Op::Asin(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g / (1.0 - va * va).sqrt();
                }
                Op::Acos(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] -= g / (1.0 - va * va).sqrt();
                }
                Op::Atanh(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g / (1.0 - va * va);
                }
                Op::Gaussian(a) => {
                    let va = self.vals[a as usize];
                    self.adj[a as usize] += g * (-2.0 * va) * self.vals[i];
                }
                Op::Affine(a, w) => self.adj[a as usize] += g * self.wbuf[w as usize],
                Op::ClampRange(a, w) => {
                    let va = self.vals[a as usize];
                    if va >= self.wbuf[w as usize] && va <= self.wbuf[w as usize + 1] {
                        self.adj[a as usize] += g;
                    }
                }
                Op::GuardMin(a) => {
                    if self.vals[a as usize] > GUARD_MARGIN {
                        self.adj[a as usize] += g;
                    }
                }
                Op::GuardAwayZero(a) => {
                    if self.vals[a as usize].abs() > GUARD_MARGIN {
                        self.adj[a as usize] += g;
                    }
                }
                Op::GuardUnit(a) => {
                    let va = self.vals[a as usize];
                    if va.abs() < 1.0 - GUARD_MARGIN {
                        self.adj[a as usize] += g;
                    }
                }
                Op::DotConst { first, w, len } => {
                    for k in 0..len as usize {
                        self.adj[first as usize + k] += g * self.wbuf[w as usize + k];
                    }
                }
                Op::WeightedDot { first, x, w, len } => {
                    let mut dx = 0.0;
                    for k in 0..len as usize {
                        self.adj[first as usize + k] += g * self.wbuf[w as usize + k];
                        dx += self.vals[first as usize + k] * self.wbuf[w as usize + len as usize + k];
                    }
                    self.adj[x as usize] += g * dx;
                }
            }
        }
    }

    /// Gradient with respect to the parameter vector passed to `reset`.
    /// Valid after `backward`.
    pub fn grad(&self) -> &[f64] {
        &self.adj[..self.n_params]
    }

    /// Affine of a node with constant coefficients: `scale * a + offset`.
    pub fn affine(&mut self, a: V, scale: f64, offset: f64) -> V {
        let w = self.wbuf.len() as u32;
        self.wbuf.push(scale);
        self.wbuf.push(offset);
        let val = scale * self.vals[a.0 as usize] + offset;
        self.push(Op::Affine(a.0, w), val)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn guard_away_zero_val(x: f64) -> f64 {
    if x.abs() >= GUARD_MARGIN {
        x
    } else if x < 0.0 {
        -GUARD_MARGIN
    } else {
        GUARD_MARGIN
    }
}

/// Shared scalar evaluation interface. Implemented by [`Tape`] (recording)
/// and [`F64Ctx`] (plain evaluation), so edge and operator code is written
/// once. `known` reports a value that is constant with respect to the
/// parameter vector, which lets spline evaluation collapse to a single
/// constant-weight dot product when the input is a data point.
pub trait EvalCtx {
    type V: Copy + std::fmt::Debug;
    /// Handle to parameter `idx` of the flat parameter vector.
    fn param(&mut self, idx: usize) -> Self::V;
    /// A constant.
    fn lit(&mut self, c: f64) -> Self::V;
    /// `Some(value)` iff `v` does not depend on the parameter vector.
    fn known(&self, v: Self::V) -> Option<f64>;
    /// Current numeric value (always available; tapes evaluate eagerly).
    fn cur(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn powi(&mut self, a: Self::V, n: i32) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Self::V;
    fn sqrt(&mut self, a: Self::V) -> Self::V;
    fn sin(&mut self, a: Self::V) -> Self::V;
    fn cos(&mut self, a: Self::V) -> Self::V;
    fn tan(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn asinh(&mut self, a: Self::V) -> Self::V;
    fn abs(&mut self, a: Self::V) -> Self::V;
    fn sign(&mut self, a: Self::V) -> Self::V;
    fn atan(&mut self, a: Self::V) -> Self::V;
    fn asin(&mut self, a: Self::V) -> Self::V;
    fn acos(&mut self, a: Self::V) -> Self::V;
    fn atanh(&mut self, a: Self::V) -> Self::V;
    fn gaussian(&mut self, a: Self::V) -> Self::V;
    /// `scale * a + offset` with constants.
    fn affine(&mut self, a: Self::V, scale: f64, offset: f64) -> Self::V;
    fn clamp_range(&mut self, a: Self::V, lo: f64, hi: f64) -> Self::V;
    fn guard_min(&mut self, a: Self::V) -> Self::V;
    fn guard_away_zero(&mut self, a: Self::V) -> Self::V;
    fn guard_unit(&mut self, a: Self::V) -> Self::V;
    /// Dot product of contiguous parameters with constant weights.
    fn dot_const(&mut self, first_param: usize, weights: &[f64]) -> Self::V;
    /// Dot product of contiguous parameters with weights evaluated at the
    /// current value of `x`. `dweights` must hold dweight/dx at that point so
    /// the reverse pass can propagate into `x`.
    fn weighted_dot(
        &mut self,
        first_param: usize,
        x: Self::V,
        weights: &[f64],
        dweights: &[f64],
    ) -> Self::V;
}

macro_rules! tape_unary {
    ($name:ident, $op:ident, $f:expr) => {
        fn $name(&mut self, a: V) -> V {
            let f: fn(f64) -> f64 = $f;
            let val = f(self.vals[a.0 as usize]);
            self.push(Op::$op(a.0), val)
        }
    };
}

impl EvalCtx for Tape {
    type V = V;

    fn param(&mut self, idx: usize) -> V {
        debug_assert!(idx < self.n_params);
        V(idx as u32)
    }

    fn lit(&mut self, c: f64) -> V {
        self.push(Op::Leaf, c)
    }

    fn known(&self, v: V) -> Option<f64> {
        let i = v.0 as usize;
        if i >= self.n_params && matches!(self.ops[i], Op::Leaf) {
            Some(self.vals[i])
        } else {
            None
        }
    }

    fn cur(&self, v: V) -> f64 {
        self.vals[v.0 as usize]
    }

    fn add(&mut self, a: V, b: V) -> V {
        let val = self.vals[a.0 as usize] + self.vals[b.0 as usize];
        self.push(Op::Add(a.0, b.0), val)
    }

    fn sub(&mut self, a: V, b: V) -> V {
        let val = self.vals[a.0 as usize] - self.vals[b.0 as usize];
        self.push(Op::Sub(a.0, b.0), val)
    }

    fn mul(&mut self, a: V, b: V) -> V {
        let val = self.vals[a.0 as usize] * self.vals[b.0 as usize];
        self.push(Op::Mul(a.0, b.0), val)
    }

    fn div(&mut self, a: V, b: V) -> V {
        let val = self.vals[a.0 as usize] / self.vals[b.0 as usize];
        self.push(Op::Div(a.0, b.0), val)
    }

    fn neg(&mut self, a: V) -> V {
        let val = -self.vals[a.0 as usize];
        self.push(Op::Neg(a.0), val)
    }

    fn powi(&mut self, a: V, n: i32) -> V {
        let val = self.vals[a.0 as usize].powi(n);
        self.push(Op::PowI(a.0, n), val)
    }

    tape_unary!(exp, Exp, f64::exp);
    tape_unary!(ln, Ln, f64::ln);
    tape_unary!(sqrt, Sqrt, f64::sqrt);
    tape_unary!(sin, Sin, f64::sin);
    tape_unary!(cos, Cos, f64::cos);
    tape_unary!(tan, Tan, f64::tan);
    tape_unary!(tanh, Tanh, f64::tanh);
    tape_unary!(asinh, Asinh, f64::asinh);
    tape_unary!(abs, Abs, f64::abs);
    tape_unary!(sign, Sign, sign);
    tape_unary!(atan, Atan, f64::atan);
    tape_unary!(asin, Asin, f64::asin);
    tape_unary!(acos, Acos, f64::acos);
    tape_unary!(atanh, Atanh, f64::atanh);
    tape_unary!(gaussian, Gaussian, |x| (-x * x).exp());

    fn affine(&mut self, a: V, scale: f64, offset: f64) -> V {
        Tape::affine(self, a, scale, offset)
    }

    fn clamp_range(&mut self, a: V, lo: f64, hi: f64) -> V {
        let w = self.wbuf.len() as u32;
        self.wbuf.push(lo);
        self.wbuf.push(hi);
        let val = self.vals[a.0 as usize].clamp(lo, hi);
        self.push(Op::ClampRange(a.0, w), val)
    }

    fn guard_min(&mut self, a: V) -> V {
        let va = self.vals[a.0 as usize];
        if va < GUARD_MARGIN {
            self.sat += 1;
        }
        self.push(Op::GuardMin(a.0), va.max(GUARD_MARGIN))
    }

    fn guard_away_zero(&mut self, a: V) -> V {
        let va = self.vals[a.0 as usize];
        if va.abs() < GUARD_MARGIN {
            self.sat += 1;
        }
        self.push(Op::GuardAwayZero(a.0), guard_away_zero_val(va))
    }

    fn guard_unit(&mut self, a: V) -> V {
        let va = self.vals[a.0 as usize];
        if va.abs() > 1.0 - GUARD_MARGIN {
            self.sat += 1;
        }
        self.push(Op::GuardUnit(a.0), va.clamp(-1.0 + GUARD_MARGIN, 1.0 - GUARD_MARGIN))
    }

    fn dot_const(&mut self, first_param: usize, weights: &[f64]) -> V {
        debug_assert!(first_param + weights.len() <= self.n_params);
        let w = self.wbuf.len() as u32;
        self.wbuf.extend_from_slice(weights);
        let mut acc = 0.0;
        for (k, &wt) in weights.iter().enumerate() {
            acc += self.vals[first_param + k] * wt;
        }
        self.push(Op::DotConst { first: first_param as u32, w, len: weights.len() as u32 }, acc)
    }

    fn weighted_dot(&mut self, first_param: usize, x: V, weights: &[f64], dweights: &[f64]) -> V {
        debug_assert!(first_param + weights.len() <= self.n_params);
        debug_assert_eq!(weights.len(), dweights.len());
        let w = self.wbuf.len() as u32;
        self.wbuf.extend_from_slice(weights);
        self.wbuf.extend_from_slice(dweights);
        let mut acc = 0.0;
        for (k, &wt) in weights.iter().enumerate() {
            acc += self.vals[first_param + k] * wt;
        }
        self.push(
            Op::WeightedDot { first: first_param as u32, x: x.0, w, len: weights.len() as u32 },
            acc,
        )
    }
}

/// Plain f64 evaluation context over a borrowed flat parameter vector.
pub struct F64Ctx<'a> {
    pub params: &'a [f64],
    pub sat: u64,
}

impl<'a> F64Ctx<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        F64Ctx { params, sat: 0 }
    }
}

impl EvalCtx for F64Ctx<'_> {
    type V = f64;

    fn param(&mut self, idx: usize) -> f64 {
        self.params[idx]
    }

    fn lit(&mut self, c: f64) -> f64 {
        c
    }

    fn known(&self, v: f64) -> Option<f64> {
        Some(v)
    }

    fn cur(&self, v: f64) -> f64 {
        v
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn powi(&mut self, a: f64, n: i32) -> f64 {
        a.powi(n)
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    fn cos(&mut self, a: f64) -> f64 {
        a.cos()
    }
    fn tan(&mut self, a: f64) -> f64 {
        a.tan()
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn asinh(&mut self, a: f64) -> f64 {
        a.asinh()
    }
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    fn sign(&mut self, a: f64) -> f64 {
        sign(a)
    }
    fn atan(&mut self, a: f64) -> f64 {
        a.atan()
    }
    fn asin(&mut self, a: f64) -> f64 {
        a.asin()
    }
    fn acos(&mut self, a: f64) -> f64 {
        a.acos()
    }
    fn atanh(&mut self, a: f64) -> f64 {
        a.atanh()
    }
    fn gaussian(&mut self, a: f64) -> f64 {
        (-a * a).exp()
    }
    fn affine(&mut self, a: f64, scale: f64, offset: f64) -> f64 {
        scale * a + offset
    }
    fn clamp_range(&mut self, a: f64, lo: f64, hi: f64) -> f64 {
        a.clamp(lo, hi)
    }
    fn guard_min(&mut self, a: f64) -> f64 {
        if a < GUARD_MARGIN {
            self.sat += 1;
        }
        a.max(GUARD_MARGIN)
    }
    fn guard_away_zero(&mut self, a: f64) -> f64 {
        if a.abs() < GUARD_MARGIN {
            self.sat += 1;
        }
        guard_away_zero_val(a)
    }
    fn guard_unit(&mut self, a: f64) -> f64 {
        if a.abs() > 1.0 - GUARD_MARGIN {
            self.sat += 1;
        }
        a.clamp(-1.0 + GUARD_MARGIN, 1.0 - GUARD_MARGIN)
    }
    fn dot_const(&mut self, first_param: usize, weights: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, &wt) in weights.iter().enumerate() {
            acc += self.params[first_param + k] * wt;
        }
        acc
    }
    fn weighted_dot(&mut self, first_param: usize, _x: f64, weights: &[f64], _dw: &[f64]) -> f64 {
        self.dot_const(first_param, weights)
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative error between two gradients, with an absolute fallback:
/// entries agreeing within 1e-7 absolutely count as exact.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]).abs();
        if d <= 1e-7 {
            continue;
        }
        worst = worst.max(d / a[i].abs().max(b[i].abs()));
    }
    worst
}
