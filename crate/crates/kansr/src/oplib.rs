//! Operator library for symbolic edges.
//!
//! Each candidate edge is phi(x) = alpha * g(beta * x + gamma) + delta for a
//! unary form g drawn from a fixed 25-entry library. Ids are the indices in
//! [`LIBRARY`] and are stable: they appear in trial logs, checkpoints, and
//! the published library manifest.
//!
//! Guarded evaluation clamps inputs to open domains (see
//! [`crate::autodiff::GUARD_MARGIN`]); raw evaluation is plain IEEE math and
//! is what expression trees and dataset formulas use.

use crate::autodiff::{Adam, EvalCtx, F64Ctx, Tape};
use crate::seeding;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpForm {
    Const,
    Id,
    Sq,
    Cube,
    Pow4,
    Pow5,
    Inv,
    InvSq,
    InvCube,
    Sqrt,
    InvSqrt,
    Log,
    Exp,
    Sin,
    Cos,
    Tan,
    Tanh,
    Abs,
    Sgn,
    Atan,
    Asin,
    Acos,
    Atanh,
    Gaussian,
    Zero,
}

/// The operator library; index = stable form id. The 25th slot is the second
/// constant variant g(x) = 0.
pub const LIBRARY: [OpForm; 25] = [
    OpForm::Const,
    OpForm::Id,
    OpForm::Sq,
    OpForm::Cube,
    OpForm::Pow4,
    OpForm::Pow5,
    OpForm::Inv,
    OpForm::InvSq,
    OpForm::InvCube,
    OpForm::Sqrt,
    OpForm::InvSqrt,
    OpForm::Log,
    OpForm::Exp,
    OpForm::Sin,
    OpForm::Cos,
    OpForm::Tan,
    OpForm::Tanh,
    OpForm::Abs,
    OpForm::Sgn,
    OpForm::Atan,
    OpForm::Asin,
    OpForm::Acos,
    OpForm::Atanh,
    OpForm::Gaussian,
    OpForm::Zero,
];

impl OpForm {
    pub fn id(self) -> usize {
        LIBRARY.iter().position(|&f| f == self).expect("form in library")
    }

    pub fn from_id(id: usize) -> Option<OpForm> {
        LIBRARY.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpForm::Const => "const",
            OpForm::Id => "id",
            OpForm::Sq => "sq",
            OpForm::Cube => "cube",
            OpForm::Pow4 => "pow4",
            OpForm::Pow5 => "pow5",
            OpForm::Inv => "inv",
            OpForm::InvSq => "invsq",
            OpForm::InvCube => "invcube",
            OpForm::Sqrt => "sqrt",
            OpForm::InvSqrt => "invsqrt",
            OpForm::Log => "log",
            OpForm::Exp => "exp",
            OpForm::Sin => "sin",
            OpForm::Cos => "cos",
            OpForm::Tan => "tan",
            OpForm::Tanh => "tanh",
            OpForm::Abs => "abs",
            OpForm::Sgn => "sgn",
            OpForm::Atan => "atan",
            OpForm::Asin => "asin",
            OpForm::Acos => "acos",
            OpForm::Atanh => "atanh",
            OpForm::Gaussian => "gaussian",
            OpForm::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<OpForm> {
        LIBRARY.iter().copied().find(|f| f.name() == name)
    }

    /// False for forms whose gradient is zero almost everywhere.
    pub fn differentiable(self) -> bool {
        !matches!(self, OpForm::Sgn | OpForm::Const | OpForm::Zero)
    }

    /// Forms that appear as named unary functions in expression text.
    /// The rest (constants, identity, integer and inverse powers, inverse
    /// square root) are represented structurally.
    pub fn is_prim(self) -> bool {
        matches!(
            self,
            OpForm::Sqrt
                | OpForm::Log
                | OpForm::Exp
                | OpForm::Sin
                | OpForm::Cos
                | OpForm::Tan
                | OpForm::Tanh
                | OpForm::Abs
                | OpForm::Sgn
                | OpForm::Atan
                | OpForm::Asin
                | OpForm::Acos
                | OpForm::Atanh
                | OpForm::Gaussian
        )
    }

    /// Plain IEEE evaluation, no domain guards.
    pub fn eval_raw(self, x: f64) -> f64 {
        match self {
            OpForm::Const => 1.0,
            OpForm::Id => x,
            OpForm::Sq => x * x,
            OpForm::Cube => x.powi(3),
            OpForm::Pow4 => x.powi(4),
            OpForm::Pow5 => x.powi(5),
            OpForm::Inv => x.powi(-1),
            OpForm::InvSq => x.powi(-2),
            OpForm::InvCube => x.powi(-3),
            OpForm::Sqrt => x.sqrt(),
            OpForm::InvSqrt => x.sqrt().powi(-1),
            OpForm::Log => x.ln(),
            OpForm::Exp => x.exp(),
            OpForm::Sin => x.sin(),
            OpForm::Cos => x.cos(),
            OpForm::Tan => x.tan(),
            OpForm::Tanh => x.tanh(),
            OpForm::Abs => x.abs(),
            OpForm::Sgn => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            OpForm::Atan => x.atan(),
            OpForm::Asin => x.asin(),
            OpForm::Acos => x.acos(),
            OpForm::Atanh => x.atanh(),
            OpForm::Gaussian => (-x * x).exp(),
            OpForm::Zero => 0.0,
        }
    }

    /// Guarded evaluation through an [`EvalCtx`]; limited domains clamp.
    pub fn eval<C: EvalCtx>(self, ctx: &mut C, x: C::V) -> C::V {
        match self {
            OpForm::Const => ctx.lit(1.0),
            OpForm::Id => x,
            OpForm::Sq => ctx.powi(x, 2),
            OpForm::Cube => ctx.powi(x, 3),
            OpForm::Pow4 => ctx.powi(x, 4),
            OpForm::Pow5 => ctx.powi(x, 5),
            OpForm::Inv => {
                let g = ctx.guard_away_zero(x);
                ctx.powi(g, -1)
            }
            OpForm::InvSq => {
                let g = ctx.guard_away_zero(x);
                ctx.powi(g, -2)
            }
            OpForm::InvCube => {
                let g = ctx.guard_away_zero(x);
                ctx.powi(g, -3)
            }
            OpForm::Sqrt => {
                let g = ctx.guard_min(x);
                ctx.sqrt(g)
            }
            OpForm::InvSqrt => {
                let g = ctx.guard_min(x);
                let s = ctx.sqrt(g);
                ctx.powi(s, -1)
            }
            OpForm::Log => {
                let g = ctx.guard_min(x);
                ctx.ln(g)
            }
            OpForm::Exp => ctx.exp(x),
            OpForm::Sin => ctx.sin(x),
            OpForm::Cos => ctx.cos(x),
            OpForm::Tan => ctx.tan(x),
            OpForm::Tanh => ctx.tanh(x),
            OpForm::Abs => ctx.abs(x),
            OpForm::Sgn => ctx.sign(x),
            OpForm::Atan => ctx.atan(x),
            OpForm::Asin => {
                let g = ctx.guard_unit(x);
                ctx.asin(g)
            }
            OpForm::Acos => {
                let g = ctx.guard_unit(x);
                ctx.acos(g)
            }
            OpForm::Atanh => {
                let g = ctx.guard_unit(x);
                ctx.atanh(g)
            }
            OpForm::Gaussian => ctx.gaussian(x),
            OpForm::Zero => ctx.lit(0.0),
        }
    }

    /// Guarded scalar evaluation.
    pub fn eval_guarded(self, x: f64) -> f64 {
        let mut ctx = F64Ctx::new(&[]);
        self.eval(&mut ctx, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl AffineParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        AffineParams { alpha: s[0], beta: s[1], gamma: s[2], delta: s[3] }
    }
}

/// Evaluate alpha * g(beta * x + gamma) + delta with the affine parameters at
/// `params[base..base+4]` (order alpha, beta, gamma, delta).
pub fn eval_symbolic_edge<C: EvalCtx>(ctx: &mut C, form: OpForm, base: usize, x: C::V) -> C::V {
    let alpha = ctx.param(base);
    let beta = ctx.param(base + 1);
    let gamma = ctx.param(base + 2);
    let delta = ctx.param(base + 3);
    let bx = ctx.mul(beta, x);
    let u = ctx.add(bx, gamma);
    let g = form.eval(ctx, u);
    let ag = ctx.mul(alpha, g);
    ctx.add(ag, delta)
}

#[derive(Clone, Debug)]
pub struct LocalFit {
    pub form: OpForm,
    pub params: AffineParams,
    pub mse: f64,
}

fn local_mse(form: OpForm, p: &AffineParams, xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let pred = p.alpha * form.eval_guarded(p.beta * x + p.gamma) + p.delta;
        acc += (pred - y) * (pred - y);
    }
    acc / xs.len() as f64
}

/// Closed-form least squares for (alpha, delta) given (beta, gamma).
fn solve_alpha_delta(form: OpForm, beta: f64, gamma: f64, xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (mut suu, mut su, mut suy, mut sy) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let u = form.eval_guarded(beta * x + gamma);
        suu += u * u;
        su += u;
        suy += u * y;
        sy += y;
    }
    let det = n * suu - su * su;
    if !det.is_finite() || det.abs() < 1e-12 * (1.0 + suu.abs()) * n {
        return (0.0, sy / n);
    }
    let alpha = (n * suy - su * sy) / det;
    let delta = (sy - alpha * su) / n;
    if alpha.is_finite() && delta.is_finite() {
        (alpha, delta)
    } else {
        (0.0, sy / n)
    }
}

/// Fit the affine wrapper of one form to a sampled curve: 8 seeded starts on
/// a sign/scale grid around a linear-regression warm start, (alpha, delta)
/// initialised in closed form, each start refined by `steps` Adam steps on
/// the local MSE.
pub fn fit_affine_local(
    xs: &[f64],
    ys: &[f64],
    form: OpForm,
    seed: u64,
    steps: usize,
) -> LocalFit {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
    }
    let slope = if sxx > 1e-12 { sxy / sxx } else { 1.0 };
    let x_mid = x_mean;

    let mut rng = seeding::stream(seed, &[seeding::tag("local-fit"), form.id() as u64]);
    let mut starts: Vec<(f64, f64)> = vec![
        (1.0, 0.0),
        (-1.0, 0.0),
        (2.0, 0.0),
        (0.5, 0.0),
        (if slope.is_finite() && slope.abs() > 1e-6 { slope } else { 1.5 }, 0.0),
        (1.0, -x_mid),
        (-1.0, x_mid),
        (0.5, -0.5 * x_mid),
    ];
    for s in starts.iter_mut().skip(4) {
        let z: f64 = rng.sample(StandardNormal);
        s.1 += 0.05 * z;
    }

    let mut best: Option<(f64, AffineParams)> = None;
    let mut tape = Tape::new();
    for &(beta0, gamma0) in &starts {
        let (alpha0, delta0) = solve_alpha_delta(form, beta0, gamma0, xs, ys);
        let mut params = [alpha0, beta0, gamma0, delta0];
        let mut adam = Adam::new(1e-2, 4);
        for _ in 0..steps {
            tape.reset(&params);
            let mut acc = tape.lit(0.0);
            for (&x, &y) in xs.iter().zip(ys) {
                let xl = tape.lit(x);
                let pred = eval_symbolic_edge(&mut tape, form, 0, xl);
                let yl = tape.lit(y);
                let e = tape.sub(pred, yl);
                let sq = tape.powi(e, 2);
                acc = tape.add(acc, sq);
            }
            let loss = tape.affine(acc, 1.0 / n, 0.0);
            if !tape.value(loss).is_finite() {
                break;
            }
            tape.backward(loss);
            let grad = tape.grad().to_vec();
            adam.step(&mut params, &grad);
            if params.iter().any(|p| !p.is_finite()) {
                break;
            }
        }
        let p = AffineParams::from_slice(&params);
        let mse = if params.iter().all(|v| v.is_finite()) {
            local_mse(form, &p, xs, ys)
        } else {
            f64::INFINITY
        };
        let better = match &best {
            None => true,
            Some((bm, _)) => mse < *bm,
        };
        if better {
            best = Some((mse, p));
        }
    }
    let (mse, params) = best.expect("at least one start");
    let mse = if mse.is_finite() { mse } else { f64::INFINITY };
    LocalFit { form, params, mse }
}

/// Fit every library form to the curve and rank by local MSE (ties broken by
/// form id). The simplicity weight is fixed to zero: ranking is purely by
/// fit error.
pub fn rank_forms_locally(xs: &[f64], ys: &[f64], seed: u64, steps: usize) -> Vec<LocalFit> {
    let mut fits: Vec<LocalFit> =
        LIBRARY.iter().map(|&form| fit_affine_local(xs, ys, form, seed, steps)).collect();
    fits.sort_by(|a, b| {
        a.mse
            .partial_cmp(&b.mse)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.form.id().cmp(&b.form.id()))
    });
    fits
}

/// Uniform sampling grid of `n` points over `[lo, hi]` used for local fits.
pub fn fit_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Number of points in the per-edge local fit grid.
pub const FIT_GRID_POINTS: usize = 64;

/// Adam steps used by local fits and the final polishing stage.
pub const LOCAL_FIT_STEPS: usize = 200;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub id: usize,
    pub name: String,
}

/// The published id/name list for the operator library.
pub fn library_manifest() -> Vec<LibraryEntry> {
    LIBRARY
        .iter()
        .enumerate()
        .map(|(id, f)| LibraryEntry { id, name: f.name().to_string() })
        .collect()
}
