//! Expression trees for extracted formulas and dataset targets.
//!
//! Grammar (used by both the parser and the canonical serializer):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' int)?          int: optional sign + digits
//! atom   := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Identifiers are variables (default names `x1..xd`, or caller-provided
//! names), the constant `pi`, or unary function names from the operator
//! library (`sin`, `cos`, `tan`, `tanh`, `asin`, `acos`, `atan`, `atanh`,
//! `exp`, `log`, `sqrt`, `abs`, `sgn`, `gaussian`). Powers are integers only;
//! division parses to multiplication by an inverse power.
//!
//! Canonical form: children of `+` and `*` are sorted (constants first in
//! products, last in sums; other terms by smallest variable index, then
//! structure), constants print with 6 significant digits, and `a - b`
//! renders when the following term carries a negative leading constant.

use crate::oplib::{AffineParams, OpForm};
use std::cmp::Ordering;
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Prim(OpForm, Box<Expr>),
    Pow(Box<Expr>, i32),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    /// Placeholder for an edge that stayed numeric; serializes as `<label>`
    /// and does not parse back.
    Hole(String),
}

impl Expr {
    pub fn eval(&self, xs: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => xs.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Prim(f, a) => f.eval_raw(a.eval(xs)),
            Expr::Pow(a, n) => a.eval(xs).powi(*n),
            Expr::Add(ts) => ts.iter().map(|t| t.eval(xs)).sum(),
            Expr::Mul(ts) => ts.iter().map(|t| t.eval(xs)).product(),
            Expr::Hole(_) => f64::NAN,
        }
    }

    pub fn contains_hole(&self) -> bool {
        match self {
            Expr::Hole(_) => true,
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Prim(_, a) => a.contains_hole(),
            Expr::Pow(a, _) => a.contains_hole(),
            Expr::Add(ts) | Expr::Mul(ts) => ts.iter().any(Expr::contains_hole),
        }
    }

    /// Smallest variable index in the subtree, if any.
    pub fn min_var(&self) -> Option<usize> {
        match self {
            Expr::Var(i) => Some(*i),
            Expr::Const(_) | Expr::Hole(_) => None,
            Expr::Prim(_, a) => a.min_var(),
            Expr::Pow(a, _) => a.min_var(),
            Expr::Add(ts) | Expr::Mul(ts) => ts.iter().filter_map(Expr::min_var).min(),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Expr::Var(_) => 0,
            Expr::Prim(..) => 1,
            Expr::Pow(..) => 2,
            Expr::Mul(_) => 3,
            Expr::Add(_) => 4,
            Expr::Hole(_) => 5,
            Expr::Const(_) => 6,
        }
    }

    /// Total structural order used for canonical child ordering: smallest
    /// variable index first, then node kind, then fields.
    fn cmp_structural(&self, other: &Expr) -> Ordering {
        let mv = |e: &Expr| e.min_var().unwrap_or(usize::MAX);
        mv(self)
            .cmp(&mv(other))
            .then_with(|| self.rank().cmp(&other.rank()))
            .then_with(|| match (self, other) {
                (Expr::Const(a), Expr::Const(b)) => a.total_cmp(b),
                (Expr::Var(a), Expr::Var(b)) => a.cmp(b),
                (Expr::Prim(fa, a), Expr::Prim(fb, b)) => {
                    fa.id().cmp(&fb.id()).then_with(|| a.cmp_structural(b))
                }
                (Expr::Pow(a, na), Expr::Pow(b, nb)) => {
                    a.cmp_structural(b).then(na.cmp(nb))
                }
                (Expr::Add(a), Expr::Add(b)) | (Expr::Mul(a), Expr::Mul(b)) => {
                    for (x, y) in a.iter().zip(b.iter()) {
                        let c = x.cmp_structural(y);
                        if c != Ordering::Equal {
                            return c;
                        }
                    }
                    a.len().cmp(&b.len())
                }
                (Expr::Hole(a), Expr::Hole(b)) => a.cmp(b),
                _ => Ordering::Equal,
            })
    }

    /// Sort `+`/`*` children into canonical order, recursively, flattening
    /// nested sums and products. Constants go first in products and last in
    /// sums.
    pub fn canonical(&self) -> Expr {
        match self {
            Expr::Prim(f, a) => Expr::Prim(*f, Box::new(a.canonical())),
            Expr::Pow(a, n) => Expr::Pow(Box::new(a.canonical()), *n),
            Expr::Add(ts) => {
                let mut flat = Vec::new();
                for t in ts {
                    match t.canonical() {
                        Expr::Add(inner) => flat.extend(inner),
                        other => flat.push(other),
                    }
                }
                flat.sort_by(|a, b| {
                    let ka = matches!(a, Expr::Const(_)) as u8;
                    let kb = matches!(b, Expr::Const(_)) as u8;
                    ka.cmp(&kb).then_with(|| a.cmp_structural(b))
                });
                Expr::Add(flat)
            }
            Expr::Mul(ts) => {
                let mut flat = Vec::new();
                for t in ts {
                    match t.canonical() {
                        Expr::Mul(inner) => flat.extend(inner),
                        other => flat.push(other),
                    }
                }
                flat.sort_by(|a, b| {
                    let ka = !matches!(a, Expr::Const(_)) as u8;
                    let kb = !matches!(b, Expr::Const(_)) as u8;
                    ka.cmp(&kb).then_with(|| a.cmp_structural(b))
                });
                Expr::Mul(flat)
            }
            other => other.clone(),
        }
    }

    /// Value-preserving simplification: constant folding, zero and identity
    /// elimination, affine collapse, equal-factor grouping into integer
    /// powers, canonical ordering. Non-finite constant folds are left
    /// untouched.
    pub fn simplify(&self) -> Expr {
        let out = match self {
            Expr::Const(c) => Expr::Const(norm_zero(*c)),
            Expr::Var(i) => Expr::Var(*i),
            Expr::Hole(l) => Expr::Hole(l.clone()),
            Expr::Prim(f, a) => {
                let a = a.simplify();
                if let Expr::Const(c) = a {
                    let v = f.eval_raw(c);
                    if v.is_finite() {
                        return Expr::Const(norm_zero(v));
                    }
                }
                Expr::Prim(*f, Box::new(a))
            }
            Expr::Pow(a, n) => {
                let a = a.simplify();
                match (*n, a) {
                    (0, _) => Expr::Const(1.0),
                    (1, a) => a,
                    (n, Expr::Const(c)) => {
                        let v = c.powi(n);
                        if v.is_finite() {
                            Expr::Const(norm_zero(v))
                        } else {
                            Expr::Pow(Box::new(Expr::Const(c)), n)
                        }
                    }
                    (n, Expr::Pow(inner, m)) => {
                        let combined = i64::from(n) * i64::from(m);
                        if let Ok(c) = i32::try_from(combined) {
                            Expr::Pow(inner, c).simplify()
                        } else {
                            Expr::Pow(Box::new(Expr::Pow(inner, m)), n)
                        }
                    }
                    (n, a) => Expr::Pow(Box::new(a), n),
                }
            }
            Expr::Add(ts) => {
                let mut flat = Vec::new();
                for t in ts {
                    match t.simplify() {
                        Expr::Add(inner) => flat.extend(inner),
                        other => flat.push(other),
                    }
                }
                let mut csum = 0.0;
                let mut rest = Vec::new();
                for t in flat {
                    match t {
                        Expr::Const(c) => csum += c,
                        other => rest.push(other),
                    }
                }
                if csum != 0.0 || rest.is_empty() {
                    rest.push(Expr::Const(norm_zero(csum)));
                }
                if rest.len() == 1 {
                    rest.pop().unwrap()
                } else {
                    Expr::Add(rest)
                }
            }
            Expr::Mul(ts) => {
                let mut flat = Vec::new();
                for t in ts {
                    match t.simplify() {
                        Expr::Mul(inner) => flat.extend(inner),
                        other => flat.push(other),
                    }
                }
                let mut cprod = 1.0;
                let mut rest: Vec<Expr> = Vec::new();
                for t in flat {
                    match t {
                        Expr::Const(c) => cprod *= c,
                        other => rest.push(other),
                    }
                }
                if cprod == 0.0 {
                    return Expr::Const(0.0);
                }
                // Group structurally equal bases into integer powers.
                let mut bases: Vec<(Expr, i64)> = Vec::new();
                for f in rest {
                    let (base, e) = match f {
                        Expr::Pow(b, n) => (*b, i64::from(n)),
                        other => (other, 1),
                    };
                    if let Some(slot) = bases.iter_mut().find(|(b, _)| *b == base) {
                        slot.1 += e;
                    } else {
                        bases.push((base, e));
                    }
                }
                let mut rest: Vec<Expr> = Vec::new();
                for (base, e) in bases {
                    match e {
                        0 => {}
                        1 => rest.push(base),
                        e => {
                            if let Ok(e32) = i32::try_from(e) {
                                rest.push(Expr::Pow(Box::new(base), e32))
                            } else {
                                rest.push(base)
                            }
                        }
                    }
                }
                if rest.is_empty() {
                    return Expr::Const(norm_zero(cprod));
                }
                if cprod != 1.0 {
                    rest.push(Expr::Const(norm_zero(cprod)));
                }
                if rest.len() == 1 {
                    rest.pop().unwrap()
                } else {
                    Expr::Mul(rest)
                }
            }
        };
        out.canonical()
    }
}

fn norm_zero(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Format a constant with 6 significant digits; decimal notation in
/// mid-range, scientific otherwise, trailing zeros trimmed.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x < 0.0 {
        return format!("-{}", fmt_g6(-x));
    }
    let e = x.log10().floor() as i32;
    if (-4..6).contains(&e) {
        let frac = (5 - e).max(0) as usize;
        let s = format!("{x:.frac$}");
        trim_decimal(s)
    } else {
        let s = format!("{x:.5e}");
        // "1.23000e-7" -> trim mantissa zeros -> "1.23e-7"
        if let Some(epos) = s.find('e') {
            let (mant, exp) = s.split_at(epos);
            format!("{}{}", trim_decimal(mant.to_string()), exp)
        } else {
            s
        }
    }
}

fn trim_decimal(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

// ── Serialization ──────────────────────────────────────────────────────────

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_POW: u8 = 3;
const PREC_ATOM: u8 = 4;

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(_) => PREC_ADD,
        Expr::Mul(_) => PREC_MUL,
        Expr::Pow(..) => PREC_POW,
        Expr::Const(c) if *c < 0.0 => PREC_ADD,
        _ => PREC_ATOM,
    }
}

fn render(e: &Expr, out: &mut String) {
    match e {
        Expr::Const(c) => out.push_str(&fmt_g6(*c)),
        Expr::Var(i) => {
            out.push('x');
            out.push_str(&(i + 1).to_string());
        }
        Expr::Hole(l) => {
            out.push('<');
            out.push_str(l);
            out.push('>');
        }
        Expr::Prim(f, a) => {
            out.push_str(f.name());
            out.push('(');
            render(a, out);
            out.push(')');
        }
        Expr::Pow(a, n) => {
            render_wrapped(a, PREC_POW + 1, out);
            out.push('^');
            out.push_str(&n.to_string());
        }
        Expr::Mul(ts) => {
            // A leading -1 constant renders as a prefix minus.
            let (neg, rest) = match ts.split_first() {
                Some((Expr::Const(c), rest)) if *c == -1.0 && !rest.is_empty() => (true, rest),
                _ => (false, &ts[..]),
            };
            if neg {
                out.push('-');
            }
            for (i, t) in rest.iter().enumerate() {
                if i > 0 {
                    out.push('*');
                }
                let need = if i == 0 && !neg { PREC_MUL } else { PREC_MUL + 1 };
                render_wrapped(t, need, out);
            }
            if rest.is_empty() {
                out.push_str("-1");
            }
        }
        Expr::Add(ts) => {
            for (i, t) in ts.iter().enumerate() {
                let mut s = String::new();
                render_wrapped(t, PREC_ADD, &mut s);
                if i == 0 {
                    out.push_str(&s);
                } else if let Some(stripped) = s.strip_prefix('-') {
                    out.push_str(" - ");
                    out.push_str(stripped);
                } else {
                    out.push_str(" + ");
                    out.push_str(&s);
                }
            }
        }
    }
}

fn render_wrapped(e: &Expr, min_prec: u8, out: &mut String) {
    if prec(e) < min_prec {
        out.push('(');
        render(e, out);
        out.push(')');
    } else {
        render(e, out);
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        render(self, &mut s);
        f.write_str(&s)
    }
}

/// Canonical text for an expression (children sorted, 6-digit constants).
pub fn serialize(e: &Expr) -> String {
    e.canonical().to_string()
}

// ── Parsing ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at byte {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: Option<&'a [String]>,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.term()?];
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    terms.push(self.term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    let t = self.term()?;
                    terms.push(negate(t));
                }
                _ => break,
            }
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expr::Add(terms) })
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut factors = vec![self.factor()?];
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    factors.push(self.factor()?);
                }
                Some(b'/') => {
                    self.pos += 1;
                    let f = self.factor()?;
                    factors.push(match f {
                        Expr::Pow(b, n) if n != i32::MIN => Expr::Pow(b, -n),
                        other => Expr::Pow(Box::new(other), -1),
                    });
                }
                _ => break,
            }
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Expr::Mul(factors) })
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            let f = self.factor()?;
            return Ok(negate(f));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let n = self.int_exponent()?;
            return Ok(Expr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn int_exponent(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let neg = if self.eat(b'-') {
            true
        } else {
            let _ = self.eat(b'+');
            false
        };
        self.skip_ws();
        let dstart = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == dstart {
            self.pos = start;
            return self.err("expected integer exponent after '^'");
        }
        if self.src.get(self.pos) == Some(&b'.') {
            return self.err("exponent must be an integer");
        }
        let text = std::str::from_utf8(&self.src[dstart..self.pos]).unwrap();
        let v: i64 = text.parse().map_err(|_| ParseError {
            pos: dstart,
            msg: "exponent out of range".into(),
        })?;
        let v = if neg { -v } else { v };
        i32::try_from(v).map_err(|_| ParseError { pos: dstart, msg: "exponent out of range".into() })
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return self.err("expected ')'");
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(c) => self.err(format!("unexpected character '{}'", c as char)),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            let dstart = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == dstart {
                // Not an exponent after all (e.g. `2*exp(x1)` split oddly);
                // numbers and identifiers cannot actually collide here, so
                // treat as malformed.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match text.parse::<f64>() {
            Ok(v) => Ok(Expr::Const(v)),
            Err(_) => Err(ParseError { pos: start, msg: format!("invalid number '{text}'") }),
        }
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        if self.peek() == Some(b'(') {
            let form = OpForm::from_name(&name).filter(|f| f.is_prim());
            let Some(form) = form else {
                self.pos = start;
                return self.err(format!("unknown function '{name}'"));
            };
            self.pos += 1;
            let arg = self.expr()?;
            if !self.eat(b')') {
                return self.err("expected ')'");
            }
            return Ok(Expr::Prim(form, Box::new(arg)));
        }
        if let Some(vars) = self.vars {
            if let Some(i) = vars.iter().position(|v| v == &name) {
                return Ok(Expr::Var(i));
            }
        } else if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(i) = rest.parse::<usize>() {
                    if i >= 1 {
                        return Ok(Expr::Var(i - 1));
                    }
                }
            }
        }
        if name == "pi" {
            return Ok(Expr::Const(std::f64::consts::PI));
        }
        self.pos = start;
        self.err(format!("unknown identifier '{name}'"))
    }
}

fn negate(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(norm_zero(-c)),
        Expr::Mul(mut ts) => {
            ts.insert(0, Expr::Const(-1.0));
            Expr::Mul(ts)
        }
        other => Expr::Mul(vec![Expr::Const(-1.0), other]),
    }
}

fn parse_inner(text: &str, vars: Option<&[String]>) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, vars };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

/// Parse with default variable names `x1..xd`.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    parse_inner(text, None)
}

/// Parse with caller-provided variable names; variable i maps to input
/// column i.
pub fn parse_with_vars(text: &str, vars: &[String]) -> Result<Expr, ParseError> {
    parse_inner(text, Some(vars))
}

/// Expression for alpha * g(beta * inner + gamma) + delta.
pub fn symbolic_edge_expr(form: OpForm, p: &AffineParams, inner: Expr) -> Expr {
    let u = Expr::Add(vec![
        Expr::Mul(vec![Expr::Const(p.beta), inner]),
        Expr::Const(p.gamma),
    ]);
    let g = match form {
        OpForm::Const => Expr::Const(1.0),
        OpForm::Zero => Expr::Const(0.0),
        OpForm::Id => u,
        OpForm::Sq => Expr::Pow(Box::new(u), 2),
        OpForm::Cube => Expr::Pow(Box::new(u), 3),
        OpForm::Pow4 => Expr::Pow(Box::new(u), 4),
        OpForm::Pow5 => Expr::Pow(Box::new(u), 5),
        OpForm::Inv => Expr::Pow(Box::new(u), -1),
        OpForm::InvSq => Expr::Pow(Box::new(u), -2),
        OpForm::InvCube => Expr::Pow(Box::new(u), -3),
        OpForm::InvSqrt => Expr::Pow(Box::new(Expr::Prim(OpForm::Sqrt, Box::new(u))), -1),
        prim => Expr::Prim(prim, Box::new(u)),
    };
    Expr::Add(vec![Expr::Mul(vec![Expr::Const(p.alpha), g]), Expr::Const(p.delta)])
}
