//! Symbolic distillation: each shape function becomes `c1 * f(a * x + b) + c2`
//! for a primitive `f`, and the per-class sums are rendered as plain text.
//!
//! Text syntax, one expression per class (`l_<p> = ...` lines when there are
//! more than two classes):
//!
//! ```text
//! 0.52 * DiffWalk + 1.15 * sin(0.79 * Age + 0.6) - 4.28
//! ```
//!
//! Feature names that are not plain identifiers, or that collide with a
//! primitive name, are written in brackets: `[glyburide-metformin]`.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kaam::Kaam;
use crate::kan::softmax;
use crate::spline::sigmoid;

/// Terms fitted below this R² are kept as tabulated splines.
pub const FIDELITY_R2: f64 = 0.9;
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.01;
/// Points sampled per shape function.
pub const SAMPLE_POINTS: usize = 256;
pub const MIN_FIT_SAMPLES: usize = 10;
/// A later primitive must beat the current best R² by this much to win.
const R2_TIE: f64 = 1e-6;
const GRID: usize = 41;
const REFINEMENTS: usize = 2;
/// Fits only use arguments within these windows so that exp terms stay
/// moderate and reciprocal/log terms stay away from their poles.
const EXP_WINDOW: f64 = 20.0;
const POLE_GAP: f64 = 1e-2;
const TAN_LIMIT: f64 = 1.5;
/// Evaluation clamps.
const EVAL_EXP_LIMIT: f64 = 700.0;
const EVAL_POLE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Identity,
    Square,
    Cube,
    Fourth,
    Reciprocal,
    Sqrt,
    Exp,
    NegExp,
    Log,
    Abs,
    Sin,
    Cos,
    Tan,
    Tanh,
    Sigmoid,
}

impl Primitive {
    /// The default library, in tie-breaking order.
    pub const ALL: [Primitive; 15] = [
        Primitive::Identity,
        Primitive::Square,
        Primitive::Cube,
        Primitive::Fourth,
        Primitive::Reciprocal,
        Primitive::Sqrt,
        Primitive::Exp,
        Primitive::NegExp,
        Primitive::Log,
        Primitive::Abs,
        Primitive::Sin,
        Primitive::Cos,
        Primitive::Tan,
        Primitive::Tanh,
        Primitive::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Identity => "identity",
            Primitive::Square => "square",
            Primitive::Cube => "cube",
            Primitive::Fourth => "fourth",
            Primitive::Reciprocal => "reciprocal",
            Primitive::Sqrt => "sqrt",
            Primitive::Exp => "exp",
            Primitive::NegExp => "negexp",
            Primitive::Log => "log",
            Primitive::Abs => "abs",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Tan => "tan",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
        }
    }

    /// `f(u)` with no domain handling.
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Primitive::Identity => u,
            Primitive::Square => u * u,
            Primitive::Cube => u * u * u,
            Primitive::Fourth => (u * u) * (u * u),
            Primitive::Reciprocal => 1.0 / u,
            Primitive::Sqrt => u.sqrt(),
            Primitive::Exp => u.exp(),
            Primitive::NegExp => (-u).exp(),
            Primitive::Log => u.ln(),
            Primitive::Abs => u.abs(),
            Primitive::Sin => u.sin(),
            Primitive::Cos => u.cos(),
            Primitive::Tan => u.tan(),
            Primitive::Tanh => u.tanh(),
            Primitive::Sigmoid => sigmoid(u),
        }
    }

    /// Whether every argument in `[lo, hi]` is admissible for fitting.
    pub fn admits_fit(self, lo: f64, hi: f64) -> bool {
        match self {
            Primitive::Reciprocal => lo >= POLE_GAP || hi <= -POLE_GAP,
            Primitive::Sqrt => lo >= 0.0,
            Primitive::Log => lo >= POLE_GAP,
            Primitive::Exp | Primitive::NegExp => lo >= -EXP_WINDOW && hi <= EXP_WINDOW,
            Primitive::Tan => lo >= -TAN_LIMIT && hi <= TAN_LIMIT,
            _ => true,
        }
    }

    /// Moves `u` into the evaluation domain; the flag reports a change.
    pub fn clamp_argument(self, u: f64) -> (f64, bool) {
        let clamped = match self {
            Primitive::Reciprocal if u.abs() < EVAL_POLE_GAP => {
                if u < 0.0 {
                    -EVAL_POLE_GAP
                } else {
                    EVAL_POLE_GAP
                }
            }
            Primitive::Sqrt if u < 0.0 => 0.0,
            Primitive::Log if u < EVAL_POLE_GAP => EVAL_POLE_GAP,
            Primitive::Exp if u > EVAL_EXP_LIMIT => EVAL_EXP_LIMIT,
            Primitive::NegExp if u < -EVAL_EXP_LIMIT => -EVAL_EXP_LIMIT,
            Primitive::Tan if u.abs() > TAN_LIMIT => TAN_LIMIT.copysign(u),
            _ => u,
        };
        (clamped, clamped != u)
    }

    fn from_call_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.call_name() == Some(name))
    }

    /// Name used in `name(...)` call syntax, if the primitive renders that way.
    fn call_name(self) -> Option<&'static str> {
        match self {
            Primitive::Sqrt
            | Primitive::Exp
            | Primitive::Log
            | Primitive::Abs
            | Primitive::Sin
            | Primitive::Cos
            | Primitive::Tan
            | Primitive::Tanh
            | Primitive::Sigmoid => Some(self.name()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymbolicFit {
    pub primitive: Primitive,
    pub a: f64,
    pub b: f64,
    pub c1: f64,
    pub c2: f64,
    pub r2: f64,
}

impl SymbolicFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.c1 * self.primitive.apply(self.a * x + self.b) + self.c2
    }

    fn constant(value: f64) -> Self {
        SymbolicFit { primitive: Primitive::Identity, a: 1.0, b: 0.0, c1: 0.0, c2: value, r2: 1.0 }
    }
}

struct Moments {
    n: f64,
    mean_y: f64,
    ss_y: f64,
}

/// Least-squares `(c1, c2, r2)` of `y ~ c1 * f + c2` for the given `f` values.
fn affine_fit(f: &[f64], y: &[f64], m: &Moments) -> Option<(f64, f64, f64)> {
    let mean_f = f.iter().sum::<f64>() / m.n;
    let mut sff = 0.0;
    let mut sfy = 0.0;
    for (fi, yi) in f.iter().zip(y) {
        let d = fi - mean_f;
        sff += d * d;
        sfy += d * (yi - m.mean_y);
    }
    if !(sff.is_finite() && sfy.is_finite()) || sff <= 1e-24 * m.n * (1.0 + mean_f * mean_f) {
        return None;
    }
    let c1 = sfy / sff;
    let c2 = m.mean_y - c1 * mean_f;
    let r2 = ((sfy * sfy) / (sff * m.ss_y)).clamp(0.0, 1.0);
    (c1.is_finite() && c2.is_finite()).then_some((c1, c2, r2))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn coarse_a_grid() -> Vec<f64> {
    let mags: Vec<f64> = (0..GRID).map(|i| 10f64.powf(-2.0 + 3.0 * i as f64 / (GRID - 1) as f64)).collect();
    let mut out: Vec<f64> = mags.iter().rev().map(|m| -m).collect();
    out.extend(mags);
    out
}

struct Cell {
    a: f64,
    b: f64,
    c1: f64,
    c2: f64,
    r2: f64,
}

/// Best cell over the product of `a_values` and per-`a` b grids.
fn scan(
    prim: Primitive,
    xs: &[f64],
    ys: &[f64],
    m: &Moments,
    a_values: &[f64],
    b_grid: impl Fn(f64) -> Vec<f64>,
    buf: &mut Vec<f64>,
) -> Option<Cell> {
    let (lo, hi) = (xs[0].min(xs[xs.len() - 1]), xs[0].max(xs[xs.len() - 1]));
    let mut best: Option<Cell> = None;
    for &a in a_values {
        if a == 0.0 {
            continue;
        }
        for b in b_grid(a) {
            let (u0, u1) = (a * lo + b, a * hi + b);
            if !prim.admits_fit(u0.min(u1), u0.max(u1)) {
                continue;
            }
            buf.clear();
            buf.extend(xs.iter().map(|&x| prim.apply(a * x + b)));
            if let Some((c1, c2, r2)) = affine_fit(buf, ys, m) {
                if best.as_ref().is_none_or(|c| r2 > c.r2) {
                    best = Some(Cell { a, b, c1, c2, r2 });
                }
            }
        }
    }
    best
}

fn fit_primitive(prim: Primitive, xs: &[f64], ys: &[f64], m: &Moments) -> Option<SymbolicFit> {
    if prim == Primitive::Identity {
        let (c1, c2, r2) = affine_fit(xs, ys, m)?;
        return Some(SymbolicFit { primitive: prim, a: 1.0, b: 0.0, c1, c2, r2 });
    }
    let range = xs.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let mut buf = Vec::with_capacity(xs.len());
    let a_grid = coarse_a_grid();
    let mut best = scan(
        prim,
        xs,
        ys,
        m,
        &a_grid,
        |a| {
            let span = a.abs() * range + std::f64::consts::PI;
            linspace(-span, span, GRID)
        },
        &mut buf,
    )?;
    // Cell half-widths of the coarse grid around the winner.
    let idx = a_grid.iter().position(|&a| a == best.a).unwrap_or(0);
    let mut da = [idx.checked_sub(1), Some(idx + 1)]
        .into_iter()
        .flatten()
        .filter_map(|i| a_grid.get(i))
        .map(|n| (n - best.a).abs())
        .fold(0.0f64, f64::max);
    let mut db = 2.0 * (best.a.abs() * range + std::f64::consts::PI) / (GRID - 1) as f64;
    for _ in 0..REFINEMENTS {
        let (ca, cb) = (best.a, best.b);
        let a_values = linspace(ca - da, ca + da, GRID);
        if let Some(cell) = scan(prim, xs, ys, m, &a_values, |_| linspace(cb - db, cb + db, GRID), &mut buf) {
            if cell.r2 >= best.r2 {
                best = cell;
            }
        }
        da = 2.0 * da / (GRID - 1) as f64;
        db = 2.0 * db / (GRID - 1) as f64;
    }
    Some(SymbolicFit { primitive: prim, a: best.a, b: best.b, c1: best.c1, c2: best.c2, r2: best.r2 })
}

/// Best `c1 * f(a * x + b) + c2` over `library` by R². Samples with no
/// variance in `y` give the constant term `c1 = 0`. The identity term is
/// reported as `a = 1, b = 0`.
pub fn fit_symbolic(xs: &[f64], ys: &[f64], library: &[Primitive]) -> Result<SymbolicFit> {
    if xs.len() != ys.len() {
        return Err(Error::shape(xs.len(), ys.len()));
    }
    if xs.len() < MIN_FIT_SAMPLES {
        return Err(Error::InvalidInput(format!("{} samples; at least {MIN_FIT_SAMPLES} required", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("samples must be finite".into()));
    }
    let n = ys.len() as f64;
    let mean_y = ys.iter().sum::<f64>() / n;
    let ss_y: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    if ss_y <= 1e-24 * n * (1.0 + mean_y * mean_y) {
        return Ok(SymbolicFit::constant(mean_y));
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let xs: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    if xs[0] == xs[xs.len() - 1] {
        return Ok(SymbolicFit::constant(mean_y));
    }
    let m = Moments { n, mean_y, ss_y };
    let fits: Vec<Option<SymbolicFit>> = library.par_iter().map(|&p| fit_primitive(p, &xs, &ys, &m)).collect();
    let mut best: Option<SymbolicFit> = None;
    for fit in fits.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| fit.r2 > b.r2 + R2_TIE) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::InvalidInput("no primitive admits the sample range".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TermShape {
    Primitive {
        primitive: Primitive,
        a: f64,
        b: f64,
    },
    /// Piecewise-linear table of a shape function the library could not fit;
    /// flat beyond the ends.
    Tabulated {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicTerm {
    pub feature: usize,
    pub shape: TermShape,
    pub c1: f64,
    pub c2: f64,
    /// R² on the sampling grid; absent for terms read back from text.
    pub fit_r2: Option<f64>,
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + t * (ys[i + 1] - ys[i])
}

impl SymbolicTerm {
    /// Term value and whether a primitive argument had to be clamped.
    pub fn eval(&self, x: f64) -> (f64, bool) {
        match &self.shape {
            TermShape::Primitive { primitive, a, b } => {
                let (u, clamped) = primitive.clamp_argument(a * x + b);
                (self.c1 * primitive.apply(u) + self.c2, clamped)
            }
            TermShape::Tabulated { xs, ys } => (self.c1 * interpolate(xs, ys, x) + self.c2, false),
        }
    }

    pub fn is_tabulated(&self) -> bool {
        matches!(self.shape, TermShape::Tabulated { .. })
    }

    fn rounded(&self, decimals: u32) -> Self {
        let r = |v: f64| round_half_even(v, decimals);
        let shape = match &self.shape {
            TermShape::Primitive { primitive, a, b } => {
                TermShape::Primitive { primitive: *primitive, a: r(*a), b: r(*b) }
            }
            TermShape::Tabulated { xs, ys } => {
                TermShape::Tabulated { xs: xs.iter().map(|v| r(*v)).collect(), ys: ys.iter().map(|v| r(*v)).collect() }
            }
        };
        SymbolicTerm { feature: self.feature, shape, c1: r(self.c1), c2: r(self.c2), fit_r2: self.fit_r2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFormula {
    pub constant: f64,
    pub terms: Vec<SymbolicTerm>,
}

impl ClassFormula {
    pub fn eval(&self, x: &[f64]) -> (f64, bool) {
        let mut clamped = false;
        let mut total = self.constant;
        for t in &self.terms {
            let (v, c) = t.eval(x[t.feature]);
            total += v;
            clamped |= c;
        }
        (total, clamped)
    }
}

/// Per-class closed-form logits. Binary models carry a single formula for
/// the logit difference `l = l^1 - l^0`, with `P(y = 1) = sigmoid(l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicFormula {
    pub feature_names: Vec<String>,
    pub class_labels: Vec<String>,
    pub classes: Vec<ClassFormula>,
    pub decimals: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaEvaluation {
    /// One entry for binary formulas, otherwise one per class.
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub clamped: bool,
}

impl SymbolicFormula {
    pub fn is_binary(&self) -> bool {
        self.class_labels.len() == 2
    }

    pub fn validate(&self) -> Result<()> {
        let expected = if self.is_binary() { 1 } else { self.class_labels.len() };
        if self.classes.len() != expected {
            return Err(Error::shape(expected, self.classes.len()));
        }
        for t in self.classes.iter().flat_map(|c| &c.terms) {
            if t.feature >= self.feature_names.len() {
                return Err(Error::Index { what: "features", index: t.feature, len: self.feature_names.len() });
            }
            if let TermShape::Tabulated { xs, ys } = &t.shape {
                if xs.is_empty() || xs.len() != ys.len() || xs.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidModel("tabulated term needs increasing knots".into()));
                }
            }
        }
        Ok(())
    }

    pub fn tabulated_terms(&self) -> usize {
        self.classes.iter().flat_map(|c| &c.terms).filter(|t| t.is_tabulated()).count()
    }

    pub fn term_count(&self) -> usize {
        self.classes.iter().map(|c| c.terms.len()).sum()
    }

    pub fn eval(&self, x: &[f64]) -> Result<FormulaEvaluation> {
        if x.len() != self.feature_names.len() {
            return Err(Error::shape(self.feature_names.len(), x.len()));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("input {bad} is not finite")));
        }
        let mut clamped = false;
        let logits: Vec<f64> = self
            .classes
            .iter()
            .map(|c| {
                let (v, cl) = c.eval(x);
                clamped |= cl;
                v
            })
            .collect();
        let probabilities = if self.is_binary() {
            let p = sigmoid(logits[0]);
            vec![1.0 - p, p]
        } else {
            softmax(&logits)
        };
        Ok(FormulaEvaluation { logits, probabilities, clamped })
    }

    /// Every coefficient rounded half-to-even to `decimals` places.
    pub fn rounded(&self, decimals: u32) -> Self {
        SymbolicFormula {
            feature_names: self.feature_names.clone(),
            class_labels: self.class_labels.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassFormula {
                    constant: round_half_even(c.constant, decimals),
                    terms: c.terms.iter().map(|t| t.rounded(decimals)).collect(),
                })
                .collect(),
            decimals: Some(self.decimals.map_or(decimals, |d| d.min(decimals))),
        }
    }

    pub fn render(&self) -> String {
        if self.is_binary() {
            return render_class(&self.classes[0], &self.feature_names);
        }
        let mut out = String::new();
        for (p, c) in self.classes.iter().enumerate() {
            let _ = writeln!(out, "l_{p} = {}", render_class(c, &self.feature_names));
        }
        out.pop();
        out
    }

    /// Reads text produced by [`SymbolicFormula::render`] (or written by hand
    /// in the same syntax).
    pub fn parse(text: &str, feature_names: Vec<String>, class_labels: Vec<String>) -> Result<Self> {
        let binary = class_labels.len() == 2;
        let mut classes = Vec::new();
        let mut offset = 0;
        if binary {
            let body = text.trim();
            let body = body.strip_prefix("l =").map(str::trim).unwrap_or(body);
            let start = text.find(body).unwrap_or(0);
            classes.push(Parser::new(body, start, &feature_names).expression()?);
        } else {
            for line in text.split('\n') {
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    offset += line.len() + 1;
                    continue;
                }
                let (head, body) = trimmed
                    .split_once('=')
                    .ok_or(Error::FormulaParse { pos: offset, msg: "expected `l_<class> = ...`".into() })?;
                let expected = format!("l_{}", classes.len());
                if head.trim() != expected {
                    return Err(Error::FormulaParse { pos: offset, msg: format!("expected `{expected}`") });
                }
                let start = offset + line.find(body).unwrap_or(0);
                classes.push(Parser::new(body, start, &feature_names).expression()?);
                offset += line.len() + 1;
            }
        }
        let f = SymbolicFormula { feature_names, class_labels, classes, decimals: None };
        f.validate()?;
        Ok(f)
    }
}

/// `round(v * 10^d) / 10^d` with ties to even; values too large to scale
/// exactly are returned unchanged.
pub fn round_half_even(v: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let s = v * scale;
    if !s.is_finite() || s.abs() >= 2f64.powi(52) {
        return v;
    }
    let r = s.round_ties_even() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn num(v: f64) -> String {
    if v == 0.0 {
        "0".to_owned()
    } else {
        format!("{v}")
    }
}

fn is_reserved(name: &str) -> bool {
    name == "table" || Primitive::ALL.iter().any(|p| p.call_name() == Some(name))
}

pub fn render_feature(name: &str) -> String {
    let mut chars = name.chars();
    let plain = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !is_reserved(name);
    if plain {
        name.to_owned()
    } else {
        let mut out = String::from("[");
        for c in name.chars() {
            if c == ']' || c == '\\' {
                out.push('\\');
            }
            out.push(c);
        }
        out.push(']');
        out
    }
}

fn render_affine(a: f64, b: f64, feature: &str) -> String {
    let mut s = if a == 1.0 {
        feature.to_owned()
    } else if a == -1.0 {
        format!("-{feature}")
    } else {
        format!("{} * {feature}", num(a))
    };
    if b > 0.0 {
        let _ = write!(s, " + {}", num(b));
    } else if b < 0.0 {
        let _ = write!(s, " - {}", num(-b));
    }
    s
}

/// The term body without its outer coefficient, e.g. `sin(0.79 * Age + 0.6)`.
fn render_body(term: &SymbolicTerm, names: &[String]) -> (String, bool) {
    let feature = render_feature(&names[term.feature]);
    match &term.shape {
        TermShape::Tabulated { xs, ys } => {
            let pairs: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{}:{}", num(*x), num(*y))).collect();
            (format!("table({feature}; {})", pairs.join(" ")), false)
        }
        TermShape::Primitive { primitive, a, b } => {
            let inner = render_affine(*a, *b, &feature);
            let body = match primitive {
                Primitive::Identity if *a == 1.0 && *b == 0.0 => feature,
                Primitive::Identity => format!("({inner})"),
                Primitive::Square => format!("({inner})^2"),
                Primitive::Cube => format!("({inner})^3"),
                Primitive::Fourth => format!("({inner})^4"),
                Primitive::Reciprocal => return (format!("({inner})"), true),
                Primitive::NegExp => format!("exp(-({inner}))"),
                p => format!("{}({inner})", p.name()),
            };
            (body, false)
        }
    }
}

fn render_class(class: &ClassFormula, names: &[String]) -> String {
    let mut terms: Vec<&SymbolicTerm> = class.terms.iter().collect();
    terms.sort_by(|x, y| y.c1.abs().total_cmp(&x.c1.abs()));
    let mut out = String::new();
    let mut constant = class.constant + class.terms.iter().map(|t| t.c2).sum::<f64>();
    if constant == 0.0 {
        constant = 0.0;
    }
    let push = |out: &mut String, coef: f64, text: String| {
        if out.is_empty() {
            if coef < 0.0 {
                out.push('-');
            }
        } else {
            out.push_str(if coef < 0.0 { " - " } else { " + " });
        }
        out.push_str(&text);
    };
    for t in terms {
        let (body, divides) = render_body(t, names);
        let c = num(t.c1.abs());
        push(&mut out, t.c1, if divides { format!("{c} / {body}") } else { format!("{c} * {body}") });
    }
    if constant != 0.0 || out.is_empty() {
        push(&mut out, constant, num(constant.abs()));
    }
    out
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    base: usize,
    names: &'a [String],
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, base: usize, names: &'a [String]) -> Self {
        Parser { src, pos: 0, base, names }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::FormulaParse { pos: self.base + self.pos, msg: msg.into() })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.rest().chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.rest().chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let rest = self.rest();
        let mut end = 0;
        let bytes = rest.as_bytes();
        while end < bytes.len() {
            let c = bytes[end];
            let exp_sign = (c == b'-' || c == b'+') && end > 0 && matches!(bytes[end - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                end += 1;
            } else {
                break;
            }
        }
        if end == 0 {
            return self.err("expected a number");
        }
        match rest[..end].parse::<f64>() {
            Ok(v) => {
                self.pos += end;
                Ok(v)
            }
            Err(_) => self.err(format!("bad number `{}`", &rest[..end])),
        }
    }

    fn starts_number(&mut self) -> bool {
        matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.')
    }

    fn identifier(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|&(i, c)| !(c.is_ascii_alphanumeric() || c == '_') || (i == 0 && c.is_ascii_digit()))
            .map_or(rest.len(), |(i, _)| i);
        if end == 0 {
            return None;
        }
        self.pos += end;
        Some(&rest[..end])
    }

    fn feature(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        let name = if self.eat('[') {
            let mut name = String::new();
            let mut chars = self.rest().char_indices();
            loop {
                match chars.next() {
                    None => return self.err("unterminated `[`"),
                    Some((i, ']')) => {
                        self.pos += i + 1;
                        break;
                    }
                    Some((_, '\\')) => match chars.next() {
                        Some((_, c)) => name.push(c),
                        None => return self.err("dangling escape"),
                    },
                    Some((_, c)) => name.push(c),
                }
            }
            name
        } else {
            match self.identifier() {
                Some(id) => id.to_owned(),
                None => return self.err("expected a feature name"),
            }
        };
        match self.names.iter().position(|n| *n == name) {
            Some(j) => Ok(j),
            None => {
                self.pos = start;
                self.err(format!("unknown feature `{name}`"))
            }
        }
    }

    /// `[-][a *] feature [(+|-) b]` or `b (+|-) [a *] feature`.
    fn affine(&mut self) -> Result<(f64, f64, usize)> {
        let lead_neg = self.eat('-');
        if self.starts_number() {
            let v = self.number()?;
            if self.eat('*') {
                let a = if lead_neg { -v } else { v };
                let j = self.feature()?;
                let b = self.affine_tail()?;
                return Ok((a, b, j));
            }
            let b = if lead_neg { -v } else { v };
            let sign = if self.eat('+') {
                1.0
            } else if self.eat('-') {
                -1.0
            } else {
                return self.err("expected `+` or `-` after the offset");
            };
            let a = if self.starts_number() {
                let v = self.number()?;
                self.expect('*')?;
                v
            } else {
                1.0
            };
            let j = self.feature()?;
            return Ok((sign * a, b, j));
        }
        let j = self.feature()?;
        let b = self.affine_tail()?;
        Ok((if lead_neg { -1.0 } else { 1.0 }, b, j))
    }

    fn affine_tail(&mut self) -> Result<f64> {
        if self.eat('+') {
            self.number()
        } else if self.eat('-') {
            Ok(-self.number()?)
        } else {
            Ok(0.0)
        }
    }

    fn primitive_term(&mut self, c1: f64, primitive: Primitive, a: f64, b: f64, feature: usize) -> SymbolicTerm {
        SymbolicTerm { feature, shape: TermShape::Primitive { primitive, a, b }, c1, c2: 0.0, fit_r2: None }
    }

    fn table(&mut self, c1: f64) -> Result<SymbolicTerm> {
        self.expect('(')?;
        let feature = self.feature()?;
        self.expect(';')?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        while !self.eat(')') {
            let sx = if self.eat('-') { -1.0 } else { 1.0 };
            xs.push(sx * self.number()?);
            self.expect(':')?;
            let sy = if self.eat('-') { -1.0 } else { 1.0 };
            ys.push(sy * self.number()?);
        }
        Ok(SymbolicTerm { feature, shape: TermShape::Tabulated { xs, ys }, c1, c2: 0.0, fit_r2: None })
    }

    /// A term after its coefficient and `*`.
    fn body(&mut self, c1: f64) -> Result<SymbolicTerm> {
        if self.eat('(') {
            let (a, b, j) = self.affine()?;
            self.expect(')')?;
            let prim = if self.eat('^') {
                match self.number()? {
                    2.0 => Primitive::Square,
                    3.0 => Primitive::Cube,
                    4.0 => Primitive::Fourth,
                    _ => return self.err("only powers 2, 3 and 4 are supported"),
                }
            } else {
                Primitive::Identity
            };
            return Ok(self.primitive_term(c1, prim, a, b, j));
        }
        if self.peek() == Some('[') {
            let j = self.feature()?;
            return Ok(self.primitive_term(c1, Primitive::Identity, 1.0, 0.0, j));
        }
        let save = self.pos;
        let Some(id) = self.identifier() else {
            return self.err("expected a term");
        };
        if self.peek() == Some('(') {
            if id == "table" {
                return self.table(c1);
            }
            let Some(prim) = Primitive::from_call_name(id) else {
                return self.err(format!("unknown function `{id}`"));
            };
            self.expect('(')?;
            if prim == Primitive::Exp && self.peek() == Some('-') {
                let save_neg = self.pos;
                self.pos += 1;
                if self.eat('(') {
                    let (a, b, j) = self.affine()?;
                    self.expect(')')?;
                    self.expect(')')?;
                    return Ok(self.primitive_term(c1, Primitive::NegExp, a, b, j));
                }
                self.pos = save_neg;
            }
            let (a, b, j) = self.affine()?;
            self.expect(')')?;
            return Ok(self.primitive_term(c1, prim, a, b, j));
        }
        self.pos = save;
        let j = self.feature()?;
        Ok(self.primitive_term(c1, Primitive::Identity, 1.0, 0.0, j))
    }

    fn expression(&mut self) -> Result<ClassFormula> {
        let mut constant = 0.0;
        let mut terms = Vec::new();
        let mut first = true;
        loop {
            let sign = if first {
                if self.eat('-') {
                    -1.0
                } else {
                    1.0
                }
            } else if self.eat('+') {
                1.0
            } else if self.eat('-') {
                -1.0
            } else if self.peek().is_none() {
                break;
            } else {
                return self.err("expected `+` or `-`");
            };
            first = false;
            let c = sign * self.number()?;
            if self.eat('*') {
                terms.push(self.body(c)?);
            } else if self.eat('/') {
                self.expect('(')?;
                let (a, b, j) = self.affine()?;
                self.expect(')')?;
                terms.push(self.primitive_term(c, Primitive::Reciprocal, a, b, j));
            } else {
                constant += c;
            }
        }
        if first {
            return self.err("empty formula");
        }
        Ok(ClassFormula { constant, terms })
    }
}

/// Distillation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub prune_threshold: f64,
    pub library: Vec<Primitive>,
    pub sample_points: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            library: Primitive::ALL.to_vec(),
            sample_points: SAMPLE_POINTS,
        }
    }
}

fn variance(col: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    (mean, col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Closed-form logits for a trained KAAM. Features whose logit column
/// varies less than `prune_threshold` times the largest column variance are
/// dropped and their mean contribution moves into the constant. Features
/// with two observed values get the exact line through both points; other
/// shapes are sampled on their observed range and fitted, falling back to a
/// table when R² stays below [`FIDELITY_R2`].
pub fn distill(model: &Kaam, x_train: ArrayView2<'_, f64>, config: &DistillConfig) -> Result<SymbolicFormula> {
    if x_train.nrows() == 0 {
        return Err(Error::InvalidInput("distillation needs training rows".into()));
    }
    if !(config.prune_threshold >= 0.0) {
        return Err(Error::InvalidInput("prune threshold must be non-negative".into()));
    }
    if config.sample_points < MIN_FIT_SAMPLES {
        return Err(Error::InvalidInput(format!("at least {MIN_FIT_SAMPLES} sample points required")));
    }
    let m = model.feature_names().len();
    let binary = model.is_binary();
    let outputs: Vec<usize> = if binary { vec![1] } else { (0..model.class_labels().len()).collect() };
    let shape = |j: usize, p: usize, v: f64| {
        if binary {
            model.differential_contribution(j, v)
        } else {
            model.contribution(j, p, v)
        }
    };
    let mut classes = Vec::with_capacity(outputs.len());
    for &p in &outputs {
        let matrix = model.explanation_matrix(x_train, p, None)?;
        let values = matrix.values();
        let stats: Vec<(f64, f64)> = (0..m).map(|j| variance(values.column(j).into_iter().copied())).collect();
        let max_var = stats.iter().map(|s| s.1).fold(0.0, f64::max);
        let mut constant = values[[0, m]];
        let kept: Vec<usize> = (0..m)
            .filter(|&j| {
                let keep = max_var > 0.0 && stats[j].1 >= config.prune_threshold * max_var;
                if !keep {
                    constant += stats[j].0;
                }
                keep
            })
            .collect();
        let terms: Vec<SymbolicTerm> = kept
            .par_iter()
            .map(|&j| -> Result<SymbolicTerm> {
                let col = x_train.column(j);
                let mut distinct: Vec<f64> = col.to_vec();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup();
                if distinct.len() == 2 {
                    let (v0, v1) = (distinct[0], distinct[1]);
                    let (g0, g1) = (shape(j, p, v0), shape(j, p, v1));
                    let c1 = (g1 - g0) / (v1 - v0);
                    return Ok(SymbolicTerm {
                        feature: j,
                        shape: TermShape::Primitive { primitive: Primitive::Identity, a: 1.0, b: 0.0 },
                        c1,
                        c2: g0 - c1 * v0,
                        fit_r2: Some(1.0),
                    });
                }
                let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
                let xs = linspace(lo, hi, config.sample_points);
                let ys: Vec<f64> = xs.iter().map(|&v| shape(j, p, v)).collect();
                let fit = fit_symbolic(&xs, &ys, &config.library)?;
                if fit.r2 >= FIDELITY_R2 {
                    Ok(SymbolicTerm {
                        feature: j,
                        shape: TermShape::Primitive { primitive: fit.primitive, a: fit.a, b: fit.b },
                        c1: fit.c1,
                        c2: fit.c2,
                        fit_r2: Some(fit.r2),
                    })
                } else {
                    Ok(SymbolicTerm {
                        feature: j,
                        shape: TermShape::Tabulated { xs, ys },
                        c1: 1.0,
                        c2: 0.0,
                        fit_r2: Some(fit.r2),
                    })
                }
            })
            .collect::<Result<_>>()?;
        let mut class = ClassFormula { constant, terms };
        for t in &mut class.terms {
            class.constant += t.c2;
            t.c2 = 0.0;
        }
        classes.push(class);
    }
    Ok(SymbolicFormula {
        feature_names: model.feature_names().to_vec(),
        class_labels: model.class_labels().to_vec(),
        classes,
        decimals: None,
    })
}
