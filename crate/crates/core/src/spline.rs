//! Uniform B-spline bases and the learnable univariate function built on them.
//!
//! A basis of degree `k` over `G` intervals on `[lo, hi]` uses `G + 2k + 1`
//! uniformly spaced knots, `k` of which are padded past each boundary, giving
//! `G + k` basis functions that sum to one anywhere inside the domain. Inputs
//! are clamped to the domain before evaluation.
//!
//! A [`LearnableFunction`] combines a fixed residual activation with a spline:
//!
//! ```text
//! phi(x) = w_b * b(x) + w_s * sum_m c_m * B_m(clamp(x)),   b(x) = x * sigmoid(x)
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic sigmoid, written to stay finite for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Residual activation `b(x) = x * sigmoid(x)`.
pub fn base_activation(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn base_activation_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct BSplineBasis {
    degree: usize,
    interval_count: usize,
    domain_min: f64,
    domain_max: f64,
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    degree: usize,
    interval_count: usize,
    domain_min: f64,
    domain_max: f64,
    knots: Vec<f64>,
}

impl TryFrom<BasisRepr> for BSplineBasis {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        let basis = BSplineBasis::new(r.degree, r.interval_count, r.domain_min, r.domain_max)?;
        if basis.knots.len() != r.knots.len()
            || basis.knots.iter().zip(&r.knots).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::InvalidModel("stored knots disagree with the uniform grid".into()));
        }
        Ok(basis)
    }
}

impl From<BSplineBasis> for BasisRepr {
    fn from(b: BSplineBasis) -> Self {
        BasisRepr {
            degree: b.degree,
            interval_count: b.interval_count,
            domain_min: b.domain_min,
            domain_max: b.domain_max,
            knots: b.knots,
        }
    }
}

impl BSplineBasis {
    pub fn new(degree: usize, interval_count: usize, domain_min: f64, domain_max: f64) -> Result<Self> {
        if interval_count == 0 {
            return Err(Error::InvalidInput("interval count must be at least 1".into()));
        }
        if !domain_min.is_finite() || !domain_max.is_finite() || domain_min >= domain_max {
            return Err(Error::InvalidInput(format!(
                "spline domain [{domain_min}, {domain_max}] must be finite with min < max"
            )));
        }
        let h = (domain_max - domain_min) / interval_count as f64;
        let knots = (0..interval_count + 2 * degree + 1).map(|i| domain_min + (i as f64 - degree as f64) * h).collect();
        Ok(BSplineBasis { degree, interval_count, domain_min, domain_max, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interval_count(&self) -> usize {
        self.interval_count
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_min, self.domain_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn len(&self) -> usize {
        self.interval_count + self.degree
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.domain_min, self.domain_max)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.domain_min && x <= self.domain_max
    }

    /// Knot index `i` with `t_i <= x < t_{i+1}` for a clamped `x`; the right
    /// endpoint belongs to the last interval.
    fn span(&self, x: f64) -> usize {
        let h = (self.domain_max - self.domain_min) / self.interval_count as f64;
        let s = ((x - self.domain_min) / h).floor();
        let s = if s < 0.0 { 0 } else { (s as usize).min(self.interval_count - 1) };
        s + self.degree
    }

    /// Writes the `degree + 1` possibly-nonzero basis values at `x` (already
    /// clamped) into `out` and returns the index of the first one.
    pub(crate) fn eval_local(&self, x: f64, out: &mut [f64]) -> usize {
        let span = self.span(x);
        self.local_values(span, self.degree, x, out);
        span - self.degree
    }

    /// Triangular Cox-de Boor evaluation of the `degree + 1` functions of the
    /// given degree that are nonzero on knot span `span`.
    fn local_values(&self, span: usize, degree: usize, x: f64, out: &mut [f64]) {
        let t = &self.knots;
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        let mut left_v;
        let mut right_v;
        let (left, right): (&mut [f64], &mut [f64]) = if degree < 16 {
            (&mut left[..], &mut right[..])
        } else {
            left_v = vec![0.0; degree + 1];
            right_v = vec![0.0; degree + 1];
            (&mut left_v[..], &mut right_v[..])
        };
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Derivatives of the `degree + 1` local basis functions at a clamped `x`.
    /// Returns the index of the first one. Degree must be at least 1.
    pub(crate) fn derivative_local(&self, x: f64, out: &mut [f64]) -> usize {
        let k = self.degree;
        let span = self.span(x);
        // Degree k-1 functions nonzero on this span: indices span-k+1 ..= span.
        let mut lower = vec![0.0; k];
        self.local_values(span, k - 1, x, &mut lower);
        let t = &self.knots;
        let kf = k as f64;
        let first = span - k;
        for (r, o) in out.iter_mut().enumerate().take(k + 1) {
            let m = first + r;
            // B_{m,k-1} is lower[r-1] when r >= 1; B_{m+1,k-1} is lower[r] when r < k.
            let a = if r >= 1 { lower[r - 1] / (t[m + k] - t[m]) } else { 0.0 };
            let b = if r < k { lower[r] / (t[m + k + 1] - t[m + 1]) } else { 0.0 };
            *o = kf * (a - b);
        }
        first
    }

    /// All `G + k` basis values at `x`, with `x` clamped to the domain.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("basis input {x} is not finite")));
        }
        let mut local = vec![0.0; self.degree + 1];
        let first = self.eval_local(self.clamp(x), &mut local);
        let mut values = vec![0.0; self.len()];
        values[first..first + local.len()].copy_from_slice(&local);
        Ok(values)
    }

    /// All `G + k` basis derivatives `dB_m/dx` at `x`, with `x` clamped.
    pub fn derivative(&self, x: f64) -> Result<Vec<f64>> {
        if self.degree == 0 {
            return Err(Error::UnsupportedDegree(0));
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("basis input {x} is not finite")));
        }
        let mut local = vec![0.0; self.degree + 1];
        let first = self.derivative_local(self.clamp(x), &mut local);
        let mut values = vec![0.0; self.len()];
        values[first..first + local.len()].copy_from_slice(&local);
        Ok(values)
    }
}

/// Builds a basis whose domain covers `samples` plus a symmetric margin of
/// `margin_fraction` times the observed range. A constant sample set gets the
/// unit-width domain centred on its value.
pub fn fit_basis_from_data(
    samples: &[f64],
    interval_count: usize,
    degree: usize,
    margin_fraction: f64,
) -> Result<BSplineBasis> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot fit a spline domain to no samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("spline samples must be finite".into()));
    }
    if !(margin_fraction >= 0.0) || !margin_fraction.is_finite() {
        return Err(Error::InvalidInput(format!("margin fraction {margin_fraction} must be >= 0")));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        return BSplineBasis::new(degree, interval_count, lo - 0.5, lo + 0.5);
    }
    let m = margin_fraction * (hi - lo);
    BSplineBasis::new(degree, interval_count, lo - m, hi + m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Sparse,
    #[default]
    Dense,
}

/// Gradient of one learnable function with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionGradient {
    pub d_input: f64,
    pub d_coeffs: Vec<f64>,
    pub d_base_weight: f64,
    pub d_spline_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableFunction {
    pub basis: BSplineBasis,
    pub coefficients: Vec<f64>,
    pub base_weight: f64,
    pub spline_weight: f64,
}

impl LearnableFunction {
    pub fn new(basis: BSplineBasis, coefficients: Vec<f64>, base_weight: f64, spline_weight: f64) -> Result<Self> {
        let f = LearnableFunction { basis, coefficients, base_weight, spline_weight };
        f.validate()?;
        Ok(f)
    }

    /// The zero function on `basis`.
    pub fn zeros(basis: BSplineBasis) -> Self {
        let n = basis.len();
        LearnableFunction { basis, coefficients: vec![0.0; n], base_weight: 0.0, spline_weight: 0.0 }
    }

    pub fn init<R: Rng + ?Sized>(basis: BSplineBasis, mode: InitMode, rng: &mut R) -> Self {
        let n = basis.len();
        match mode {
            InitMode::Sparse => {
                LearnableFunction { basis, coefficients: vec![0.0; n], base_weight: 0.0, spline_weight: 1.0 }
            }
            InitMode::Dense => {
                let normal = Normal::new(0.0, 0.1 / (n as f64).sqrt()).expect("positive std");
                let coefficients = (0..n).map(|_| normal.sample(rng)).collect();
                LearnableFunction { basis, coefficients, base_weight: 1.0, spline_weight: 1.0 }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.basis.len() {
            return Err(Error::InvalidModel(format!(
                "function has {} coefficients for a basis of {}",
                self.coefficients.len(),
                self.basis.len()
            )));
        }
        let finite = self.base_weight.is_finite()
            && self.spline_weight.is_finite()
            && self.coefficients.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::InvalidModel("learnable function has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars: coefficients plus the two weights.
    pub fn parameter_count(&self) -> usize {
        self.coefficients.len() + 2
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("function input {x} is not finite")));
        }
        self.validate()?;
        Ok(self.eval_fast(x))
    }

    /// Spline term only, `sum_m c_m B_m(clamp(x))`.
    pub(crate) fn spline_value(&self, x: f64) -> f64 {
        let k = self.basis.degree;
        let mut local = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if k < 16 {
            &mut local[..=k]
        } else {
            heap = vec![0.0; k + 1];
            &mut heap[..]
        };
        let first = self.basis.eval_local(self.basis.clamp(x), buf);
        buf.iter().zip(&self.coefficients[first..]).map(|(b, c)| b * c).sum()
    }

    pub(crate) fn eval_fast(&self, x: f64) -> f64 {
        self.base_weight * base_activation(x) + self.spline_weight * self.spline_value(x)
    }

    pub fn grad(&self, x: f64) -> Result<FunctionGradient> {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("function input {x} is not finite")));
        }
        self.validate()?;
        let mut g = FunctionGradient {
            d_input: 0.0,
            d_coeffs: vec![0.0; self.coefficients.len()],
            d_base_weight: 0.0,
            d_spline_weight: 0.0,
        };
        self.accumulate_grad(x, 1.0, &mut g.d_coeffs, &mut g.d_base_weight, &mut g.d_spline_weight);
        g.d_input = self.input_derivative(x);
        Ok(g)
    }

    /// Adds `scale` times the parameter gradient at `x` into the given slots.
    pub(crate) fn accumulate_grad(
        &self,
        x: f64,
        scale: f64,
        d_coeffs: &mut [f64],
        d_base_weight: &mut f64,
        d_spline_weight: &mut f64,
    ) {
        let k = self.basis.degree;
        let mut local = vec![0.0; k + 1];
        let first = self.basis.eval_local(self.basis.clamp(x), &mut local);
        let mut spline = 0.0;
        for (r, b) in local.iter().enumerate() {
            spline += b * self.coefficients[first + r];
            d_coeffs[first + r] += scale * self.spline_weight * b;
        }
        *d_spline_weight += scale * spline;
        *d_base_weight += scale * base_activation(x);
    }

    /// `d phi / d x`; the spline part vanishes outside the clamped domain.
    pub(crate) fn input_derivative(&self, x: f64) -> f64 {
        let mut d = self.base_weight * base_activation_derivative(x);
        if self.basis.degree >= 1 && self.basis.contains(x) && self.spline_weight != 0.0 {
            let k = self.basis.degree;
            let mut local = vec![0.0; k + 1];
            let first = self.basis.derivative_local(x, &mut local);
            let ds: f64 = local.iter().zip(&self.coefficients[first..]).map(|(b, c)| b * c).sum();
            d += self.spline_weight * ds;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook recursive Cox-de Boor on half-open intervals, kept independent
    /// of the triangular evaluation used by the basis.
    fn cox_de_boor(t: &[f64], m: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if t[m] <= x && x < t[m + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[m + k] - t[m];
        if d1 > 0.0 {
            v += (x - t[m]) / d1 * cox_de_boor(t, m, k - 1, x);
        }
        let d2 = t[m + k + 1] - t[m + 1];
        if d2 > 0.0 {
            v += (t[m + k + 1] - x) / d2 * cox_de_boor(t, m + 1, k - 1, x);
        }
        v
    }

    #[test]
    fn degree_zero_is_interval_indicator() {
        let b = BSplineBasis::new(0, 2, 0.0, 2.0).unwrap();
        assert_eq!(b.eval(0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(2.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.knots().len(), 3);
    }

    #[test]
    fn cubic_partition_of_unity() {
        let b = BSplineBasis::new(3, 5, -1.0, 1.0).unwrap();
        let s: f64 = b.eval(0.3).unwrap().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        assert_eq!(b.len(), 8);
        assert_eq!(b.knots().len(), 5 + 6 + 1);
    }

    #[test]
    fn quadratic_matches_recursive_oracle() {
        let b = BSplineBasis::new(2, 4, 0.0, 1.0).unwrap();
        let v = b.eval(0.37).unwrap();
        for (m, vm) in v.iter().enumerate() {
            assert_abs_diff_eq!(*vm, cox_de_boor(b.knots(), m, 2, 0.37), epsilon = 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let b = BSplineBasis::new(1, 2, 0.0, 1.0).unwrap();
        assert!(matches!(b.eval(f64::NAN), Err(Error::InvalidInput(_))));
        assert!(matches!(b.derivative(f64::INFINITY), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_construction() {
        assert!(BSplineBasis::new(1, 0, 0.0, 1.0).is_err());
        assert!(BSplineBasis::new(1, 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn hat_function_slopes() {
        let b = BSplineBasis::new(1, 2, 0.0, 2.0).unwrap();
        let d = b.derivative(0.5).unwrap();
        assert_eq!(d.len(), 3);
        assert_abs_diff_eq!(d[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn degree_zero_derivative_unsupported() {
        let b = BSplineBasis::new(0, 3, 0.0, 1.0).unwrap();
        assert!(matches!(b.derivative(0.5), Err(Error::UnsupportedDegree(0))));
    }

    #[test]
    fn cubic_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = rng.random_range(1..8);
            let b = BSplineBasis::new(3, g, -2.0, 3.0).unwrap();
            let x = rng.random_range(-1.9..2.9);
            let h = 1e-5;
            let d = b.derivative(x).unwrap();
            let up = b.eval(x + h).unwrap();
            let dn = b.eval(x - h).unwrap();
            for m in 0..b.len() {
                let fd = (up[m] - dn[m]) / (2.0 * h);
                let scale = fd.abs().max(d[m].abs()).max(1e-3);
                assert!((fd - d[m]).abs() / scale < 1e-5, "m={m} fd={fd} an={}", d[m]);
            }
        }
    }

    #[test]
    fn domain_from_samples() {
        let b = fit_basis_from_data(&[0.0, 1.0], 3, 1, 0.1).unwrap();
        assert_abs_diff_eq!(b.domain().0, -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b.domain().1, 1.1, epsilon = 1e-15);
        let c = fit_basis_from_data(&[2.0, 2.0, 2.0], 3, 1, 0.1).unwrap();
        assert_eq!(c.domain(), (1.5, 2.5));
        assert!(matches!(fit_basis_from_data(&[], 3, 1, 0.1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_margin_domain_is_observed_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let b = fit_basis_from_data(&xs, 5, 3, 0.0).unwrap();
        assert_eq!(b.domain(), (lo, hi));
    }

    #[test]
    fn constant_coefficients_give_constant_function() {
        let b = BSplineBasis::new(2, 4, -1.0, 1.0).unwrap();
        let f = LearnableFunction::new(b, vec![3.5; 6], 0.0, 1.0).unwrap();
        for i in 0..=20 {
            let x = -1.0 + 0.1 * i as f64;
            assert_abs_diff_eq!(f.eval(x).unwrap(), 3.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_function_is_zero() {
        let f = LearnableFunction::zeros(BSplineBasis::new(3, 3, 0.0, 1.0).unwrap());
        for x in [-5.0, 0.0, 0.3, 7.0] {
            assert_eq!(f.eval(x).unwrap(), 0.0);
        }
    }

    #[test]
    fn eval_matches_basis_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = BSplineBasis::new(3, 4, -1.0, 1.0).unwrap();
        let c: Vec<f64> = (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (wb, ws) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let f = LearnableFunction::new(b.clone(), c.clone(), wb, ws).unwrap();
        let x = 0.42;
        let basis = b.eval(x).unwrap();
        let dot: f64 = basis.iter().zip(&c).map(|(a, b)| a * b).sum();
        let expected = wb * x / (1.0 + (-x).exp()) + ws * dot;
        assert_abs_diff_eq!(f.eval(x).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let b = BSplineBasis::new(1, 1, 0.0, 1.0).unwrap();
        assert!(LearnableFunction::new(b.clone(), vec![f64::NAN, 0.0], 0.0, 1.0).is_err());
        let mut f = LearnableFunction::zeros(b);
        f.base_weight = f64::INFINITY;
        assert!(matches!(f.eval(0.5), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn grad_edge_cases() {
        let b = BSplineBasis::new(2, 3, -1.0, 1.0).unwrap();
        let f = LearnableFunction::new(b, vec![0.3, -0.2, 0.5, 0.1, 0.9], 0.7, 0.0).unwrap();
        let g = f.grad(0.2).unwrap();
        assert!(g.d_coeffs.iter().all(|v| *v == 0.0));
        let g0 = f.grad(0.0).unwrap();
        assert_eq!(g0.d_base_weight, 0.0);
        // Outside the domain only the residual term carries slope.
        let mut f2 = f.clone();
        f2.spline_weight = 2.0;
        let out = f2.grad(3.0).unwrap();
        assert_abs_diff_eq!(out.d_input, 0.7 * base_activation_derivative(3.0), epsilon = 1e-14);
    }

    fn check_grad_fd(f: &LearnableFunction, x: f64) {
        let h = 1e-6;
        let g = f.grad(x).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        let fd_x = (f.eval(x + h).unwrap() - f.eval(x - h).unwrap()) / (2.0 * h);
        assert!(rel(fd_x, g.d_input) < 1e-4, "d_input fd={fd_x} an={}", g.d_input);
        for m in 0..f.coefficients.len() {
            let mut p = f.clone();
            p.coefficients[m] += h;
            let mut q = f.clone();
            q.coefficients[m] -= h;
            let fd = (p.eval(x).unwrap() - q.eval(x).unwrap()) / (2.0 * h);
            assert!(rel(fd, g.d_coeffs[m]) < 1e-4);
        }
        let mut p = f.clone();
        p.base_weight += h;
        let mut q = f.clone();
        q.base_weight -= h;
        let fd = (p.eval(x).unwrap() - q.eval(x).unwrap()) / (2.0 * h);
        assert!(rel(fd, g.d_base_weight) < 1e-4);
        let mut p = f.clone();
        p.spline_weight += h;
        let mut q = f.clone();
        q.spline_weight -= h;
        let fd = (p.eval(x).unwrap() - q.eval(x).unwrap()) / (2.0 * h);
        assert!(rel(fd, g.d_spline_weight) < 1e-4);
    }

    #[test]
    fn grad_matches_finite_differences_for_random_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let k = rng.random_range(1..=5);
            let g = rng.random_range(1..=6);
            let b = BSplineBasis::new(k, g, -1.5, 2.0).unwrap();
            let f = LearnableFunction::new(
                b.clone(),
                (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .unwrap();
            // Stay away from knots (where higher derivatives jump) and the clamp boundary.
            let mut x = rng.random_range(-1.4..1.9);
            let h = 3.5 / g as f64;
            let frac = ((x + 1.5) / h).fract();
            if !(0.05..0.95).contains(&frac) {
                x += 0.1 * h;
            }
            check_grad_fd(&f, x);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn sparse_and_dense_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BSplineBasis::new(3, 5, 0.0, 1.0).unwrap();
        let s = LearnableFunction::init(b.clone(), InitMode::Sparse, &mut rng);
        assert!(s.coefficients.iter().all(|c| *c == 0.0));
        assert_eq!((s.base_weight, s.spline_weight), (0.0, 1.0));
        let d = LearnableFunction::init(b, InitMode::Dense, &mut rng);
        assert_eq!((d.base_weight, d.spline_weight), (1.0, 1.0));
        assert!(d.coefficients.iter().any(|c| *c != 0.0));
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let b = BSplineBasis::new(3, 5, -0.3, 1.7).unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let back: BSplineBasis = serde_json::from_str(&json).unwrap();
        assert_eq!(b, back);
        let tampered = json.replace("\"degree\":3", "\"degree\":2");
        assert!(serde_json::from_str::<BSplineBasis>(&tampered).is_err());
    }

    proptest! {
        #[test]
        fn basis_is_a_local_partition_of_unity(
            k in 0usize..6,
            g in 1usize..10,
            lo in -5.0f64..5.0,
            width in 0.1f64..10.0,
            u in 0.0f64..=1.0,
        ) {
            let b = BSplineBasis::new(k, g, lo, lo + width).unwrap();
            let x = lo + u * width;
            let v = b.eval(x).unwrap();
            let sum: f64 = v.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(v.iter().all(|&e| e >= 0.0));
            prop_assert!(v.iter().filter(|&&e| e != 0.0).count() <= k + 1);
            if k >= 1 && u > 0.0 && u < 1.0 {
                let ds: f64 = b.derivative(x).unwrap().iter().sum();
                prop_assert!(ds.abs() < 1e-10 * (1.0 + g as f64 / width));
            }
        }
    }
}
