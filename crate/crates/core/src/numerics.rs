//! Numerically stable scalar/vector primitives shared by every objective,
//! plus the central-difference gradient oracle used to verify all
//! hand-written backward passes.
//!
//! Everything here is 64-bit: the gradient checks compare analytic and
//! numeric derivatives at 1e-4 relative tolerance, which 32-bit arithmetic
//! cannot support. Softmax and log-sum-exp always subtract the running
//! maximum first; with temperatures as low as 0.1 the raw exponentials
//! overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64. Vectors are handled as plain slices;
/// this type exists for clip-embedding blocks, weight matrices and
/// gradient buffers, not for general tensor algebra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from a flat row-major buffer. Panics if the length is wrong;
    /// this is a programming error, not a data error.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length {} != {}x{}", data.len(), rows, cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// self += alpha * other (shapes must match).
    pub fn add_scaled(&mut self, other: &Mat, alpha: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Affine map `y = W x + b` with `W` of shape (out, in).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine { weight: Mat::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    /// Identity map; requires a square shape.
    pub fn identity(dim: usize) -> Self {
        let mut a = Affine::zeros(dim, dim);
        for i in 0..dim {
            a.weight.row_mut(i)[i] = 1.0;
        }
        a
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "affine expects input of dim {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut out = self.bias.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            *out_v += dot(self.weight.row(o), x);
        }
        Ok(out)
    }

    /// Accumulate gradients of `y = W x + b` given upstream dL/dy.
    /// Returns dL/dx; adds dL/dW and dL/db into the provided buffers.
    pub fn backward(
        &self,
        x: &[f64],
        upstream: &[f64],
        grad_weight: &mut Mat,
        grad_bias: &mut [f64],
    ) -> Vec<f64> {
        let mut grad_x = vec![0.0; x.len()];
        for (o, &g) in upstream.iter().enumerate() {
            grad_bias[o] += g;
            let w_row = self.weight.row(o);
            let gw_row = grad_weight.row_mut(o);
            for i in 0..x.len() {
                gw_row[i] += g * x[i];
                grad_x[i] += g * w_row[i];
            }
        }
        grad_x
    }
}

/// A vector of probabilities: entries in [0, 1] summing to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVec(Vec<f64>);

impl ProbabilityVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(
                "probability entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(ProbabilityVec(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale to unit L2 norm. Zero vectors are rejected rather than patched:
/// a zero embedding upstream is always a bug or corrupt data.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput(format!("cannot normalize vector with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_similarity: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Softmax of `logits / tau` with max-subtraction.
pub fn stable_softmax(logits: &[f64], tau: f64) -> Result<ProbabilityVec> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidParameter("softmax of empty logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVec::new(exps.into_iter().map(|e| e / sum).collect())
}

/// log(sum(exp(x_k))) with max-subtraction.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::InvalidParameter("log_sum_exp of empty input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(max + sum.ln())
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient of a scalar function: per coordinate k,
/// (f(x + h e_k) - f(x - h e_k)) / (2h).
///
/// This is the oracle every analytic gradient in the crate is checked
/// against; it must stay independent of the backward passes it verifies.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("step size must be > 0, got {h}")));
    }
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = work[k];
        work[k] = orig + h;
        let f_plus = f(&work);
        work[k] = orig - h;
        let f_minus = f(&work);
        work[k] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function evaluation at coordinate {k} returned {f_plus} / {f_minus}"
            )));
        }
        grad[k] = (f_plus - f_minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error with a floor on the denominator so that coordinates with
/// true gradient near zero compare against the finite-difference noise
/// floor instead of dividing by ~0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of comparing an analytic gradient against the oracle.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_coordinate_errors: Vec<f64>,
    pub step_size: f64,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], step_size: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let per: Vec<f64> =
            analytic.iter().zip(numeric).map(|(a, n)| relative_error(*a, *n)).collect();
        let max = per.iter().cloned().fold(0.0, f64::max);
        GradCheckReport { max_rel_error: max, per_coordinate_errors: per, step_size }
    }
}

/// Backward through y = x / ||x||: given dL/dy, the normalized output y and
/// the input norm, returns dL/dx = (dL/dy - (dL/dy . y) y) / ||x||.
pub fn normalize_backward(upstream: &[f64], normalized: &[f64], input_norm: f64) -> Vec<f64> {
    let proj = dot(upstream, normalized);
    upstream
        .iter()
        .zip(normalized)
        .map(|(g, y)| (g - proj * y) / input_norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_identity_case() {
        let out = l2_normalize(&[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_scale_invariant() {
        assert!((cosine_similarity(&[2.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_forty_five_degrees() {
        // 1/sqrt(2) by direct arithmetic
        let expected = 1.0 / 2.0_f64.sqrt();
        let got = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    }

    #[test]
    fn cosine_zero_vector_errors() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_symmetric() {
        let p = stable_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_no_overflow_on_huge_logits() {
        let p = stable_softmax(&[1000.0, 1000.0, 1000.0], 1.0).unwrap();
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ln2_case() {
        let p = stable_softmax(&[2.0_f64.ln(), 0.0], 1.0).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(stable_softmax(&[1.0], 0.0).is_err());
        assert!(stable_softmax(&[1.0], -0.1).is_err());
    }

    #[test]
    fn lse_basic_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[3.25]).unwrap(), 3.25);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn finite_diff_matches_quadratic() {
        // f = ||x||^2 has gradient 2x
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_gradient(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!(relative_error(g[0], 2.0) < 1e-8, "g0 = {}", g[0]);
        assert!(relative_error(g[1], 4.0) < 1e-8, "g1 = {}", g[1]);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_gradient(|_| 7.5, &[0.3, -0.2, 1.1], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let f = |x: &[f64]| x[0].ln(); // non-finite at x <= 0
        assert!(matches!(
            finite_diff_gradient(f, &[0.0], 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_diff() {
        let x = vec![0.8, -0.3, 1.4];
        let upstream = vec![0.2, 0.7, -0.5];
        // scalar probe L = upstream . (x/||x||)
        let f = |v: &[f64]| {
            let n = l2_norm(v);
            dot(&upstream, &v.iter().map(|a| a / n).collect::<Vec<_>>())
        };
        let numeric = finite_diff_gradient(f, &x, 1e-6).unwrap();
        let normalized = l2_normalize(&x).unwrap();
        let analytic = normalize_backward(&upstream, &normalized, l2_norm(&x));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-7, "{a} vs {n}");
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            xs in proptest::collection::vec(-256.0..256.0f64, 1..8),
            c in -256.0..256.0f64,
            tau in 0.1..4.0f64,
        ) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = stable_softmax(&xs, tau).unwrap();
            let b = stable_softmax(&shifted, tau).unwrap();
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one_for_extreme_inputs(
            xs in proptest::collection::vec(-1e6..1e6f64, 1..16),
        ) {
            let p = stable_softmax(&xs, 1.0).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn lse_bounds(xs in proptest::collection::vec(-1e3..1e3f64, 1..16)) {
            let lse = log_sum_exp(&xs).unwrap();
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max - 1e-12);
            prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn cosine_positive_scale_invariance(
            a in proptest::collection::vec(-10.0..10.0f64, 3),
            b in proptest::collection::vec(-10.0..10.0f64, 3),
            alpha in 0.01..100.0f64,
            beta in 0.01..100.0f64,
        ) {
            prop_assume!(l2_norm(&a) > 1e-6 && l2_norm(&b) > 1e-6);
            let base = cosine_similarity(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
            let scaled = cosine_similarity(&sa, &sb).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!(base >= -1.0 - 1e-12 && base <= 1.0 + 1e-12);
        }
    }
}
