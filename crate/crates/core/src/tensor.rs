//! Dense row-major `f64` tensors and the finite-difference gradient harness.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense N-dimensional array stored row-major.
///
/// Every dimension is positive and `data.len()` equals the product of the
/// shape. Values are expected to be finite; constructors that take raw data
/// do not scan for NaN (use [`Tensor::check_finite`] where it matters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("tensor shape must have positive dimensions, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if the shape is empty or has a zero dimension.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid tensor shape {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor from a vector. Panics on an empty vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row-major flat index of a multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.shape.len() {
            return Err(Error::invalid(format!(
                "index rank {} does not match tensor rank {}",
                idx.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::invalid(format!("index {idx:?} out of bounds for shape {:?}", self.shape)));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    /// Inverse of [`Tensor::flat_index`].
    pub fn unflatten(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.data.len() {
            return Err(Error::invalid(format!(
                "flat index {flat} out of bounds for {} elements",
                self.data.len()
            )));
        }
        let mut idx = vec![0; self.shape.len()];
        for (slot, &d) in idx.iter_mut().zip(&self.shape).rev() {
            *slot = flat % d;
            flat /= d;
        }
        Ok(idx)
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(idx)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn ensure_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        other.ensure_shape(&self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        other.ensure_shape(&self.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// True when every element is exactly `+0.0` or `-0.0`.
    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", self.data[i]))),
            None => Ok(()),
        }
    }

    /// Text record `shape: d0 d1 ... ; data: v0 v1 ...` with 17 significant
    /// digits per value, which round-trips every finite `f64` exactly.
    pub fn to_record(&self) -> String {
        let mut s = String::with_capacity(16 + self.data.len() * 24);
        s.push_str("shape:");
        for d in &self.shape {
            s.push(' ');
            s.push_str(&d.to_string());
        }
        s.push_str(" ; data:");
        for v in &self.data {
            s.push(' ');
            s.push_str(&format!("{v:.16e}"));
        }
        s
    }

    pub fn from_record(record: &str) -> Result<Self> {
        let bad = |reason: &str| Error::malformed("tensor record", reason);
        let (shape_part, data_part) = record.split_once(';').ok_or_else(|| bad("missing ';' separator"))?;
        let shape_part = shape_part
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| bad("missing 'shape:' prefix"))?;
        let data_part = data_part
            .trim()
            .strip_prefix("data:")
            .ok_or_else(|| bad("missing 'data:' prefix"))?;
        let shape = shape_part
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(&format!("dimension {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let data = data_part
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(&format!("value {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct TensorRepr(String);

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr(t.to_record())
    }
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;
    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::from_record(&r.0)
    }
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// `max |a-n| / max(|a|,|n|)`, with 0/0 taken as 0.
    pub max_rel_err: f64,
    /// Element whose error is largest relative to its tolerance.
    pub argmax_index: usize,
    /// Step used for the numeric side, when known.
    pub epsilon: Option<f64>,
    pub passed: bool,
    /// First element violating `|a-n| <= abs_tol + rel_tol * max(|a|,|n|)`.
    pub first_failure: Option<usize>,
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, epsilon: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is not finite when perturbing index {i} ({:?})",
                x.unflatten(i)?
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(grad)
}

pub fn compare_gradients(analytic: &Tensor, numeric: &Tensor, rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport> {
    numeric.ensure_shape(analytic.shape())?;
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        argmax_index: 0,
        epsilon: None,
        passed: true,
        first_failure: None,
    };
    let mut worst_ratio = f64::NEG_INFINITY;
    for (i, (&a, &n)) in analytic.data.iter().zip(&numeric.data).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.max_abs_err = report.max_abs_err.max(diff);
        report.max_rel_err = report.max_rel_err.max(rel);
        let tol = abs_tol + rel_tol * scale;
        let ratio = if tol > 0.0 {
            diff / tol
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            report.argmax_index = i;
        }
        if !(diff <= tol) && report.first_failure.is_none() {
            report.passed = false;
            report.first_failure = Some(i);
        }
    }
    Ok(report)
}

/// Finite-difference check of `analytic` against `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, analytic: &Tensor, epsilon: f64, rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let numeric = finite_diff_gradient(f, x, epsilon)?;
    let mut report = compare_gradients(analytic, &numeric, rel_tol, abs_tol)?;
    report.epsilon = Some(epsilon);
    Ok(report)
}

/// Random tensor with pairwise-distinct entries: uniform draws plus a
/// distinct per-element offset, shuffled. Max-based operators are
/// differentiable at such inputs as long as the step stays below the
/// minimum gap (`spacing / 2`).
pub fn tie_free(shape: &[usize], rng: &mut impl rand::Rng, spacing: f64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut offsets: Vec<f64> = (0..n).map(|i| i as f64 * spacing).collect();
    offsets.shuffle(rng);
    let base: f64 = rng.gen_range(-1.0..1.0);
    let data = offsets.into_iter().map(|o| base + o - (n as f64 * spacing) / 2.0).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Uniform random tensor in `[-scale, scale)`.
pub fn uniform(shape: &[usize], rng: &mut impl rand::Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn linear_gradient_is_ones() {
        let x = Tensor::from_vec(vec![-3.0, 0.5, 7.25, 0.125]);
        let g = finite_diff_gradient(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn linear_map_recovers_coefficients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coef = uniform(&[3, 4], &mut rng, 2.0);
        let x = uniform(&[3, 4], &mut rng, 1.0);
        let g = finite_diff_gradient(|t| t.dot(&coef), &x, 1e-5).unwrap();
        let r = compare_gradients(&coef, &g, 0.0, 1e-9).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn non_finite_objective_names_index() {
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        let err = finite_diff_gradient(|t| Ok(if t.data()[1] != 0.0 { f64::NAN } else { 0.0 }), &x, 1e-5).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn compare_identical() {
        let a = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let r = compare_gradients(&a, &a, 1e-4, 1e-7).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn compare_relative_pass() {
        let r = compare_gradients(&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![1.001]), 1e-2, 0.0).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn compare_absolute_fail() {
        let r = compare_gradients(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![0.1]), 0.0, 1e-3).unwrap();
        assert!(!r.passed);
        assert_eq!(r.first_failure, Some(0));
        assert_eq!(r.argmax_index, 0);
    }

    #[test]
    fn compare_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(compare_gradients(&a, &b, 1e-4, 1e-7), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.0, 1e-300, 1.0 / 3.0, -7.5e12, f64::MIN_POSITIVE]).unwrap();
        let back = Tensor::from_record(&t.to_record()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_records() {
        assert!(Tensor::from_record("shape: 2 ; data: 1").is_err());
        assert!(Tensor::from_record("shape: 2 data: 1 2").is_err());
        assert!(Tensor::from_record("shape: x ; data: 1").is_err());
    }

    #[test]
    fn tie_free_entries_are_distinct() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = tie_free(&[6, 6], &mut rng, 1e-2);
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] > 5e-3));
    }

    proptest! {
        #[test]
        fn unflatten_inverts_flat_index(dims in prop::collection::vec(1usize..5, 1..5), seed in 0u64..1000) {
            let t = Tensor::zeros(&dims);
            let flat = (seed as usize) % t.len();
            let idx = t.unflatten(flat).unwrap();
            prop_assert_eq!(t.flat_index(&idx).unwrap(), flat);
        }
    }
}
