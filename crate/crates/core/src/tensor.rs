//! Dense row-major tensors and the numeric kernels shared across the crate.
//!
//! Everything here is a pure function over immutable values; tensors are
//! plain `Vec<f64>` buffers with explicit shapes, validated on construction
//! so downstream code never sees NaN/Inf or shape/data disagreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of finite `f64` values, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {} is {}",
                pos, data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                expected
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Elementwise map; the result is re-validated for finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.ndim(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Mean over the spatial axes of a `[B, T, H, W, C]` tensor, yielding `[B, T, C]`.
pub fn spatial_mean(features: &Tensor) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "spatial_mean expects [B,T,H,W,C], got {:?}",
            shape
        )));
    }
    let (b, t, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if h * w == 0 {
        return Err(Error::InvalidArgument(
            "spatial_mean: empty spatial extent".into(),
        ));
    }
    let mut out = vec![0.0; b * t * c];
    let norm = 1.0 / (h * w) as f64;
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    let base = features.offset(&[bi, ti, hi, wi, 0]);
                    let dst = (bi * t + ti) * c;
                    for ci in 0..c {
                        out[dst + ci] += features.data()[base + ci];
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    Tensor::new(vec![b, t, c], out)
}

/// Piecewise-linear hard sigmoid: `clamp(x/6 + 0.5, 0, 1)`.
///
/// Other slopes are in use elsewhere (e.g. `x/4 + 0.5`); this is the single
/// place to change if a different variant is wanted.
pub fn hard_sigmoid(x: f64) -> f64 {
    (x / 6.0 + 0.5).clamp(0.0, 1.0)
}

/// Affine map along the trailing channel axis: `[..., C_in] -> [..., C_out]`.
///
/// `weight` is `[C_in, C_out]`, `bias` is `[C_out]`.
pub fn linear_map(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weight.ndim() != 2 || bias.ndim() != 1 {
        return Err(Error::ShapeMismatch(
            "linear_map: weight must be 2-D and bias 1-D".into(),
        ));
    }
    let c_in = weight.shape()[0];
    let c_out = weight.shape()[1];
    if bias.shape()[0] != c_out {
        return Err(Error::ShapeMismatch(format!(
            "linear_map: bias has {} entries, weight maps to {}",
            bias.shape()[0],
            c_out
        )));
    }
    let in_shape = input.shape();
    if in_shape.is_empty() || in_shape[in_shape.len() - 1] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "linear_map: input channel axis {:?} does not match weight rows {}",
            in_shape.last(),
            c_in
        )));
    }
    let rows = input.len() / c_in.max(1);
    let mut out_shape = in_shape.to_vec();
    *out_shape.last_mut().unwrap() = c_out;
    let mut out = vec![0.0; rows * c_out];
    for r in 0..rows {
        let src = &input.data()[r * c_in..(r + 1) * c_in];
        let dst = &mut out[r * c_out..(r + 1) * c_out];
        dst.copy_from_slice(bias.data());
        for (i, &x) in src.iter().enumerate() {
            let wrow = &weight.data()[i * c_out..(i + 1) * c_out];
            for (d, &w) in dst.iter_mut().zip(wrow) {
                *d += x * w;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Stable log-softmax of a logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(
            "finite_diff_grad: eps must be > 0".into(),
        ));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f non-finite at coordinate {}",
                i
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Comparison of an analytic gradient against the finite-difference oracle.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Per coordinate: (flat index, analytic, numeric).
    pub per_coordinate: Vec<(usize, f64, f64)>,
}

/// Relative-error floor: components both smaller than this are compared
/// absolutely, which keeps near-zero gradients from inflating the ratio.
const REL_FLOOR: f64 = 1e-6;

/// Runs the finite-difference oracle against a caller-supplied analytic
/// gradient and reports the worst absolute and relative disagreement.
pub fn check_gradient<F>(f: F, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "check_gradient: analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument(
            "check_gradient: empty input has no coordinates".into(),
        ));
    }
    let numeric = finite_diff_grad(&f, x, eps)?;
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        per_coordinate: Vec::with_capacity(x.len()),
    };
    for i in 0..x.len() {
        let a = analytic.data()[i];
        let n = numeric.data()[i];
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.per_coordinate.push((i, a, n));
    }
    Ok(report)
}
