//! Dense row-major tensors and the numeric kernels shared by the graph.
//!
//! Storage is generic over [`Real`] so the same kernels run in `f32` for
//! training and in `f64` for gradient checking.

use std::fmt::Debug;

use thiserror::Error;

/// Floating point element type usable by tensors and graphs.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("label {target} out of range for {classes} classes (row {row})")]
    Label {
        row: usize,
        target: usize,
        classes: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("loss function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape must be a non-empty list of positive integers, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() needs exactly one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `y[..., j] = sum_i x[..., i] * w[i, j] + b[j]`, batched over the leading axes of `x`.
pub fn affine<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if w.rank() != 2 || x.last_dim() != w.shape[0] {
        return Err(TensorError::Dimension {
            op: "affine",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (d_in, d_out) = (w.shape[0], w.shape[1]);
    if b.shape != [d_out] {
        return Err(TensorError::Dimension {
            op: "affine bias",
            lhs: w.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let rows = x.numel() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x.data[r * d_in..(r + 1) * d_in];
        let mut acc = b.data.clone();
        for (i, &xi) in xr.iter().enumerate() {
            if xi == F::zero() {
                continue;
            }
            let wr = &w.data[i * d_out..(i + 1) * d_out];
            for (a, &wij) in acc.iter_mut().zip(wr) {
                *a = *a + xi * wij;
            }
        }
        out.extend_from_slice(&acc);
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = d_out;
    Tensor::from_parts(shape, out).checked("affine")
}

/// Numerically stable softmax along `axis`. Accumulation runs in `f64`.
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    check_axis(&x.shape, axis, "softmax")?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![F::zero(); x.numel()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len)
                .map(|k| x.data[at(k)].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = (x.data[at(k)].as_f64() - max).exp();
                total += *slot;
            }
            for (k, &e) in buf.iter().enumerate() {
                out[at(k)] = F::of(e / total);
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out).checked("softmax")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let data = x
        .data
        .iter()
        .map(|&v| F::of(gelu_scalar(v.as_f64())))
        .collect();
    Tensor::from_parts(x.shape.clone(), data).checked("gelu")
}

pub(crate) fn check_targets(rows: usize, classes: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != rows {
        return Err(TensorError::Dimension {
            op: "cross_entropy targets",
            lhs: vec![rows, classes],
            rhs: vec![targets.len()],
        });
    }
    if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= classes) {
        return Err(TensorError::Label {
            row,
            target,
            classes,
        });
    }
    Ok(())
}

/// Log-softmax of one row, in `f64`.
pub(crate) fn log_softmax_row<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// `-log softmax(row)[target]` in `f64`, as `(max - row[t]) + ln(1 + sum of the non-max terms)`.
pub(crate) fn nll_row<F: Real>(row: &[F], target: usize) -> f64 {
    let (am, max) =
        row.iter()
            .map(|v| v.as_f64())
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (i, v)| if v > b.1 { (i, v) } else { b },
            );
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != am)
        .map(|(_, v)| (v.as_f64() - max).exp())
        .sum();
    (max - row[target].as_f64()) + rest.ln_1p()
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    if logits.rank() != 2 {
        return Err(TensorError::Dimension {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let (rows, classes) = (logits.shape[0], logits.shape[1]);
    check_targets(rows, classes, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| nll_row(&logits.data[r * classes..(r + 1) * classes], t))
        .sum();
    let loss = total / rows as f64;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok(F::of(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn affine_identity_and_bias() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let x = t(&[2], &[1.0, 1.0]);
        let w = t(&[2, 1], &[2.0, 3.0]);
        let b = t(&[1], &[-5.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn affine_batches_leading_axes() {
        let x = Tensor::<f32>::zeros(&[3, 4, 5]);
        let w = Tensor::<f32>::zeros(&[5, 2]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert_eq!(affine(&x, &w, &b).unwrap().shape(), &[3, 4, 2]);
    }

    #[test]
    fn affine_mismatch_reports_both_shapes() {
        let x = Tensor::<f32>::zeros(&[3, 4]);
        let w = Tensor::<f32>::zeros(&[5, 2]);
        let b = Tensor::<f32>::zeros(&[2]);
        let msg = affine(&x, &w, &b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for &v in s.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]);
        let s = softmax(&x, 0).unwrap();
        for col in 0..3 {
            assert_abs_diff_eq!(s.data()[col] + s.data()[3 + col], 1.0, epsilon = 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let g = gelu(&t(&[3], &[0.0, 10.0, 1.0])).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert_abs_diff_eq!(g.data()[1], 10.0, epsilon = 1e-4);
        // x * Phi(x) at x = 1, Phi(1) = 0.841344746...
        assert_abs_diff_eq!(g.data()[2], 0.841_344_746_068_543, epsilon = 2e-3);
    }

    #[test]
    fn cross_entropy_limits() {
        let logits = t(&[1, 3], &[0.0, 1000.0, 0.0]);
        assert_abs_diff_eq!(cross_entropy(&logits, &[1]).unwrap(), 0.0, epsilon = 1e-12);
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        assert_abs_diff_eq!(
            cross_entropy(&logits, &[0, 3]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        assert!(matches!(
            cross_entropy(&logits, &[0, 4]),
            Err(TensorError::Label { target: 4, .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = t(&[1], &[f64::MAX]);
        let w = t(&[1, 1], &[f64::MAX]);
        let b = t(&[1], &[0.0]);
        assert_eq!(
            affine(&x, &w, &b).unwrap_err(),
            TensorError::NonFinite { op: "affine" }
        );
    }
}
