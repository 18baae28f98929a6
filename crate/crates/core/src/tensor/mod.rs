//! Dense row-major tensors with reverse-mode gradient accumulation.
//!
//! Everything the feature pipeline computes (feature maps, weights,
//! losses) lives in [`Tensor`]. Differentiable programs are recorded on a
//! [`tape::Tape`] and checked against central finite differences with
//! [`gradcheck::grad_check`].

use num_traits::Float;

pub mod gradcheck;
pub mod tape;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};

/// Scalar type a tensor can hold. `f32` is the runtime default; gradient
/// checks run at `f64` so finite differences are meaningful.
pub trait Element:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this element type.
    fn lit(v: f64) -> Self;
    /// Widens to `f64` for reporting and cross-precision comparisons.
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Errors surfaced by tensor construction and the ops recorded on a tape.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(TensorError::ShapeMismatch { op, detail })
}

/// Dense multi-dimensional array, row-major.
///
/// Invariant: `shape.iter().product() == data.len()`, enforced by every
/// constructor. Ops that could blow up numerically check their outputs and
/// report [`TensorError::NonFinite`] instead of letting NaN/Inf propagate.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::one();
        }
        t
    }

    /// Uniform(lo, hi) samples, drawn in row-major order.
    pub fn uniform<R: rand::Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| E::lit(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the backing store. The length is fixed, so the
    /// shape/data invariant cannot be broken through this.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Row-major flat index of a multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> E {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: E) {
        let flat = self.flat_index(idx);
        self.data[flat] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            );
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc + v)
    }

    /// Flat index of the largest value (first occurrence on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.data.len() {
            if self.data[i] > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// 2-D matrix product `self[N,K] x other[K,M]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let ([n, k], [k2, m]) = (dims2(self, "matmul")?, dims2(other, "matmul")?);
        if k != k2 {
            return shape_err("matmul", format!("inner dims {} vs {}", k, k2));
        }
        let mut out = vec![E::zero(); n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == E::zero() {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                let dst = &mut out[i * m..(i + 1) * m];
                for (o, &b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// `self[N,K] x other[M,K]^T`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let ([n, k], [m, k2]) = (dims2(self, "matmul_nt")?, dims2(other, "matmul_nt")?);
        if k != k2 {
            return shape_err("matmul_nt", format!("inner dims {} vs {}", k, k2));
        }
        let mut out = vec![E::zero(); n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                let mut s = E::zero();
                for p in 0..k {
                    s += a[p] * b[p];
                }
                out[i * m + j] = s;
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// `self[K,N]^T x other[K,M]`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let ([k, n], [k2, m]) = (dims2(self, "matmul_tn")?, dims2(other, "matmul_tn")?);
        if k != k2 {
            return shape_err("matmul_tn", format!("inner dims {} vs {}", k, k2));
        }
        let mut out = vec![E::zero(); n * m];
        for p in 0..k {
            for i in 0..n {
                let a = self.data[p * n + i];
                if a == E::zero() {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                let dst = &mut out[i * m..(i + 1) * m];
                for (o, &b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let [n, m] = dims2(self, "transpose2")?;
        let mut out = vec![E::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Samples a `[H,W,C]` map at fractional position `(y, x)` with
    /// 4-neighbor bilinear interpolation. Coordinates outside the grid
    /// contribute zeros.
    pub fn bilinear_sample(&self, y: f64, x: f64) -> Result<Vec<E>> {
        let [h, w, c] = dims3(self, "bilinear_sample")?;
        let mut out = vec![E::zero(); c];
        let weights = bilinear_weights(y, x);
        for &(iy, ix, wgt) in &weights {
            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                continue;
            }
            let base = (iy as usize * w + ix as usize) * c;
            let wgt = E::lit(wgt);
            for ch in 0..c {
                out[ch] += wgt * self.data[base + ch];
            }
        }
        Ok(out)
    }

    /// Item `b` of a batched tensor `[B, rest...] -> [rest...]`.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        if self.rank() < 2 || b >= self.shape[0] {
            return shape_err(
                "batch_item",
                format!("item {} of shape {:?}", b, self.shape),
            );
        }
        let item_len = self.numel() / self.shape[0];
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[b * item_len..(b + 1) * item_len].to_vec(),
        )
    }

    /// Stacks same-shape tensors along a new leading batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            msg: "no items".to_string(),
        })?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.shape() != first.shape() {
                return shape_err(
                    "stack",
                    format!("{:?} vs {:?}", item.shape(), first.shape()),
                );
            }
            data.extend_from_slice(item.data());
        }
        Tensor::new(shape, data)
    }

    /// Per-group normalization: the first `batch_axes` axes index groups,
    /// everything after is normalized jointly to zero mean / unit variance
    /// (population variance, stabilized by `eps`). No learned affine.
    pub fn layer_norm(&self, eps: E, batch_axes: usize) -> Result<Self> {
        let groups: usize = self.shape[..batch_axes.min(self.rank())].iter().product();
        let group_len = self.numel() / groups.max(1);
        if group_len == 0 {
            return shape_err("layer_norm", "empty normalization group".to_string());
        }
        let mut out = self.clone();
        for g in 0..groups {
            let chunk = &mut out.data[g * group_len..(g + 1) * group_len];
            let (mean, var) = mean_var(chunk);
            let denom = (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) / denom;
            }
        }
        Ok(out)
    }
}

pub(crate) fn mean_var<E: Element>(vals: &[E]) -> (E, E) {
    let n = E::lit(vals.len() as f64);
    let mut mean = E::zero();
    for &v in vals {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::zero();
    for &v in vals {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

/// The four corner contributions of bilinear interpolation at `(y, x)`:
/// `(row, col, weight)` per corner. Corners may be out of range; callers
/// apply the zero-padding rule.
pub(crate) fn bilinear_weights(y: f64, x: f64) -> [(i64, i64, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
}

fn dims2<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<[usize; 2]> {
    match t.shape[..] {
        [a, b] => Ok([a, b]),
        _ => shape_err(op, format!("expected rank 2, got {:?}", t.shape)),
    }
}

fn dims3<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<[usize; 3]> {
    match t.shape[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => shape_err(op, format!("expected rank 3, got {:?}", t.shape)),
    }
}

/// A trainable tensor paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<E: Element> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
}

impl<E: Element> Parameter<E> {
    pub fn new(value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Parameter::new(Tensor::zeros(shape))
    }

    /// Scaled-uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` where
    /// `fan_in` is the first axis extent.
    pub fn fan_in_uniform<R: rand::Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let fan_in = shape.first().copied().unwrap_or(1).max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        Parameter::new(Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = E::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_disagreement() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let id = Tensor::<f64>::eye(2);
        assert_eq!(x.matmul(&id).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_basis_rows() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap();
        assert_eq!(x.matmul(&w).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let plain = a.matmul(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose2().unwrap()).unwrap();
        let tn = a.transpose2().unwrap().matmul_tn(&b).unwrap();
        assert_eq!(plain, nt);
        assert_eq!(plain, tn);
    }

    #[test]
    fn bilinear_integer_coordinates_index_directly() {
        let mut map = Tensor::<f64>::zeros(vec![4, 5, 2]);
        map.set(&[2, 3, 0], 7.0);
        map.set(&[2, 3, 1], -1.0);
        assert_eq!(map.bilinear_sample(2.0, 3.0).unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn bilinear_midpoint_average() {
        let mut map = Tensor::<f64>::zeros(vec![1, 2, 1]);
        map.set(&[0, 0, 0], 0.0);
        map.set(&[0, 1, 0], 2.0);
        assert_eq!(map.bilinear_sample(0.0, 0.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn bilinear_out_of_range_is_zero() {
        let map = Tensor::<f64>::filled(vec![3, 3, 2], 5.0);
        assert_eq!(map.bilinear_sample(-5.0, -5.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn layer_norm_matches_hand_computation() {
        // mean 2, population variance 2/3
        let v = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = v.layer_norm(0.0, 1).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((out.data()[0] + expect).abs() < 1e-12);
        assert!(out.data()[1].abs() < 1e-12);
        assert!((out.data()[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let v = Tensor::<f64>::filled(vec![1, 8], 3.5);
        let out = v.layer_norm(1e-5, 1).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() < 1e-9));
    }
}
