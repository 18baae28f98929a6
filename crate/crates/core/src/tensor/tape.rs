//! Define-by-run recording of differentiable ops.
//!
//! A [`Tape`] owns every intermediate value of a forward pass. Each op
//! appends a node; when recording is enabled the node also carries a
//! backward closure that turns the upstream gradient into per-parent
//! contributions. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every node, leaves included.

use super::{bilinear_weights, mean_var, Element, Parameter, Result, Tensor, TensorError};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Tensor<E>>>;

struct Node<E: Element> {
    value: Tensor<E>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    recording: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the output w.r.t. `var`, if any path reached it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<E>> {
        self.grads[var.0].as_ref()
    }

    /// Adds the gradient at `var` into `param.grad`.
    pub fn accumulate(&self, var: Var, param: &mut Parameter<E>) {
        if let Some(g) = self.wrt(var) {
            debug_assert_eq!(g.shape(), param.grad.shape());
            for (dst, &src) in param.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that skips backward closures; forward values only.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Registers an input or parameter value as a leaf.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, vec![], None)
    }

    fn push(&mut self, value: Tensor<E>, parents: Vec<usize>, backward: Option<BackwardFn<E>>) -> Var {
        let backward = if self.recording { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn finite(&self, op: &'static str, t: Tensor<E>) -> Result<Tensor<E>> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let out = self.finite("add", out)?;
        let shape = out.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                debug_assert_eq!(g.shape(), &shape[..]);
                vec![g.clone(), g.clone()]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let out = self.finite("sub", out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.clone(), g.map(|v| -v)])),
        ))
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.zip_map(&bv, "mul", |x, y| x * y)?;
        let out = self.finite("mul", out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = g.zip_map(&bv, "mul_bwd", |gv, y| gv * y).unwrap();
                let db = g.zip_map(&av, "mul_bwd", |gv, x| gv * x).unwrap();
                vec![da, db]
            })),
        ))
    }

    /// Elementwise `k*x + c`.
    pub fn affine(&mut self, a: Var, k: E, c: E) -> Result<Var> {
        let out = self.value(a).map(|x| k * x + c);
        let out = self.finite("affine", out)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.map(|gv| gv * k)])),
        ))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -E::one(), E::zero())
    }

    /// Adds a constant tensor elementwise (no gradient to the constant).
    pub fn add_const(&mut self, a: Var, t: &Tensor<E>) -> Result<Var> {
        let out = self.value(a).zip_map(t, "add_const", |x, y| x + y)?;
        let out = self.finite("add_const", out)?;
        Ok(self.push(out, vec![a.0], Some(Box::new(move |g| vec![g.clone()]))))
    }

    /// Multiplies by a constant tensor elementwise.
    pub fn mul_const(&mut self, a: Var, t: &Tensor<E>) -> Result<Var> {
        let tv = t.clone();
        let out = self.value(a).zip_map(t, "mul_const", |x, y| x * y)?;
        let out = self.finite("mul_const", out)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&tv, "mul_const_bwd", |gv, y| gv * y).unwrap()]
            })),
        ))
    }

    /// Broadcasts a `[C]` row vector across every row of `x: [N,C]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "add_row")?;
        let vs = self.shape(v).to_vec();
        if vs != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("row {:?} against [{},{}]", vs, n, c),
            });
        }
        let xv = self.value(x);
        let vv = self.value(v);
        let mut out = xv.clone();
        for row in 0..n {
            for col in 0..c {
                let idx = row * c + col;
                let s = out.data()[idx] + vv.data()[col];
                out.data_mut()[idx] = s;
            }
        }
        let out = self.finite("add_row", out)?;
        Ok(self.push(
            out,
            vec![x.0, v.0],
            Some(Box::new(move |g| {
                let mut dv = Tensor::zeros(vec![c]);
                for row in 0..n {
                    for col in 0..c {
                        let gv = g.data()[row * c + col];
                        dv.data_mut()[col] += gv;
                    }
                }
                vec![g.clone(), dv]
            })),
        ))
    }

    /// Multiplies each row of `x: [N,C]` by the scalar `w[n]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "scale_rows")?;
        if self.shape(w) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                detail: format!("weights {:?} for {} rows", self.shape(w), n),
            });
        }
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = xv.clone();
        for row in 0..n {
            let s = wv.data()[row];
            for col in 0..c {
                let idx = row * c + col;
                out.data_mut()[idx] = out.data()[idx] * s;
            }
        }
        let out = self.finite("scale_rows", out)?;
        Ok(self.push(
            out,
            vec![x.0, w.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                let mut dw = Tensor::zeros(vec![n]);
                for row in 0..n {
                    let s = wv.data()[row];
                    let mut acc = E::zero();
                    for col in 0..c {
                        let idx = row * c + col;
                        acc += g.data()[idx] * xv.data()[idx];
                        dx.data_mut()[idx] = g.data()[idx] * s;
                    }
                    dw.data_mut()[row] = acc;
                }
                vec![dx, dw]
            })),
        ))
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul(&bv)?;
        let out = self.finite("matmul", out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = g.matmul_nt(&bv).unwrap();
                let db = av.matmul_tn(g).unwrap();
                vec![da, db]
            })),
        ))
    }

    /// `a[N,K] x b[M,K]^T -> [N,M]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul_nt(&bv)?;
        let out = self.finite("matmul_nt", out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = g.matmul(&bv).unwrap();
                let db = g.transpose2().unwrap().matmul(&av).unwrap();
                vec![da, db]
            })),
        ))
    }

    /// `a[K,N]^T x b[K,M] -> [N,M]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul_tn(&bv)?;
        let out = self.finite("matmul_tn", out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = bv.matmul_nt(g).unwrap();
                let db = av.matmul(g).unwrap();
                vec![da, db]
            })),
        ))
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.map(|x| if x > E::zero() { x } else { E::zero() });
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g
                    .zip_map(&av, "relu_bwd", |gv, x| {
                        if x > E::zero() {
                            gv
                        } else {
                            E::zero()
                        }
                    })
                    .unwrap()]
            })),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| E::one() / (E::one() + (-x).exp()));
        let out = self.finite("sigmoid", out)?;
        let yv = out.clone();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g
                    .zip_map(&yv, "sigmoid_bwd", |gv, y| gv * y * (E::one() - y))
                    .unwrap()]
            })),
        ))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        let out = self.finite("exp", out)?;
        let yv = out.clone();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&yv, "exp_bwd", |gv, y| gv * y).unwrap()]
            })),
        ))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.map(|x| x.ln());
        let out = self.finite("ln", out)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&av, "ln_bwd", |gv, x| gv / x).unwrap()]
            })),
        ))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.map(|x| x.abs());
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g
                    .zip_map(&av, "abs_bwd", |gv, x| {
                        if x > E::zero() {
                            gv
                        } else if x < E::zero() {
                            -gv
                        } else {
                            E::zero()
                        }
                    })
                    .unwrap()]
            })),
        ))
    }

    /// Elementwise `x^p` for real `p`; inputs must keep `x^p` finite.
    pub fn powf(&mut self, a: Var, p: E) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.map(|x| x.powf(p));
        let out = self.finite("powf", out)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g
                    .zip_map(&av, "powf_bwd", |gv, x| gv * p * x.powf(p - E::one()))
                    .unwrap()]
            })),
        ))
    }

    /// Clamps into `[lo, hi]`; gradient passes through strictly inside.
    pub fn clamp(&mut self, a: Var, lo: E, hi: E) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.map(|x| x.max(lo).min(hi));
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g
                    .zip_map(&av, "clamp_bwd", |gv, x| {
                        if x > lo && x < hi {
                            gv
                        } else {
                            E::zero()
                        }
                    })
                    .unwrap()]
            })),
        ))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let rank = av.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank,
            });
        }
        let shape = av.shape().to_vec();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = av.data();
        let mut out = Tensor::zeros(shape.clone());
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut maxv = src[idx(0)];
                for l in 1..lane {
                    maxv = maxv.max(src[idx(l)]);
                }
                let mut total = E::zero();
                for l in 0..lane {
                    let e = (src[idx(l)] - maxv).exp();
                    out.data_mut()[idx(l)] = e;
                    total += e;
                }
                for l in 0..lane {
                    out.data_mut()[idx(l)] = out.data()[idx(l)] / total;
                }
            }
        }
        let out = self.finite("softmax", out)?;
        let yv = out.clone();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                // dx = y * (g - sum(g*y)) per lane
                let mut dx = g.clone();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = E::zero();
                        for l in 0..lane {
                            dot += g.data()[idx(l)] * yv.data()[idx(l)];
                        }
                        for l in 0..lane {
                            let j = idx(l);
                            dx.data_mut()[j] = yv.data()[j] * (g.data()[j] - dot);
                        }
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Joint zero-mean/unit-variance normalization over all axes after the
    /// first `batch_axes` ones. No learned affine.
    pub fn layer_norm(&mut self, a: Var, eps: E, batch_axes: usize) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.layer_norm(eps, batch_axes)?;
        let out = self.finite("layer_norm", out)?;
        let groups: usize = av.shape()[..batch_axes.min(av.rank())].iter().product();
        let group_len = av.numel() / groups.max(1);
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                for grp in 0..groups.max(1) {
                    let range = grp * group_len..(grp + 1) * group_len;
                    let xs = &av.data()[range.clone()];
                    let (mean, var) = mean_var(xs);
                    let s = (var + eps).sqrt();
                    let m = E::lit(group_len as f64);
                    let gs = &g.data()[range.clone()];
                    let mut gmean = E::zero();
                    let mut gxhat = E::zero();
                    for (idx, &gv) in gs.iter().enumerate() {
                        let xhat = (xs[idx] - mean) / s;
                        gmean += gv;
                        gxhat += gv * xhat;
                    }
                    gmean = gmean / m;
                    gxhat = gxhat / m;
                    for (idx, slot) in dx.data_mut()[range].iter_mut().enumerate() {
                        let xhat = (xs[idx] - mean) / s;
                        *slot = (gs[idx] - gmean - xhat * gxhat) / s;
                    }
                }
                vec![dx]
            })),
        ))
    }

    // ---- reductions & shape ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.sum());
        let out = self.finite("sum", out)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![Tensor::filled(shape.clone(), g.data()[0])]
            })),
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.affine(s, E::lit(1.0 / n as f64), E::zero())
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.clone().reshape(old.clone()).unwrap()]
            })),
        ))
    }

    /// Columns `lo..hi` of a `[N,C]` matrix.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (n, c) = self.dims2(a, "slice_cols")?;
        if lo >= hi || hi > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {}..{} of {} columns", lo, hi, c),
            });
        }
        let w = hi - lo;
        let av = self.value(a);
        let mut data = Vec::with_capacity(n * w);
        for row in 0..n {
            data.extend_from_slice(&av.data()[row * c + lo..row * c + hi]);
        }
        let out = Tensor::new(vec![n, w], data)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(vec![n, c]);
                for row in 0..n {
                    for col in 0..w {
                        dx.data_mut()[row * c + lo + col] = g.data()[row * w + col];
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Concatenates `[N,Ci]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".to_string(),
            });
        }
        let mut n = 0;
        let mut widths = Vec::with_capacity(parts.len());
        for (i, &p) in parts.iter().enumerate() {
            let (rows, cols) = self.dims2(p, "concat_cols")?;
            if i == 0 {
                n = rows;
            } else if rows != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", n, rows),
                });
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                data.extend_from_slice(&v.data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let widths_b = widths.clone();
        Ok(self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut grads: Vec<Tensor<E>> = widths_b
                    .iter()
                    .map(|&w| Tensor::zeros(vec![n, w]))
                    .collect();
                for row in 0..n {
                    let mut off = 0;
                    for (gi, &w) in widths_b.iter().enumerate() {
                        for col in 0..w {
                            grads[gi].data_mut()[row * w + col] =
                                g.data()[row * total + off + col];
                        }
                        off += w;
                    }
                }
                grads
            })),
        ))
    }

    /// Selects rows of `[N,C]` by index; repeats allowed (gradients sum).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(a, "gather_rows")?;
        for &i in indices {
            if i >= n {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {} out of {}", i, n),
                });
            }
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        let idx = indices.to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(vec![n, c]);
                for (row, &i) in idx.iter().enumerate() {
                    for col in 0..c {
                        dx.data_mut()[i * c + col] += g.data()[row * c + col];
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Bilinear interpolation of `map: [H,W,C]` at `points: [P,2]` (y, x)
    /// with zero padding outside the grid. Differentiable w.r.t. both the
    /// map values and the sampling coordinates.
    pub fn bilinear_gather(&mut self, map: Var, points: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let (h, w, c) = match ms[..] {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "bilinear_gather",
                    detail: format!("map must be [H,W,C], got {:?}", ms),
                })
            }
        };
        let (p, two) = self.dims2(points, "bilinear_gather")?;
        if two != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_gather",
                detail: format!("points must be [P,2], got [{}, {}]", p, two),
            });
        }
        let mv = self.value(map).clone();
        let pv = self.value(points).clone();
        let mut out = Tensor::zeros(vec![p, c]);
        for pi in 0..p {
            let y = pv.data()[pi * 2].to_f64_lossy();
            let x = pv.data()[pi * 2 + 1].to_f64_lossy();
            for (iy, ix, wgt) in bilinear_weights(y, x) {
                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                    continue;
                }
                let base = (iy as usize * w + ix as usize) * c;
                let wgt = E::lit(wgt);
                for ch in 0..c {
                    out.data_mut()[pi * c + ch] += wgt * mv.data()[base + ch];
                }
            }
        }
        let out = self.finite("bilinear_gather", out)?;
        Ok(self.push(
            out,
            vec![map.0, points.0],
            Some(Box::new(move |g| {
                let mut dmap = Tensor::zeros(vec![h, w, c]);
                let mut dpts = Tensor::zeros(vec![p, 2]);
                for pi in 0..p {
                    let y = pv.data()[pi * 2].to_f64_lossy();
                    let x = pv.data()[pi * 2 + 1].to_f64_lossy();
                    let y0 = y.floor();
                    let x0 = x.floor();
                    let fy = y - y0;
                    let fx = x - x0;
                    // corner index offsets paired with (weight, dw/dy, dw/dx)
                    let corners = [
                        (0i64, 0i64, (1.0 - fy) * (1.0 - fx), -(1.0 - fx), -(1.0 - fy)),
                        (0, 1, (1.0 - fy) * fx, -fx, 1.0 - fy),
                        (1, 0, fy * (1.0 - fx), 1.0 - fx, -fy),
                        (1, 1, fy * fx, fx, fy),
                    ];
                    let mut dy = E::zero();
                    let mut dx = E::zero();
                    for (oy, ox, wgt, dwdy, dwdx) in corners {
                        let iy = y0 as i64 + oy;
                        let ix = x0 as i64 + ox;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * c;
                        let (wgt, dwdy, dwdx) = (E::lit(wgt), E::lit(dwdy), E::lit(dwdx));
                        for ch in 0..c {
                            let gv = g.data()[pi * c + ch];
                            dmap.data_mut()[base + ch] += wgt * gv;
                            dy += dwdy * mv.data()[base + ch] * gv;
                            dx += dwdx * mv.data()[base + ch] * gv;
                        }
                    }
                    dpts.data_mut()[pi * 2] = dy;
                    dpts.data_mut()[pi * 2 + 1] = dx;
                }
                vec![dmap, dpts]
            })),
        ))
    }

    /// 2-D convolution of `x: [H,W,Cin]` with `w: [KH,KW,Cin,Cout]`,
    /// zero padding `pad`, square stride.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (h, wd, cin) = match xs[..] {
            [a, b, c] => (a, b, c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("input must be [H,W,Cin], got {:?}", xs),
                })
            }
        };
        let (kh, kw, cin2, cout) = match ws[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("kernel must be [KH,KW,Cin,Cout], got {:?}", ws),
                })
            }
        };
        if cin != cin2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("channels {} vs kernel {}", cin, cin2),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "kernel larger than padded input or zero stride".to_string(),
            });
        }
        if let Some(bias) = b {
            if self.shape(bias) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?} for {} outputs", self.shape(bias), cout),
                });
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = b.map(|bias| self.value(bias).clone());
        let mut out = Tensor::zeros(vec![ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= wd as i64 {
                            continue;
                        }
                        let xbase = (iy as usize * wd + ix as usize) * cin;
                        let wbase = (ky * kw + kx) * cin * cout;
                        for ic in 0..cin {
                            let xval = xv.data()[xbase + ic];
                            if xval == E::zero() {
                                continue;
                            }
                            let wrow = &wv.data()[wbase + ic * cout..wbase + (ic + 1) * cout];
                            let obase = (oy * wo + ox) * cout;
                            for (oc, &wval) in wrow.iter().enumerate() {
                                out.data_mut()[obase + oc] += xval * wval;
                            }
                        }
                    }
                }
                if let Some(bvv) = &bv {
                    let obase = (oy * wo + ox) * cout;
                    for oc in 0..cout {
                        out.data_mut()[obase + oc] += bvv.data()[oc];
                    }
                }
            }
        }
        let out = self.finite("conv2d", out)?;
        let mut parents = vec![x.0, w.0];
        if let Some(bias) = b {
            parents.push(bias.0);
        }
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(vec![h, wd, cin]);
                let mut dw = Tensor::zeros(vec![kh, kw, cin, cout]);
                let mut db = Tensor::zeros(vec![cout]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let obase = (oy * wo + ox) * cout;
                        for oc in 0..cout {
                            db.data_mut()[oc] += g.data()[obase + oc];
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                let xbase = (iy as usize * wd + ix as usize) * cin;
                                let wbase = (ky * kw + kx) * cin * cout;
                                for ic in 0..cin {
                                    let xval = xv.data()[xbase + ic];
                                    for oc in 0..cout {
                                        let gv = g.data()[obase + oc];
                                        dw.data_mut()[wbase + ic * cout + oc] += xval * gv;
                                        dx.data_mut()[xbase + ic] +=
                                            wv.data()[wbase + ic * cout + oc] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(db);
                }
                grads
            })),
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar output. Returns gradients for every
    /// node the output depends on.
    pub fn backward(&self, output: Var) -> Result<Gradients<E>> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!(
                    "output must be scalar, got shape {:?}",
                    self.shape(output)
                ),
            });
        }
        if !self.recording {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "tape was created with no_grad".to_string(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape().to_vec(), E::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let contributions = back(&g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                match &mut grads[*parent] {
                    Some(acc) => {
                        for (dst, &src) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *dst += src;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn dims2(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(a) {
            &[n, c] => Ok((n, c)),
            other => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got {:?}", other),
            }),
        }
    }
}

/// Per-position linear projection `x[N,Cin] x W[Cin,Cout] (+ b)`.
pub fn linear_map<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(bias) => tape.add_row(y, bias),
        None => Ok(y),
    }
}
