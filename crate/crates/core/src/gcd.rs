//! Global context disentangling: pool one context vector per image with
//! softmax attention over positions, push it through two small residual
//! branches, and broadcast the results back onto the features to obtain
//! detection-specific and ReID-specific maps.
//!
//! The post-pooling transform touches only the context vector, so its
//! cost is independent of the spatial extent of the input.

use crate::tensor::{Element, Parameter, Result, Tape, Tensor, TensorError, Var};

/// Weights of the disentangling block.
///
/// `w_k` scores positions for the context pool; `w_d1/w_d2` and
/// `w_r1/w_r2` are the detection and ReID branch bottlenecks. The second
/// matrix of each branch starts at zero so the block begins as an
/// identity map.
#[derive(Clone, Debug)]
pub struct GcdParams<E: Element> {
    pub w_k: Parameter<E>,
    pub w_d1: Parameter<E>,
    pub w_d2: Parameter<E>,
    pub w_r1: Parameter<E>,
    pub w_r2: Parameter<E>,
    pub epsilon: E,
}

/// Detection-specific and ReID-specific feature maps, same shape as the
/// input.
#[derive(Clone, Debug)]
pub struct DisentangledFeatures<E: Element> {
    pub det: Tensor<E>,
    pub reid: Tensor<E>,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Default bottleneck width: a squeeze ratio of 4.
pub fn default_bottleneck(channels: usize) -> usize {
    (channels / 4).max(1)
}

impl<E: Element> GcdParams<E> {
    pub fn new<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        Self::with_bottleneck(channels, default_bottleneck(channels), E::lit(DEFAULT_EPSILON), rng)
    }

    pub fn with_bottleneck<R: rand::Rng>(
        channels: usize,
        mid: usize,
        epsilon: E,
        rng: &mut R,
    ) -> Self {
        assert!(mid >= 1, "bottleneck width must be at least 1");
        assert!(epsilon > E::zero(), "epsilon must be positive");
        GcdParams {
            w_k: Parameter::fan_in_uniform(vec![channels, 1], rng),
            w_d1: Parameter::fan_in_uniform(vec![channels, mid], rng),
            w_d2: Parameter::zeros(vec![mid, channels]),
            w_r1: Parameter::fan_in_uniform(vec![channels, mid], rng),
            w_r2: Parameter::zeros(vec![mid, channels]),
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_k.value.shape()[0]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![
            &mut self.w_k,
            &mut self.w_d1,
            &mut self.w_d2,
            &mut self.w_r1,
            &mut self.w_r2,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> GcdVars<E> {
        GcdVars {
            w_k: tape.leaf(self.w_k.value.clone()),
            w_d1: tape.leaf(self.w_d1.value.clone()),
            w_d2: tape.leaf(self.w_d2.value.clone()),
            w_r1: tape.leaf(self.w_r1.value.clone()),
            w_r2: tape.leaf(self.w_r2.value.clone()),
            epsilon: self.epsilon,
        }
    }

    /// Pulls gradients of the bound leaves back into the parameters.
    pub fn accumulate(&mut self, grads: &crate::tensor::Gradients<E>, vars: &GcdVars<E>) {
        grads.accumulate(vars.w_k, &mut self.w_k);
        grads.accumulate(vars.w_d1, &mut self.w_d1);
        grads.accumulate(vars.w_d2, &mut self.w_d2);
        grads.accumulate(vars.w_r1, &mut self.w_r1);
        grads.accumulate(vars.w_r2, &mut self.w_r2);
    }
}

/// Tape handles for one forward pass of the block.
#[derive(Clone, Copy)]
pub struct GcdVars<E: Element> {
    pub w_k: Var,
    pub w_d1: Var,
    pub w_d2: Var,
    pub w_r1: Var,
    pub w_r2: Var,
    pub epsilon: E,
}

/// Softmax-pooled context vector of one image: positions `x: [Np,C]`
/// are scored by `w_k`, and the scores weight a sum over positions.
/// Costs one pass over the map.
pub fn context_vector<E: Element>(tape: &mut Tape<E>, x: Var, w_k: Var) -> Result<Var> {
    let logits = tape.matmul(x, w_k)?; // [Np,1]
    let weights = tape.softmax(logits, 0)?;
    tape.matmul_tn(weights, x) // [1,C]
}

/// One branch of the disentangler: bottleneck, layer norm, ReLU, expand.
fn branch_vector<E: Element>(
    tape: &mut Tape<E>,
    z: Var,
    w1: Var,
    w2: Var,
    epsilon: E,
) -> Result<Var> {
    let squeezed = tape.matmul(z, w1)?; // [1,mid]
    let normed = tape.layer_norm(squeezed, epsilon, 1)?;
    let active = tape.relu(normed)?;
    tape.matmul(active, w2) // [1,C]
}

/// The post-pooling transform alone: turns a context vector `z: [1,C]`
/// into the two branch vectors. Its cost depends only on the channel and
/// bottleneck widths, never on the spatial extent the context came from.
pub fn branch_vectors<E: Element>(
    tape: &mut Tape<E>,
    z: Var,
    vars: &GcdVars<E>,
) -> Result<(Var, Var)> {
    let det = branch_vector(tape, z, vars.w_d1, vars.w_d2, vars.epsilon)?;
    let reid = branch_vector(tape, z, vars.w_r1, vars.w_r2, vars.epsilon)?;
    Ok((det, reid))
}

/// Splits one image's features `x: [Np,C]` into detection and ReID maps.
/// The branch outputs are identical at every position (broadcast add).
pub fn disentangle<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    vars: &GcdVars<E>,
) -> Result<(Var, Var)> {
    let (rows, channels) = match tape.shape(x) {
        &[n, c] => (n, c),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "disentangle",
                detail: format!("expected [Np,C], got {:?}", other),
            })
        }
    };
    if tape.shape(vars.w_k) != [channels, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "disentangle",
            detail: format!(
                "features [{},{}] against w_k {:?}",
                rows,
                channels,
                tape.shape(vars.w_k)
            ),
        });
    }
    let z = context_vector(tape, x, vars.w_k)?;
    let (det_vec, reid_vec) = branch_vectors(tape, z, vars)?;
    let det_row = tape.reshape(det_vec, vec![channels])?;
    let reid_row = tape.reshape(reid_vec, vec![channels])?;
    let det = tape.add_row(x, det_row)?;
    let reid = tape.add_row(x, reid_row)?;
    Ok((det, reid))
}

/// Batched context vectors for `x: [B,H,W,C] -> [B,C]`, forward only.
pub fn context_vector_map<E: Element>(params: &GcdParams<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    batched(x, |tape, item| {
        let w_k = tape.leaf(params.w_k.value.clone());
        context_vector(tape, item, w_k)
    })
}

/// Batched disentangling for `x: [B,H,W,C]`, forward only.
pub fn disentangle_map<E: Element>(
    params: &GcdParams<E>,
    x: &Tensor<E>,
) -> Result<DisentangledFeatures<E>> {
    let shape = x.shape().to_vec();
    let det = batched(x, |tape, item| {
        let vars = params.bind(tape);
        disentangle(tape, item, &vars).map(|(d, _)| d)
    })?;
    let reid = batched(x, |tape, item| {
        let vars = params.bind(tape);
        disentangle(tape, item, &vars).map(|(_, r)| r)
    })?;
    Ok(DisentangledFeatures {
        det: det.reshape(shape.clone())?,
        reid: reid.reshape(shape)?,
    })
}

/// Runs a per-image tape function over each item of `[B,H,W,C]` and
/// restacks the results with the batch axis first.
pub(crate) fn batched<E: Element>(
    x: &Tensor<E>,
    f: impl Fn(&mut Tape<E>, Var) -> Result<Var>,
) -> Result<Tensor<E>> {
    let (b, h, w, c) = match x.shape() {
        &[b, h, w, c] => (b, h, w, c),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "batched",
                detail: format!("expected [B,H,W,C], got {:?}", other),
            })
        }
    };
    let mut items = Vec::with_capacity(b);
    for bi in 0..b {
        let mut tape = Tape::no_grad();
        let item = tape.leaf(x.batch_item(bi)?.reshape(vec![h * w, c])?);
        let out = f(&mut tape, item)?;
        items.push(tape.value(out).clone());
    }
    Tensor::stack(&items)
}

/// Linear projection of each position, shared with the heads; re-exported
/// here because the block is specified in terms of 1x1 projections.
pub use crate::tensor::tape::linear_map as position_linear;
