//! Guided transformer encoding of the ReID-specific features.
//!
//! The encoder blocks follow the usual attention + FFN layout, but the
//! attention is deformable: each query predicts offsets to a handful of
//! key samples, reads them off the key map with bilinear interpolation,
//! and softmax-weights them. Cost is linear in the number of positions,
//! against the quadratic dense dot-product attention kept here as a
//! reference implementation for equivalence and scaling tests.

use crate::gcd::batched;
use crate::tensor::{Element, Gradients, Parameter, Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_KEY_SAMPLES: usize = 9;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Weights of one deformable attention layer.
///
/// Offsets, attention logits and keys are all predicted from the input by
/// per-position projections. `offset_proj` produces two channels (dy, dx)
/// per key sample and head and starts at zero so the first iteration
/// samples each query's own location.
#[derive(Clone, Debug)]
pub struct DeformAttnParams<E: Element> {
    pub offset_proj: Parameter<E>, // [C, 2*Nk*Nh]
    pub key_proj: Parameter<E>,    // [C, C]
    pub attn_proj: Parameter<E>,   // [C, Nk*Nh]
    pub value_proj: Parameter<E>,  // [C, C], head h owns columns h*dh..(h+1)*dh
    pub out_proj: Parameter<E>,    // [C, C]
    pub n_heads: usize,
    pub n_keys: usize,
}

impl<E: Element> DeformAttnParams<E> {
    pub fn new<R: rand::Rng>(channels: usize, n_heads: usize, n_keys: usize, rng: &mut R) -> Self {
        assert!(n_keys >= 1, "need at least one key sample");
        assert!(
            n_heads >= 1 && channels.is_multiple_of(n_heads),
            "channels must divide into heads"
        );
        DeformAttnParams {
            offset_proj: Parameter::zeros(vec![channels, 2 * n_keys * n_heads]),
            key_proj: Parameter::fan_in_uniform(vec![channels, channels], rng),
            attn_proj: Parameter::fan_in_uniform(vec![channels, n_keys * n_heads], rng),
            value_proj: Parameter::fan_in_uniform(vec![channels, channels], rng),
            out_proj: Parameter::fan_in_uniform(vec![channels, channels], rng),
            n_heads,
            n_keys,
        }
    }

    pub fn channels(&self) -> usize {
        self.key_proj.value.shape()[0]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![
            &mut self.offset_proj,
            &mut self.key_proj,
            &mut self.attn_proj,
            &mut self.value_proj,
            &mut self.out_proj,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> DeformAttnVars {
        DeformAttnVars {
            offset_proj: tape.leaf(self.offset_proj.value.clone()),
            key_proj: tape.leaf(self.key_proj.value.clone()),
            attn_proj: tape.leaf(self.attn_proj.value.clone()),
            value_proj: tape.leaf(self.value_proj.value.clone()),
            out_proj: tape.leaf(self.out_proj.value.clone()),
            n_heads: self.n_heads,
            n_keys: self.n_keys,
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &DeformAttnVars) {
        grads.accumulate(vars.offset_proj, &mut self.offset_proj);
        grads.accumulate(vars.key_proj, &mut self.key_proj);
        grads.accumulate(vars.attn_proj, &mut self.attn_proj);
        grads.accumulate(vars.value_proj, &mut self.value_proj);
        grads.accumulate(vars.out_proj, &mut self.out_proj);
    }
}

#[derive(Clone, Copy)]
pub struct DeformAttnVars {
    pub offset_proj: Var,
    pub key_proj: Var,
    pub attn_proj: Var,
    pub value_proj: Var,
    pub out_proj: Var,
    pub n_heads: usize,
    pub n_keys: usize,
}

/// One encoder block: deformable attention and a two-layer FFN, each with
/// a residual connection followed by layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams<E: Element> {
    pub attn: DeformAttnParams<E>,
    pub ffn_w1: Parameter<E>, // [C, F]
    pub ffn_b1: Parameter<E>, // [F]
    pub ffn_w2: Parameter<E>, // [F, C]
    pub ffn_b2: Parameter<E>, // [C]
    pub epsilon: E,
}

impl<E: Element> EncoderBlockParams<E> {
    /// FFN hidden width defaults to `4 * channels`.
    pub fn new<R: rand::Rng>(channels: usize, n_heads: usize, n_keys: usize, rng: &mut R) -> Self {
        Self::with_ffn_width(channels, n_heads, n_keys, 4 * channels, rng)
    }

    pub fn with_ffn_width<R: rand::Rng>(
        channels: usize,
        n_heads: usize,
        n_keys: usize,
        ffn_width: usize,
        rng: &mut R,
    ) -> Self {
        EncoderBlockParams {
            attn: DeformAttnParams::new(channels, n_heads, n_keys, rng),
            ffn_w1: Parameter::fan_in_uniform(vec![channels, ffn_width], rng),
            ffn_b1: Parameter::zeros(vec![ffn_width]),
            ffn_w2: Parameter::fan_in_uniform(vec![ffn_width, channels], rng),
            ffn_b2: Parameter::zeros(vec![channels]),
            epsilon: E::lit(DEFAULT_EPSILON),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = self.attn.params_mut();
        out.push(&mut self.ffn_w1);
        out.push(&mut self.ffn_b1);
        out.push(&mut self.ffn_w2);
        out.push(&mut self.ffn_b2);
        out
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> EncoderBlockVars<E> {
        EncoderBlockVars {
            attn: self.attn.bind(tape),
            ffn_w1: tape.leaf(self.ffn_w1.value.clone()),
            ffn_b1: tape.leaf(self.ffn_b1.value.clone()),
            ffn_w2: tape.leaf(self.ffn_w2.value.clone()),
            ffn_b2: tape.leaf(self.ffn_b2.value.clone()),
            epsilon: self.epsilon,
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &EncoderBlockVars<E>) {
        self.attn.accumulate(grads, &vars.attn);
        grads.accumulate(vars.ffn_w1, &mut self.ffn_w1);
        grads.accumulate(vars.ffn_b1, &mut self.ffn_b1);
        grads.accumulate(vars.ffn_w2, &mut self.ffn_w2);
        grads.accumulate(vars.ffn_b2, &mut self.ffn_b2);
    }
}

#[derive(Clone, Copy)]
pub struct EncoderBlockVars<E: Element> {
    pub attn: DeformAttnVars,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub epsilon: E,
}

/// Dense dot-product attention weights, one set per head. Reference
/// implementation only: cost grows with the square of the position count.
#[derive(Clone, Debug)]
pub struct DenseAttnParams<E: Element> {
    pub query_proj: Vec<Parameter<E>>, // per head [C, dh]
    pub key_proj: Vec<Parameter<E>>,   // per head [C, dh]
    pub value_proj: Vec<Parameter<E>>, // per head [C, dh]
    pub out_proj: Vec<Parameter<E>>,   // per head [dh, C]
    pub rho: E,
}

impl<E: Element> DenseAttnParams<E> {
    /// `rho` defaults to `sqrt(C / n_heads)`.
    pub fn new<R: rand::Rng>(channels: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(n_heads >= 1 && channels.is_multiple_of(n_heads));
        let dh = channels / n_heads;
        DenseAttnParams {
            query_proj: (0..n_heads)
                .map(|_| Parameter::fan_in_uniform(vec![channels, dh], rng))
                .collect(),
            key_proj: (0..n_heads)
                .map(|_| Parameter::fan_in_uniform(vec![channels, dh], rng))
                .collect(),
            value_proj: (0..n_heads)
                .map(|_| Parameter::fan_in_uniform(vec![channels, dh], rng))
                .collect(),
            out_proj: (0..n_heads)
                .map(|_| Parameter::fan_in_uniform(vec![dh, channels], rng))
                .collect(),
            rho: E::lit((dh as f64).sqrt()),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.query_proj.len()
    }
}

/// Full encoder stack plus the linear head mapping channels to the
/// embedding dimension.
#[derive(Clone, Debug)]
pub struct GteParams<E: Element> {
    pub blocks: Vec<EncoderBlockParams<E>>,
    pub embed_proj: Parameter<E>, // [C, D]
}

impl<E: Element> GteParams<E> {
    pub fn new<R: rand::Rng>(
        channels: usize,
        n_blocks: usize,
        n_heads: usize,
        n_keys: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(n_blocks >= 1, "need at least one encoder block");
        GteParams {
            blocks: (0..n_blocks)
                .map(|_| EncoderBlockParams::new(channels, n_heads, n_keys, rng))
                .collect(),
            embed_proj: Parameter::fan_in_uniform(vec![channels, embed_dim], rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_proj.value.shape()[1]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.embed_proj);
        out
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> GteVars<E> {
        GteVars {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            embed_proj: tape.leaf(self.embed_proj.value.clone()),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &GteVars<E>) {
        for (b, v) in self.blocks.iter_mut().zip(&vars.blocks) {
            b.accumulate(grads, v);
        }
        grads.accumulate(vars.embed_proj, &mut self.embed_proj);
    }
}

#[derive(Clone)]
pub struct GteVars<E: Element> {
    pub blocks: Vec<EncoderBlockVars<E>>,
    pub embed_proj: Var,
}

/// Base coordinates `(y, x)` of every position of an `h x w` grid,
/// row-major, as a `[h*w, 2]` tensor.
pub fn base_grid<E: Element>(h: usize, w: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(E::lit(y as f64));
            data.push(E::lit(x as f64));
        }
    }
    Tensor::new(vec![h * w, 2], data).expect("grid shape is consistent")
}

/// Per-query sampling offsets `[HW, 2*Nk*Nh]`; pair `(h, k)` owns columns
/// `(h*Nk + k)*2` (dy) and `+1` (dx). Offsets are unconstrained reals.
pub fn predict_offsets<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    vars: &DeformAttnVars,
) -> Result<Var> {
    tape.matmul(x, vars.offset_proj)
}

/// Forward-only offset prediction reshaped to `[H,W,Nh,Nk,2]`.
pub fn predict_offsets_map<E: Element>(
    params: &DeformAttnParams<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (h, w, c) = expect_map(x, "predict_offsets_map")?;
    let mut tape = Tape::no_grad();
    let flat = tape.leaf(x.clone().reshape(vec![h * w, c])?);
    let vars = params.bind(&mut tape);
    let out = predict_offsets(&mut tape, flat, &vars)?;
    tape.value(out)
        .clone()
        .reshape(vec![h, w, params.n_heads, params.n_keys, 2])
}

/// Key sample vectors for one query: bilinear reads of the key map at
/// `query + offset`, out-of-range positions contributing zeros.
pub fn sample_keys<E: Element>(
    key_map: &Tensor<E>,
    query: (f64, f64),
    offsets: &[(f64, f64)],
) -> Result<Vec<Vec<E>>> {
    offsets
        .iter()
        .map(|&(dy, dx)| key_map.bilinear_sample(query.0 + dy, query.1 + dx))
        .collect()
}

/// Deformable attention over a flattened `h x w` map.
///
/// Per query and head: `Nk` offsets from the offset projection select key
/// samples off the key map; logits from the attention projection at the
/// query position are softmax-normalized over the samples; the weighted,
/// value-projected samples concatenate across heads and pass through the
/// output projection.
pub fn deformable_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    h: usize,
    w: usize,
    vars: &DeformAttnVars,
) -> Result<Var> {
    let (positions, channels) = match tape.shape(x) {
        &[n, c] => (n, c),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "deformable_attention",
                detail: format!("expected [HW,C], got {:?}", other),
            })
        }
    };
    if positions != h * w {
        return Err(TensorError::ShapeMismatch {
            op: "deformable_attention",
            detail: format!("{} positions vs {}x{} grid", positions, h, w),
        });
    }
    let (n_heads, n_keys) = (vars.n_heads, vars.n_keys);
    let dh = channels / n_heads;
    let grid = base_grid::<E>(h, w);

    let offsets = predict_offsets(tape, x, vars)?;
    let keys_flat = tape.matmul(x, vars.key_proj)?;
    let logits_all = tape.matmul(x, vars.attn_proj)?;

    let mut head_outputs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let logits = tape.slice_cols(logits_all, head * n_keys, (head + 1) * n_keys)?;
        let attn = tape.softmax(logits, 1)?;
        // interpolation is linear in the map values, so projecting the
        // key map into head value space once and sampling that is the
        // same aggregation with a fraction of the sampled data
        let value_cols = tape.slice_cols(vars.value_proj, head * dh, (head + 1) * dh)?;
        let value_flat = tape.matmul(keys_flat, value_cols)?;
        let value_map = tape.reshape(value_flat, vec![h, w, dh])?;
        let mut acc: Option<Var> = None;
        for key in 0..n_keys {
            let pair = (head * n_keys + key) * 2;
            let delta = tape.slice_cols(offsets, pair, pair + 2)?;
            let points = tape.add_const(delta, &grid)?;
            let sampled = tape.bilinear_gather(value_map, points)?;
            let weight_col = tape.slice_cols(attn, key, key + 1)?;
            let weights = tape.reshape(weight_col, vec![positions])?;
            let weighted = tape.scale_rows(sampled, weights)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, weighted)?,
                None => weighted,
            });
        }
        head_outputs.push(acc.expect("n_keys >= 1"));
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, vars.out_proj)
}

/// Forward-only deformable attention on a `[H,W,C]` map.
pub fn deformable_attention_map<E: Element>(
    params: &DeformAttnParams<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (h, w, c) = expect_map(x, "deformable_attention_map")?;
    let mut tape = Tape::no_grad();
    let flat = tape.leaf(x.clone().reshape(vec![h * w, c])?);
    let vars = params.bind(&mut tape);
    let out = deformable_attention(&mut tape, flat, h, w, &vars)?;
    tape.value(out).clone().reshape(vec![h, w, c])
}

/// Dense dot-product attention over all position pairs (the quadratic
/// reference). Per-head attention matrices are available separately
/// through [`dense_attention_weights`].
pub fn dense_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    params: &DenseAttnParams<E>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for head in 0..params.n_heads() {
        let q_proj = tape.leaf(params.query_proj[head].value.clone());
        let k_proj = tape.leaf(params.key_proj[head].value.clone());
        let v_proj = tape.leaf(params.value_proj[head].value.clone());
        let o_proj = tape.leaf(params.out_proj[head].value.clone());
        let queries = tape.matmul(x, q_proj)?;
        // dividing the queries by rho up front spares a full-size copy
        // of the quadratic logit matrix
        let queries = tape.affine(queries, E::one() / params.rho, E::zero())?;
        let keys = tape.matmul(x, k_proj)?;
        let logits = tape.matmul_nt(queries, keys)?;
        let attn = tape.softmax(logits, 1)?;
        let values = tape.matmul(x, v_proj)?;
        let context = tape.matmul(attn, values)?;
        let head_out = tape.matmul(context, o_proj)?;
        total = Some(match total {
            Some(prev) => tape.add(prev, head_out)?,
            None => head_out,
        });
    }
    total.ok_or_else(|| TensorError::Invalid {
        op: "dense_attention",
        msg: "no heads".to_string(),
    })
}

/// Per-head dense attention matrices `[HW,HW]`, rows softmax-normalized.
pub fn dense_attention_weights<E: Element>(
    params: &DenseAttnParams<E>,
    x: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let (h, w, c) = expect_map(x, "dense_attention_weights")?;
    let mut out = Vec::with_capacity(params.n_heads());
    for head in 0..params.n_heads() {
        let mut tape = Tape::no_grad();
        let flat = tape.leaf(x.clone().reshape(vec![h * w, c])?);
        let q_proj = tape.leaf(params.query_proj[head].value.clone());
        let k_proj = tape.leaf(params.key_proj[head].value.clone());
        let queries = tape.matmul(flat, q_proj)?;
        let queries = tape.affine(queries, E::one() / params.rho, E::zero())?;
        let keys = tape.matmul(flat, k_proj)?;
        let logits = tape.matmul_nt(queries, keys)?;
        let attn = tape.softmax(logits, 1)?;
        out.push(tape.value(attn).clone());
    }
    Ok(out)
}

/// Forward-only dense attention on a `[H,W,C]` map.
pub fn dense_attention_map<E: Element>(
    params: &DenseAttnParams<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (h, w, c) = expect_map(x, "dense_attention_map")?;
    let mut tape = Tape::no_grad();
    let flat = tape.leaf(x.clone().reshape(vec![h * w, c])?);
    let out = dense_attention(&mut tape, flat, params)?;
    tape.value(out).clone().reshape(vec![h, w, c])
}

/// Residual-then-normalize encoder block.
pub fn encoder_block<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    h: usize,
    w: usize,
    vars: &EncoderBlockVars<E>,
) -> Result<Var> {
    let attn_out = deformable_attention(tape, x, h, w, &vars.attn)?;
    let res = tape.add(x, attn_out)?;
    let y = tape.layer_norm(res, vars.epsilon, 0)?;

    let hidden = tape.matmul(y, vars.ffn_w1)?;
    let hidden = tape.add_row(hidden, vars.ffn_b1)?;
    let hidden = tape.relu(hidden)?;
    let ffn = tape.matmul(hidden, vars.ffn_w2)?;
    let ffn = tape.add_row(ffn, vars.ffn_b2)?;
    let res2 = tape.add(y, ffn)?;
    tape.layer_norm(res2, vars.epsilon, 0)
}

/// Encoder stack plus embedding head on a flattened map, recorded on the
/// given tape.
pub fn gte_forward_on_tape<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    h: usize,
    w: usize,
    vars: &GteVars<E>,
) -> Result<Var> {
    let mut cur = x;
    for block in &vars.blocks {
        cur = encoder_block(tape, cur, h, w, block)?;
    }
    tape.matmul(cur, vars.embed_proj)
}

/// Embedding maps for a batch: `[B,H,W,C] -> [B,H,W,D]`, forward only.
pub fn gte_forward<E: Element>(params: &GteParams<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, h, w, _) = match x.shape() {
        &[b, h, w, c] => (b, h, w, c),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "gte_forward",
                detail: format!("expected [B,H,W,C], got {:?}", other),
            })
        }
    };
    let d = params.embed_dim();
    let out = batched(x, |tape, item| {
        let vars = params.bind(tape);
        gte_forward_on_tape(tape, item, h, w, &vars)
    })?;
    out.reshape(vec![b, h, w, d])
}

fn expect_map<E: Element>(x: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected [H,W,C], got {:?}", other),
        }),
    }
}
