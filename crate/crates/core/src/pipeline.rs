//! End-to-end neural path: backbone features, context disentangling,
//! detection heads on the detection-specific map, encoder embeddings on
//! the ReID-specific map, and peak decoding into per-frame observations.

use crate::assoc::embeddings_at_centers;
use crate::backbone::{backbone_forward, Backbone, BackboneVars};
use crate::config::Config;
use crate::detect::{decode, Detection, STRIDE};
use crate::gcd::{disentangle, GcdParams, GcdVars};
use crate::gte::{gte_forward_on_tape, GteParams, GteVars};
use crate::tensor::{Element, Gradients, Parameter, Result, Tape, Tensor, TensorError, Var};

/// Per-position linear head over channels (a 1x1 projection).
#[derive(Clone, Debug)]
pub struct LinearHead<E: Element> {
    pub weight: Parameter<E>, // [Cin, Cout]
    pub bias: Parameter<E>,   // [Cout]
}

impl<E: Element> LinearHead<E> {
    pub fn new<R: rand::Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        LinearHead {
            weight: Parameter::fan_in_uniform(vec![c_in, c_out], rng),
            bias: Parameter::zeros(vec![c_out]),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> LinearHeadVars {
        LinearHeadVars {
            weight: tape.leaf(self.weight.value.clone()),
            bias: tape.leaf(self.bias.value.clone()),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &LinearHeadVars) {
        grads.accumulate(vars.weight, &mut self.weight);
        grads.accumulate(vars.bias, &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct LinearHeadVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn linear_head_forward<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    vars: &LinearHeadVars,
) -> Result<Var> {
    let y = tape.matmul(x, vars.weight)?;
    tape.add_row(y, vars.bias)
}

/// Dimensions of the pipeline; decode thresholds ride along.
#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub bottleneck: usize,
    pub heads: usize,
    pub key_samples: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub score_thresh: f64,
    pub max_detections: usize,
}

impl PipelineConfig {
    pub fn from_config(cfg: &Config) -> Self {
        PipelineConfig {
            in_channels: 3,
            channels: cfg.channels,
            bottleneck: cfg.bottleneck,
            heads: cfg.heads,
            key_samples: cfg.key_samples,
            blocks: cfg.blocks,
            embed_dim: cfg.embedding_dim,
            score_thresh: cfg.score_thresh,
            max_detections: cfg.max_detections,
        }
    }
}

/// All weights of the neural path.
#[derive(Clone, Debug)]
pub struct PipelineParams<E: Element> {
    pub cfg: PipelineConfig,
    pub backbone: Backbone<E>,
    pub gcd: GcdParams<E>,
    pub heat_head: LinearHead<E>,
    pub size_head: LinearHead<E>,
    pub offset_head: LinearHead<E>,
    pub gte: GteParams<E>,
}

impl<E: Element> PipelineParams<E> {
    pub fn new<R: rand::Rng>(cfg: PipelineConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        PipelineParams {
            cfg,
            backbone: Backbone::new(cfg.in_channels, c, rng),
            gcd: GcdParams::with_bottleneck(
                c,
                cfg.bottleneck.max(1),
                E::lit(crate::gcd::DEFAULT_EPSILON),
                rng,
            ),
            heat_head: LinearHead::new(c, 1, rng),
            size_head: LinearHead::new(c, 2, rng),
            offset_head: LinearHead::new(c, 2, rng),
            gte: GteParams::new(c, cfg.blocks, cfg.heads, cfg.key_samples, cfg.embed_dim, rng),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = Vec::new();
        out.extend(self.backbone.params_mut());
        out.extend(self.gcd.params_mut());
        out.extend(self.heat_head.params_mut());
        out.extend(self.size_head.params_mut());
        out.extend(self.offset_head.params_mut());
        out.extend(self.gte.params_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> PipelineVars<E> {
        PipelineVars {
            backbone: self.backbone.bind(tape),
            gcd: self.gcd.bind(tape),
            heat_head: self.heat_head.bind(tape),
            size_head: self.size_head.bind(tape),
            offset_head: self.offset_head.bind(tape),
            gte: self.gte.bind(tape),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &PipelineVars<E>) {
        self.backbone.accumulate(grads, &vars.backbone);
        self.gcd.accumulate(grads, &vars.gcd);
        self.heat_head.accumulate(grads, &vars.heat_head);
        self.size_head.accumulate(grads, &vars.size_head);
        self.offset_head.accumulate(grads, &vars.offset_head);
        self.gte.accumulate(grads, &vars.gte);
    }
}

#[derive(Clone)]
pub struct PipelineVars<E: Element> {
    pub backbone: BackboneVars,
    pub gcd: GcdVars<E>,
    pub heat_head: LinearHeadVars,
    pub size_head: LinearHeadVars,
    pub offset_head: LinearHeadVars,
    pub gte: GteVars<E>,
}

/// Tape handles of the predicted maps, all flattened over the grid.
pub struct MapVars {
    /// Heatmap probabilities after the sigmoid, `[Np,1]`.
    pub heat: Var,
    /// Per-cell `(w, h)` size predictions, `[Np,2]`.
    pub sizes: Var,
    /// Per-cell `(ox, oy)` sub-stride offsets, `[Np,2]`.
    pub offsets: Var,
    /// Embedding map, `[Np,D]`.
    pub embeddings: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Records the full forward pass of one `[H,W,Cin]` image.
pub fn forward_maps<E: Element>(
    tape: &mut Tape<E>,
    image: Var,
    vars: &PipelineVars<E>,
) -> Result<MapVars> {
    let features = backbone_forward(tape, image, &vars.backbone)?;
    let (gh, gw, c) = match tape.shape(features) {
        &[h, w, c] => (h, w, c),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "forward_maps",
                detail: format!("backbone produced {:?}", other),
            })
        }
    };
    let flat = tape.reshape(features, vec![gh * gw, c])?;
    let (det_features, reid_features) = disentangle(tape, flat, &vars.gcd)?;

    let heat_logits = linear_head_forward(tape, det_features, &vars.heat_head)?;
    let heat = tape.sigmoid(heat_logits)?;
    let sizes = linear_head_forward(tape, det_features, &vars.size_head)?;
    let offsets = linear_head_forward(tape, det_features, &vars.offset_head)?;
    let embeddings = gte_forward_on_tape(tape, reid_features, gh, gw, &vars.gte)?;
    Ok(MapVars {
        heat,
        sizes,
        offsets,
        embeddings,
        grid_h: gh,
        grid_w: gw,
    })
}

/// Inference on one image: decoded detections plus their unit
/// embeddings. Forward only.
pub fn infer_frame<E: Element>(
    params: &PipelineParams<E>,
    image: &Tensor<E>,
) -> Result<(Vec<Detection>, Vec<Vec<f64>>)> {
    let mut tape = Tape::no_grad();
    let image_var = tape.leaf(image.clone());
    let vars = params.bind(&mut tape);
    let maps = forward_maps(&mut tape, image_var, &vars)?;
    let (gh, gw) = (maps.grid_h, maps.grid_w);

    let heat = tape.value(maps.heat).clone().reshape(vec![gh, gw])?;
    let sizes = tape.value(maps.sizes).clone().reshape(vec![gh, gw, 2])?;
    let offsets = tape.value(maps.offsets).clone().reshape(vec![gh, gw, 2])?;
    let emb_map = tape
        .value(maps.embeddings)
        .clone()
        .reshape(vec![gh, gw, params.cfg.embed_dim])?;

    let detections = decode(
        &heat,
        &offsets,
        &sizes,
        params.cfg.max_detections,
        params.cfg.score_thresh,
    );
    let embeddings = embeddings_at_centers(&emb_map, &detections).map_err(|e| {
        TensorError::Invalid {
            op: "infer_frame",
            msg: e.to_string(),
        }
    })?;
    Ok((detections, embeddings))
}

/// Grid extents the pipeline produces for an image size.
pub fn grid_for_image(image_h: usize, image_w: usize) -> (usize, usize) {
    (
        crate::detect::grid_extent(image_h),
        crate::detect::grid_extent(image_w),
    )
}

/// Flat grid index of a detection-target center cell.
pub fn cell_index(grid_w: usize, row: usize, col: usize) -> usize {
    row * grid_w + col
}

/// Stride re-exported for callers assembling observations.
pub const OUTPUT_STRIDE: usize = STRIDE;
