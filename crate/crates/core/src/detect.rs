//! Center-point detection: Gaussian heatmap targets on a stride-4 grid,
//! focal heatmap / L1 box / ReID cross-entropy losses with an
//! uncertainty-weighted total, and peak decoding back to boxes.

use crate::bbox::BBox;
use crate::tensor::{Element, Gradients, Parameter, Result as TensorResult, Tape, Tensor, Var};

/// Output maps live on a grid this many times smaller than the image.
pub const STRIDE: usize = 4;

/// Focal-loss exponents; the standard values of the lineage the heatmap
/// loss comes from.
pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 4.0;

pub const DEFAULT_SCORE_THRESH: f64 = 0.4;
pub const DEFAULT_MAX_DETECTIONS: usize = 128;

/// Predicted heatmap values are clamped into this open interval before
/// any logarithm.
pub const HEATMAP_CLAMP: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("degenerate box (l={l}, t={t}, r={r}, b={b})")]
    DegenerateBox { l: f64, t: f64, r: f64, b: f64 },
    #[error("box center ({0}, {1}) outside the image")]
    OutsideImage(f64, f64),
    #[error("ReID classification needs at least 2 identities, got {0}")]
    TooFewIdentities(usize),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// One annotated box with its identity label.
#[derive(Clone, Debug)]
pub struct BoxAnnotation {
    pub bbox: BBox,
    pub identity: u64,
}

/// Training targets rendered from annotations.
///
/// `heatmap` holds the max-combined Gaussian bumps in `[0,1]`; per object
/// there is a grid cell, a sub-stride offset `(ox, oy)` in `[0,1)` and a
/// pixel size `(w, h)`.
#[derive(Clone, Debug)]
pub struct DetectionTargets<E: Element> {
    pub heatmap: Tensor<E>, // [Hg, Wg]
    pub sizes: Vec<(f64, f64)>,
    pub offsets: Vec<(f64, f64)>,
    pub center_cells: Vec<(usize, usize)>, // (row, col)
}

/// One decoded target.
#[derive(Clone, Debug)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Grid cell `(row, col)` the detection was decoded from.
    pub center: (usize, usize),
}

/// Learnable log-variance coefficients of the total loss.
#[derive(Clone, Debug)]
pub struct LossWeights<E: Element> {
    pub omega1: Parameter<E>,
    pub omega2: Parameter<E>,
}

impl<E: Element> Default for LossWeights<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> LossWeights<E> {
    pub fn new() -> Self {
        LossWeights {
            omega1: Parameter::zeros(vec![1]),
            omega2: Parameter::zeros(vec![1]),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.omega1, &mut self.omega2]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> LossWeightVars {
        LossWeightVars {
            omega1: tape.leaf(self.omega1.value.clone()),
            omega2: tape.leaf(self.omega2.value.clone()),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &LossWeightVars) {
        grads.accumulate(vars.omega1, &mut self.omega1);
        grads.accumulate(vars.omega2, &mut self.omega2);
    }
}

#[derive(Clone, Copy)]
pub struct LossWeightVars {
    pub omega1: Var,
    pub omega2: Var,
}

/// Gaussian radius guaranteeing the given IoU when the box shifts by the
/// radius in any direction; the rule used throughout the center-point
/// detection lineage. Inputs are grid-scale box extents.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 8.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);

    r1.min(r2).min(r3).max(0.0)
}

/// Grid extent covering `pixels` at the detection stride.
pub fn grid_extent(pixels: usize) -> usize {
    pixels.div_ceil(STRIDE)
}

/// Renders heatmap / size / offset targets for one frame.
///
/// Centers map to stride-4 cells; each object paints a Gaussian with a
/// deviation of one third of its overlap radius; overlapping bumps
/// combine by elementwise maximum so the map stays in `[0,1]`.
pub fn render_targets<E: Element>(
    boxes: &[BoxAnnotation],
    image_h: usize,
    image_w: usize,
) -> Result<DetectionTargets<E>> {
    let hg = grid_extent(image_h);
    let wg = grid_extent(image_w);
    let mut heatmap = Tensor::<E>::zeros(vec![hg, wg]);
    let mut sizes = Vec::with_capacity(boxes.len());
    let mut offsets = Vec::with_capacity(boxes.len());
    let mut center_cells = Vec::with_capacity(boxes.len());

    for ann in boxes {
        let b = &ann.bbox;
        if !b.is_valid() {
            return Err(DetectError::DegenerateBox {
                l: b.l,
                t: b.t,
                r: b.r,
                b: b.b,
            });
        }
        let (cx, cy) = b.center();
        if cx < 0.0 || cy < 0.0 || cx >= image_w as f64 || cy >= image_h as f64 {
            return Err(DetectError::OutsideImage(cx, cy));
        }
        let col = (cx / STRIDE as f64).floor() as usize;
        let row = (cy / STRIDE as f64).floor() as usize;
        let ox = cx / STRIDE as f64 - col as f64;
        let oy = cy / STRIDE as f64 - row as f64;
        sizes.push((b.width(), b.height()));
        offsets.push((ox, oy));
        center_cells.push((row, col));

        let radius = gaussian_radius(
            b.height() / STRIDE as f64,
            b.width() / STRIDE as f64,
            0.7,
        );
        let sigma = radius / 3.0;
        for y in 0..hg {
            for x in 0..wg {
                let d2 = (x as f64 - col as f64).powi(2) + (y as f64 - row as f64).powi(2);
                let v = if d2 == 0.0 {
                    1.0
                } else if sigma > 0.0 {
                    (-d2 / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                };
                let cur = heatmap.at(&[y, x]);
                if E::lit(v) > cur {
                    heatmap.set(&[y, x], E::lit(v));
                }
            }
        }
    }
    Ok(DetectionTargets {
        heatmap,
        sizes,
        offsets,
        center_cells,
    })
}

/// Focal heatmap loss against a rendered target.
///
/// Cells where the target is exactly 1 use the positive focal branch,
/// everything else the penalty-reduced negative branch; the sum is
/// normalized by the number of positive cells. No objects means zero
/// loss. Predictions are clamped into the open unit interval first.
pub fn heatmap_loss<E: Element>(
    tape: &mut Tape<E>,
    predicted: Var,
    target: &Tensor<E>,
    alpha: f64,
    beta: f64,
) -> TensorResult<Var> {
    let one = E::one();
    let mut n_pos = 0usize;
    let mut pos_mask = target.clone();
    let mut neg_weight = target.clone();
    for i in 0..target.numel() {
        let t = target.data()[i];
        if t == one {
            n_pos += 1;
            pos_mask.data_mut()[i] = one;
            neg_weight.data_mut()[i] = E::zero();
        } else {
            pos_mask.data_mut()[i] = E::zero();
            neg_weight.data_mut()[i] = (one - t).powf(E::lit(beta));
        }
    }
    if n_pos == 0 {
        return Ok(tape.leaf(Tensor::scalar(E::zero())));
    }

    let alpha = E::lit(alpha);
    let clamped = tape.clamp(predicted, E::lit(HEATMAP_CLAMP), one - E::lit(HEATMAP_CLAMP))?;
    let one_minus = tape.affine(clamped, -one, one)?;

    let pos_pow = tape.powf(one_minus, alpha)?;
    let ln_r = tape.ln(clamped)?;
    let pos_term = tape.mul(pos_pow, ln_r)?;
    let pos_term = tape.mul_const(pos_term, &pos_mask)?;

    let neg_pow = tape.powf(clamped, alpha)?;
    let ln_one_minus = tape.ln(one_minus)?;
    let neg_term = tape.mul(neg_pow, ln_one_minus)?;
    let neg_term = tape.mul_const(neg_term, &neg_weight)?;

    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both)?;
    tape.affine(total, -one / E::lit(n_pos as f64), E::zero())
}

/// L1 loss on per-object offsets and sizes gathered at target centers.
pub fn box_loss<E: Element>(
    tape: &mut Tape<E>,
    pred_offsets: Var,
    pred_sizes: Var,
    targets: &DetectionTargets<E>,
) -> TensorResult<Var> {
    let n = targets.offsets.len();
    let mut neg_off = Tensor::<E>::zeros(vec![n, 2]);
    let mut neg_size = Tensor::<E>::zeros(vec![n, 2]);
    for i in 0..n {
        neg_off.data_mut()[i * 2] = -E::lit(targets.offsets[i].0);
        neg_off.data_mut()[i * 2 + 1] = -E::lit(targets.offsets[i].1);
        neg_size.data_mut()[i * 2] = -E::lit(targets.sizes[i].0);
        neg_size.data_mut()[i * 2 + 1] = -E::lit(targets.sizes[i].1);
    }
    let off_res = tape.add_const(pred_offsets, &neg_off)?;
    let off_abs = tape.abs(off_res)?;
    let off_sum = tape.sum(off_abs)?;
    let size_res = tape.add_const(pred_sizes, &neg_size)?;
    let size_abs = tape.abs(size_res)?;
    let size_sum = tape.sum(size_abs)?;
    tape.add(off_sum, size_sum)
}

/// Cross-entropy between per-object class distributions `p: [N,K]` and
/// one-hot identity rows `q`, averaged over objects.
pub fn reid_loss<E: Element>(
    tape: &mut Tape<E>,
    p: Var,
    q_one_hot: &Tensor<E>,
) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    let (n, k) = match shape[..] {
        [n, k] => (n, k),
        _ => {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "reid_loss",
                detail: format!("expected [N,K], got {:?}", shape),
            }
            .into())
        }
    };
    if k < 2 {
        return Err(DetectError::TooFewIdentities(k));
    }
    let clamped = tape.clamp(p, E::lit(1e-12), E::lit(2.0))?;
    let ln_p = tape.ln(clamped)?;
    let weighted = tape.mul_const(ln_p, q_one_hot)?;
    let total = tape.sum(weighted)?;
    Ok(tape.affine(total, -E::one() / E::lit(n as f64), E::zero())?)
}

/// Uncertainty-weighted combination of the detection and ReID losses:
/// `0.5 * (exp(-w1) * (Lh + Lb) + exp(-w2) * Lr + w1 + w2)`. The
/// coefficients receive gradients.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    heat: Var,
    boxes: Var,
    reid: Var,
    weights: &LossWeightVars,
) -> TensorResult<Var> {
    let det = tape.add(heat, boxes)?;
    let neg1 = tape.neg(weights.omega1)?;
    let scale1 = tape.exp(neg1)?;
    let term1 = tape.mul(scale1, det)?;
    let neg2 = tape.neg(weights.omega2)?;
    let scale2 = tape.exp(neg2)?;
    let term2 = tape.mul(scale2, reid)?;
    let terms = tape.add(term1, term2)?;
    let omegas = tape.add(weights.omega1, weights.omega2)?;
    let all = tape.add(terms, omegas)?;
    tape.affine(all, E::lit(0.5), E::zero())
}

/// Decodes detections from predicted maps sharing the stride-4 grid.
///
/// A cell is a peak when strictly greater than its 8 in-bounds
/// neighbors (ties kill both cells). Peaks above `score_thresh` are
/// sorted by score, ties broken row-major, and the top `max_k` become
/// boxes: center `stride * (cell + offset)`, extent from the size map.
pub fn decode<E: Element>(
    heatmap: &Tensor<E>,
    offsets: &Tensor<E>,
    sizes: &Tensor<E>,
    max_k: usize,
    score_thresh: f64,
) -> Vec<Detection> {
    let (hg, wg) = match heatmap.shape() {
        &[h, w] => (h, w),
        _ => return Vec::new(),
    };
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for row in 0..hg {
        for col in 0..wg {
            let v = heatmap.at(&[row, col]);
            let mut is_peak = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = row as i64 + dy;
                    let nx = col as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= hg as i64 || nx >= wg as i64 {
                        continue;
                    }
                    if heatmap.at(&[ny as usize, nx as usize]) >= v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            let score = v.to_f64_lossy();
            if is_peak && score > score_thresh {
                peaks.push((score, row, col));
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    peaks.truncate(max_k);

    peaks
        .into_iter()
        .filter_map(|(score, row, col)| {
            let ox = offsets.at(&[row, col, 0]).to_f64_lossy();
            let oy = offsets.at(&[row, col, 1]).to_f64_lossy();
            let w = sizes.at(&[row, col, 0]).to_f64_lossy();
            let h = sizes.at(&[row, col, 1]).to_f64_lossy();
            if w <= 0.0 || h <= 0.0 {
                return None; // degenerate size prediction, not a box
            }
            let cx = STRIDE as f64 * (col as f64 + ox);
            let cy = STRIDE as f64 * (row as f64 + oy);
            Some(Detection {
                bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
                score,
                center: (row, col),
            })
        })
        .collect()
}

/// Offset and size maps that decode targets back exactly: zero
/// everywhere except the per-object values at their center cells.
pub fn perfect_maps<E: Element>(
    targets: &DetectionTargets<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (hg, wg) = (targets.heatmap.shape()[0], targets.heatmap.shape()[1]);
    let mut offsets = Tensor::<E>::zeros(vec![hg, wg, 2]);
    let mut sizes = Tensor::<E>::zeros(vec![hg, wg, 2]);
    for (i, &(row, col)) in targets.center_cells.iter().enumerate() {
        offsets.set(&[row, col, 0], E::lit(targets.offsets[i].0));
        offsets.set(&[row, col, 1], E::lit(targets.offsets[i].1));
        sizes.set(&[row, col, 0], E::lit(targets.sizes[i].0));
        sizes.set(&[row, col, 1], E::lit(targets.sizes[i].1));
    }
    (offsets, sizes)
}
