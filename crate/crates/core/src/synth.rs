//! Deterministic synthetic sequences with oracle detections and
//! embeddings, the desk-scale substitute for benchmark footage: every
//! identity moves on a known path and carries a known appearance vector,
//! so the association and evaluation stages can be tested against exact
//! expectations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bbox::BBox;
use crate::detect::{Detection, STRIDE};
use crate::metrics::GroundTruth;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("cannot build {n} mutually orthogonal embeddings in dimension {dim}")]
    TooManyIdentities { n: usize, dim: usize },
    #[error("scenario needs at least one identity")]
    NoIdentities,
    #[error("image {h}x{w} too small for the requested targets")]
    ImageTooSmall { h: usize, w: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionPattern {
    /// Independent straight paths.
    Linear,
    /// Identity pairs swap positions, overlapping mid-sequence.
    Crossing,
}

/// Scenario description; everything downstream is a pure function of it.
#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub n_identities: usize,
    pub n_frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub motion: MotionPattern,
    /// Probability a detection is dropped, i.i.d. per identity and frame.
    pub dropout: f64,
    /// Standard deviation of the per-frame embedding perturbation.
    pub embedding_noise: f64,
    pub embedding_dim: usize,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        SyntheticScenario {
            seed: 1,
            n_identities: 4,
            n_frames: 50,
            image_h: 256,
            image_w: 256,
            motion: MotionPattern::Linear,
            dropout: 0.0,
            embedding_noise: 0.0,
            embedding_dim: 16,
        }
    }
}

/// Observations of one frame: oracle detections and their embeddings,
/// parallel slices.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub frame: usize,
    pub detections: Vec<Detection>,
    pub embeddings: Vec<Vec<f64>>,
    /// Identity index behind each detection (oracle-side bookkeeping).
    pub identity_idx: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub ground_truth: GroundTruth,
    pub frames: Vec<SynthFrame>,
    pub identity_embeddings: Vec<Vec<f64>>,
    /// Per identity and frame, the ground-truth box.
    pub boxes: Vec<Vec<BBox>>,
}

/// Mutually orthonormal unit embeddings, one per identity, built by
/// Gram-Schmidt over seeded Gaussian draws.
pub fn identity_embeddings(
    n: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, SynthError> {
    if n > dim {
        return Err(SynthError::TooManyIdentities { n, dim });
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, resample
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    Ok(basis)
}

fn box_at(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Generates the full sequence. Identical scenarios produce identical
/// output bit for bit.
pub fn synth_sequence(s: &SyntheticScenario) -> Result<SynthOutput, SynthError> {
    if s.n_identities == 0 {
        return Err(SynthError::NoIdentities);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let identity_embeddings_ = identity_embeddings(s.n_identities, s.embedding_dim, &mut rng)?;

    // per-identity box extent and endpoints
    let (hf, wf) = (s.image_h as f64, s.image_w as f64);
    let mut sizes = Vec::with_capacity(s.n_identities);
    for _ in 0..s.n_identities {
        let w = rng.random_range(12.0..28.0_f64.min(wf / 4.0).max(13.0));
        let h = rng.random_range(16.0..40.0_f64.min(hf / 4.0).max(17.0));
        sizes.push((w, h));
    }
    let margin = |extent: f64, limit: f64| -> (f64, f64) {
        let lo = extent / 2.0 + 1.0;
        let hi = limit - extent / 2.0 - 1.0;
        (lo, hi)
    };
    for &(w, h) in &sizes {
        let (xl, xh) = margin(w, wf);
        let (yl, yh) = margin(h, hf);
        if xl >= xh || yl >= yh {
            return Err(SynthError::ImageTooSmall {
                h: s.image_h,
                w: s.image_w,
            });
        }
    }

    let mut starts = Vec::with_capacity(s.n_identities);
    let mut ends = Vec::with_capacity(s.n_identities);
    match s.motion {
        MotionPattern::Linear => {
            for &(w, h) in &sizes {
                let (xl, xh) = margin(w, wf);
                let (yl, yh) = margin(h, hf);
                starts.push((rng.random_range(xl..xh), rng.random_range(yl..yh)));
                ends.push((rng.random_range(xl..xh), rng.random_range(yl..yh)));
            }
        }
        MotionPattern::Crossing => {
            // pairs swap horizontal positions along a shared row
            for i in 0..s.n_identities {
                let (w, h) = sizes[i];
                let (xl, xh) = margin(w, wf);
                let (yl, yh) = margin(h, hf);
                let lane = (i / 2) as f64;
                let lanes = s.n_identities.div_ceil(2) as f64;
                let y = yl + (yh - yl) * (lane + 0.5) / lanes;
                if i % 2 == 0 {
                    starts.push((xl, y));
                    ends.push((xh, y));
                } else {
                    starts.push((xh, y));
                    ends.push((xl, y));
                }
            }
        }
    }

    let mut ground_truth = GroundTruth::new();
    let mut boxes: Vec<Vec<BBox>> = vec![Vec::with_capacity(s.n_frames); s.n_identities];
    let mut frames = Vec::with_capacity(s.n_frames);
    for f in 0..s.n_frames {
        let frame = f + 1;
        let t = if s.n_frames > 1 {
            f as f64 / (s.n_frames - 1) as f64
        } else {
            0.0
        };
        let mut detections = Vec::new();
        let mut embeddings = Vec::new();
        let mut identity_idx = Vec::new();
        for i in 0..s.n_identities {
            let (w, h) = sizes[i];
            let cx = starts[i].0 + (ends[i].0 - starts[i].0) * t;
            let cy = starts[i].1 + (ends[i].1 - starts[i].1) * t;
            let bbox = box_at(cx, cy, w, h);
            boxes[i].push(bbox);
            ground_truth
                .insert(frame, i as u64 + 1, bbox)
                .expect("identities are unique per frame by construction");

            let dropped = s.dropout > 0.0 && rng.random_range(0.0..1.0) < s.dropout;
            if dropped {
                continue;
            }
            let mut emb = identity_embeddings_[i].clone();
            if s.embedding_noise > 0.0 {
                for e in &mut emb {
                    let n: f64 = rng.sample(StandardNormal);
                    *e += s.embedding_noise * n;
                }
                let norm = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for e in &mut emb {
                        *e /= norm;
                    }
                }
            }
            detections.push(Detection {
                bbox,
                score: 1.0,
                center: (
                    (cy / STRIDE as f64).floor().max(0.0) as usize,
                    (cx / STRIDE as f64).floor().max(0.0) as usize,
                ),
            });
            embeddings.push(emb);
            identity_idx.push(i);
        }
        frames.push(SynthFrame {
            frame,
            detections,
            embeddings,
            identity_idx,
        });
    }
    Ok(SynthOutput {
        ground_truth,
        frames,
        identity_embeddings: identity_embeddings_,
        boxes,
    })
}

/// Deterministic per-identity color in `[0.2, 1.0]^3`.
fn identity_color(i: usize) -> [f32; 3] {
    let mut h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut next = || {
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        let byte = (h >> 56) as u8;
        0.2 + 0.8 * (byte as f32 / 255.0)
    };
    [next(), next(), next()]
}

/// Paints each box as a textured color patch on a black `[H,W,3]` image;
/// higher identity indices draw on top. The texture keeps neighboring
/// receptive fields distinct, so a detector can localize centers inside
/// otherwise flat patches.
pub fn rasterize_frame(
    boxes: &[(BBox, usize)],
    image_h: usize,
    image_w: usize,
) -> Tensor<f32> {
    let mut img = Tensor::<f32>::zeros(vec![image_h, image_w, 3]);
    for &(bbox, identity) in boxes {
        let color = identity_color(identity);
        let x0 = bbox.l.max(0.0) as usize;
        let y0 = bbox.t.max(0.0) as usize;
        let x1 = (bbox.r.ceil() as usize).min(image_w);
        let y1 = (bbox.b.ceil() as usize).min(image_h);
        for y in y0..y1 {
            for x in x0..x1 {
                let texture = 0.6 + 0.4 * ((x * 31 + y * 17) % 16) as f32 / 15.0;
                for c in 0..3 {
                    img.set(&[y, x, c], color[c] * texture);
                }
            }
        }
    }
    img
}
