//! Online association: cosine costs over track/detection embeddings with
//! motion gating, Hungarian matching with an IoU fallback stage, track
//! lifecycle management and linear gap filling.

pub mod hungarian;
pub mod motion;

pub use hungarian::{solve as hungarian, Assignment, CostMatrix, FORBIDDEN};
pub use motion::{MotionConfig, MotionState};

use crate::bbox::BBox;
use crate::detect::Detection;
use crate::tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AssocError {
    #[error("frame {frame} does not follow the last processed frame {last}")]
    NonMonotonicFrame { frame: usize, last: usize },
    #[error("{detections} detections but {embeddings} embeddings")]
    CountMismatch { detections: usize, embeddings: usize },
    #[error("zero embedding vector at detection {0}")]
    ZeroEmbedding(usize),
    #[error("detection center ({0}, {1}) outside the embedding map")]
    CenterOutsideMap(usize, usize),
    #[error("non-positive box extent ({w} x {h})")]
    NonPositiveExtent { w: f64, h: f64 },
    #[error("innovation covariance not invertible")]
    SingularInnovation,
}

/// Association thresholds. All values mirror the conventions of the
/// embedding-tracking systems this follows and can be overridden.
#[derive(Clone, Copy, Debug)]
pub struct AssocConfig {
    /// Stage 1 forbids pairs with cosine cost above this.
    pub cosine_gate: f64,
    /// Stage 2 forbids pairs with IoU below this.
    pub iou_gate: f64,
    /// Minimum detection score to start a new track.
    pub init_score: f64,
    /// Frames a lost track survives before it is finished.
    pub max_lost: usize,
    /// Longest interior gap (missing frames) the filler closes.
    pub gap_max: usize,
    /// Weight of the old embedding in the exponential moving average.
    pub ema_momentum: f64,
    /// Motion gate in predicted standard deviations; non-positive
    /// disables the gate (cosine-only stage 1).
    pub motion_gate_sigma: f64,
    pub motion: MotionConfig,
}

impl Default for AssocConfig {
    fn default() -> Self {
        AssocConfig {
            cosine_gate: 0.4,
            iou_gate: 0.5,
            init_score: 0.5,
            max_lost: 30,
            gap_max: 30,
            ema_momentum: 0.9,
            motion_gate_sigma: 3.0,
            motion: MotionConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Lost { since_frame: usize },
    Finished,
}

/// One box of a trajectory; `filled` marks interpolated entries.
#[derive(Clone, Debug)]
pub struct TrackBox {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    pub filled: bool,
}

/// A live or finished trajectory.
#[derive(Clone, Debug)]
pub struct Track {
    pub id: u64,
    pub boxes: Vec<TrackBox>,
    /// Exponentially smoothed appearance vector, unit norm; empty when
    /// the tracker runs without embeddings.
    pub embedding: Vec<f64>,
    pub motion: MotionState,
    pub status: TrackStatus,
    pub last_frame: usize,
}

impl Track {
    pub fn first_frame(&self) -> usize {
        self.boxes.first().map(|b| b.frame).unwrap_or(0)
    }

    /// Box predicted by the motion model for the current frame.
    pub fn predicted_box(&self) -> BBox {
        self.motion.current_box()
    }
}

/// Cost matrix of `1 - <a, b>` for unit vectors; values lie in `[0, 2]`.
pub fn cosine_cost(track_embeddings: &[Vec<f64>], det_embeddings: &[Vec<f64>]) -> CostMatrix {
    let mut costs = CostMatrix::new(track_embeddings.len(), det_embeddings.len());
    for (i, a) in track_embeddings.iter().enumerate() {
        for (j, b) in det_embeddings.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            costs.set(i, j, (1.0 - dot).clamp(0.0, 2.0));
        }
    }
    costs
}

/// Reads the embedding map `[Hg,Wg,D]` at each detection's center cell
/// and L2-normalizes the vectors.
pub fn embeddings_at_centers<E: Element>(
    emb_map: &Tensor<E>,
    detections: &[Detection],
) -> Result<Vec<Vec<f64>>, AssocError> {
    let (hg, wg, d) = match emb_map.shape() {
        &[h, w, d] => (h, w, d),
        _ => (0, 0, 0),
    };
    let mut out = Vec::with_capacity(detections.len());
    for (i, det) in detections.iter().enumerate() {
        let (row, col) = det.center;
        if row >= hg || col >= wg {
            return Err(AssocError::CenterOutsideMap(row, col));
        }
        let mut v: Vec<f64> = (0..d)
            .map(|c| emb_map.at(&[row, col, c]).to_f64_lossy())
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(AssocError::ZeroEmbedding(i));
        }
        for x in &mut v {
            *x /= norm;
        }
        out.push(v);
    }
    Ok(out)
}

/// Observations of one frame fed to the tracker. `embeddings`, when
/// present, pairs up with `detections`.
#[derive(Clone, Debug)]
pub struct FrameObservations {
    pub frame: usize,
    pub detections: Vec<Detection>,
    pub embeddings: Option<Vec<Vec<f64>>>,
}

/// Sequential tracker state. One instance per sequence; frames must
/// arrive in strictly increasing order.
pub struct Tracker {
    cfg: AssocConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<usize>,
}

impl Tracker {
    pub fn new(cfg: AssocConfig) -> Self {
        Tracker {
            cfg,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Associates one frame of detections into the track set.
    ///
    /// Stage 1 matches embeddings by cosine cost under the motion gate;
    /// stage 2 matches the remainder by IoU against predicted boxes.
    /// Unmatched detections above the init score start new tracks;
    /// tracks lost for longer than `max_lost` finish.
    pub fn associate_frame(
        &mut self,
        frame: usize,
        detections: &[Detection],
        embeddings: Option<&[Vec<f64>]>,
    ) -> Result<(), AssocError> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(AssocError::NonMonotonicFrame { frame, last });
            }
        }
        if let Some(embs) = embeddings {
            if embs.len() != detections.len() {
                return Err(AssocError::CountMismatch {
                    detections: detections.len(),
                    embeddings: embs.len(),
                });
            }
        }

        let alive: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].status != TrackStatus::Finished)
            .collect();
        for &i in &alive {
            self.tracks[i].motion.predict(&self.cfg.motion);
        }

        let mut unmatched_tracks: Vec<usize> = alive.clone();
        let mut unmatched_dets: Vec<usize> = (0..detections.len()).collect();
        let mut matches: Vec<(usize, usize)> = Vec::new(); // (track idx, det idx)

        // stage 1: appearance with motion gating
        if let Some(embs) = embeddings {
            if !unmatched_tracks.is_empty() && !unmatched_dets.is_empty() {
                let track_embs: Vec<Vec<f64>> = unmatched_tracks
                    .iter()
                    .map(|&i| self.tracks[i].embedding.clone())
                    .collect();
                let mut costs = cosine_cost(&track_embs, embs);
                for (row, &ti) in unmatched_tracks.iter().enumerate() {
                    for (col, det) in detections.iter().enumerate() {
                        if costs.get(row, col) > self.cfg.cosine_gate {
                            costs.forbid(row, col);
                            continue;
                        }
                        if self.cfg.motion_gate_sigma > 0.0 {
                            let track = &self.tracks[ti];
                            let (px, py) = track.predicted_box().center();
                            let (dx, dy) = det.bbox.center();
                            let (sx, sy) = track.motion.position_std();
                            let nx = (dx - px) / sx.max(1e-9);
                            let ny = (dy - py) / sy.max(1e-9);
                            if (nx * nx + ny * ny).sqrt() > self.cfg.motion_gate_sigma {
                                costs.forbid(row, col);
                            }
                        }
                    }
                }
                let assignment = hungarian(&costs);
                for &(row, col) in &assignment.pairs {
                    matches.push((unmatched_tracks[row], col));
                }
                unmatched_tracks = assignment
                    .unmatched_rows
                    .iter()
                    .map(|&r| unmatched_tracks[r])
                    .collect();
                unmatched_dets = assignment.unmatched_cols;
            }
        }

        // stage 2: IoU against predicted boxes
        if !unmatched_tracks.is_empty() && !unmatched_dets.is_empty() {
            let mut costs = CostMatrix::new(unmatched_tracks.len(), unmatched_dets.len());
            for (row, &ti) in unmatched_tracks.iter().enumerate() {
                let predicted = self.tracks[ti].predicted_box();
                for (col, &dj) in unmatched_dets.iter().enumerate() {
                    let iou = predicted.iou(&detections[dj].bbox);
                    if iou < self.cfg.iou_gate {
                        costs.forbid(row, col);
                    } else {
                        costs.set(row, col, 1.0 - iou);
                    }
                }
            }
            let assignment = hungarian(&costs);
            for &(row, col) in &assignment.pairs {
                matches.push((unmatched_tracks[row], unmatched_dets[col]));
            }
            let kept_tracks: Vec<usize> = assignment
                .unmatched_rows
                .iter()
                .map(|&r| unmatched_tracks[r])
                .collect();
            unmatched_dets = assignment
                .unmatched_cols
                .iter()
                .map(|&c| unmatched_dets[c])
                .collect();
            unmatched_tracks = kept_tracks;
        }

        for &(ti, dj) in &matches {
            let det = &detections[dj];
            let track = &mut self.tracks[ti];
            track.motion.update(&self.cfg.motion, &det.bbox)?;
            if let Some(embs) = embeddings {
                let m = self.cfg.ema_momentum;
                if track.embedding.is_empty() {
                    track.embedding = embs[dj].clone();
                } else {
                    for (e, &n) in track.embedding.iter_mut().zip(&embs[dj]) {
                        *e = m * *e + (1.0 - m) * n;
                    }
                    let norm = track.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        for e in &mut track.embedding {
                            *e /= norm;
                        }
                    }
                }
            }
            track.boxes.push(TrackBox {
                frame,
                bbox: det.bbox,
                score: det.score,
                filled: false,
            });
            track.status = TrackStatus::Active;
            track.last_frame = frame;
        }

        for &ti in &unmatched_tracks {
            let track = &mut self.tracks[ti];
            match track.status {
                TrackStatus::Active => track.status = TrackStatus::Lost { since_frame: frame },
                TrackStatus::Lost { .. } => {
                    if frame.saturating_sub(track.last_frame) > self.cfg.max_lost {
                        track.status = TrackStatus::Finished;
                    }
                }
                TrackStatus::Finished => {}
            }
        }

        for &dj in &unmatched_dets {
            let det = &detections[dj];
            if det.score < self.cfg.init_score {
                continue;
            }
            let motion = MotionState::initiate(&self.cfg.motion, &det.bbox)?;
            let embedding = match embeddings {
                Some(embs) => embs[dj].clone(),
                None => Vec::new(),
            };
            self.tracks.push(Track {
                id: self.next_id,
                boxes: vec![TrackBox {
                    frame,
                    bbox: det.bbox,
                    score: det.score,
                    filled: false,
                }],
                embedding,
                motion,
                status: TrackStatus::Active,
                last_frame: frame,
            });
            self.next_id += 1;
        }

        self.last_frame = Some(frame);
        Ok(())
    }

    /// Finishes every track, fills interior gaps and returns the
    /// trajectories sorted by id.
    pub fn finish(mut self) -> Vec<Track> {
        for t in &mut self.tracks {
            t.status = TrackStatus::Finished;
        }
        fill_trajectories(&mut self.tracks, self.cfg.gap_max);
        self.tracks.sort_by_key(|t| t.id);
        self.tracks
    }
}

/// Linearly interpolates interior gaps of up to `gap_max` missing frames
/// between consecutive observed boxes. Observed boxes are untouched and
/// nothing is created outside a track's observed range.
pub fn fill_trajectories(tracks: &mut [Track], gap_max: usize) {
    for track in tracks {
        if track.boxes.len() < 2 {
            continue;
        }
        let mut filled = Vec::with_capacity(track.boxes.len());
        for i in 0..track.boxes.len() {
            if i > 0 {
                let prev = &track.boxes[i - 1];
                let next = &track.boxes[i];
                let gap = next.frame - prev.frame;
                if gap > 1 && gap - 1 <= gap_max {
                    for frame in prev.frame + 1..next.frame {
                        let t = (frame - prev.frame) as f64 / gap as f64;
                        let lerp = |a: f64, b: f64| a + (b - a) * t;
                        filled.push(TrackBox {
                            frame,
                            bbox: BBox::new(
                                lerp(prev.bbox.l, next.bbox.l),
                                lerp(prev.bbox.t, next.bbox.t),
                                lerp(prev.bbox.r, next.bbox.r),
                                lerp(prev.bbox.b, next.bbox.b),
                            ),
                            score: lerp(prev.score, next.score),
                            filled: true,
                        });
                    }
                }
            }
            filled.push(track.boxes[i].clone());
        }
        track.boxes = filled;
    }
}

/// Runs the tracker over a whole sequence and returns finished,
/// gap-filled tracks sorted by id.
pub fn track_sequence(
    cfg: &AssocConfig,
    frames: impl IntoIterator<Item = FrameObservations>,
) -> Result<Vec<Track>, AssocError> {
    let mut tracker = Tracker::new(*cfg);
    for obs in frames {
        tracker.associate_frame(obs.frame, &obs.detections, obs.embeddings.as_deref())?;
    }
    Ok(tracker.finish())
}
