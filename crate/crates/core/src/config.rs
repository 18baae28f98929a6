//! Line-based `key=value` run configuration.
//!
//! Every knob of the synthetic generator, the neural pipeline, the
//! tracker and the evaluator lives here with a documented default.
//! Unknown keys are rejected with their line number; `canonical()`
//! prints every key in a fixed order, so echoing a parsed config
//! reproduces it byte for byte.

use crate::assoc::{AssocConfig, MotionConfig};
use crate::metrics::MatchOptions;
use crate::mot_io::fmt_num;
use crate::synth::{MotionPattern, SyntheticScenario};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected key=value, got {text:?}")]
    MissingEquals { line: usize, text: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which feature path the track command runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeaturePath {
    /// Synthetic oracle detections and embeddings.
    Oracle,
    /// Backbone, feature disentangling, encoder and decoding on
    /// rasterized frames.
    Neural,
}

#[derive(Clone, Debug)]
pub struct Config {
    // synthetic scenario
    pub seed: u64,
    pub identities: usize,
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub motion: MotionPattern,
    pub dropout: f64,
    pub embedding_noise: f64,
    pub embedding_dim: usize,
    // feature pipeline
    pub path: FeaturePath,
    pub channels: usize,
    pub bottleneck: usize,
    pub heads: usize,
    pub key_samples: usize,
    pub blocks: usize,
    pub score_thresh: f64,
    pub max_detections: usize,
    // association
    pub cosine_gate: f64,
    pub iou_gate: f64,
    pub init_score: f64,
    pub max_lost: usize,
    pub gap_max: usize,
    pub ema_momentum: f64,
    pub motion_gate_sigma: f64,
    pub motion_std_pos: f64,
    pub motion_std_vel: f64,
    // evaluation
    pub iou_thresh: f64,
    pub continuity: bool,
}

impl Default for Config {
    fn default() -> Self {
        let assoc = AssocConfig::default();
        Config {
            seed: 1,
            identities: 4,
            frames: 100,
            image_h: 256,
            image_w: 256,
            motion: MotionPattern::Linear,
            dropout: 0.0,
            embedding_noise: 0.0,
            embedding_dim: crate::gte::DEFAULT_EMBED_DIM,
            path: FeaturePath::Oracle,
            channels: 16,
            bottleneck: 4,
            heads: crate::gte::DEFAULT_HEADS,
            key_samples: crate::gte::DEFAULT_KEY_SAMPLES,
            blocks: 1,
            score_thresh: 0.4,
            max_detections: 128,
            cosine_gate: assoc.cosine_gate,
            iou_gate: assoc.iou_gate,
            init_score: assoc.init_score,
            max_lost: assoc.max_lost,
            gap_max: assoc.gap_max,
            ema_momentum: assoc.ema_momentum,
            motion_gate_sigma: assoc.motion_gate_sigma,
            motion_std_pos: assoc.motion.std_weight_pos,
            motion_std_vel: assoc.motion.std_weight_vel,
            iou_thresh: 0.5,
            continuity: true,
        }
    }
}

/// Fixed key order used by `canonical()`.
const KEYS: &[&str] = &[
    "seed",
    "identities",
    "frames",
    "image_h",
    "image_w",
    "motion",
    "dropout",
    "embedding_noise",
    "embedding_dim",
    "path",
    "channels",
    "bottleneck",
    "heads",
    "key_samples",
    "blocks",
    "score_thresh",
    "max_detections",
    "cosine_gate",
    "iou_gate",
    "init_score",
    "max_lost",
    "gap_max",
    "ema_momentum",
    "motion_gate_sigma",
    "motion_std_pos",
    "motion_std_vel",
    "iou_thresh",
    "continuity",
];

impl Config {
    /// Parses overrides on top of the defaults. Blank lines and lines
    /// starting with `#` are skipped; later assignments win.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Layers more `key=value` lines onto this configuration.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((key, value)) = s.split_once('=') else {
                return Err(ConfigError::MissingEquals {
                    line,
                    text: s.to_string(),
                });
            };
            self.apply(line, key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::parse(&text)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |key: &str, value: &str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! num {
            ($slot:expr) => {
                $slot = value.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "seed" => num!(self.seed),
            "identities" => num!(self.identities),
            "frames" => num!(self.frames),
            "image_h" => num!(self.image_h),
            "image_w" => num!(self.image_w),
            "motion" => {
                self.motion = match value {
                    "linear" => MotionPattern::Linear,
                    "crossing" => MotionPattern::Crossing,
                    _ => return Err(bad(key, value)),
                }
            }
            "dropout" => num!(self.dropout),
            "embedding_noise" => num!(self.embedding_noise),
            "embedding_dim" => num!(self.embedding_dim),
            "path" => {
                self.path = match value {
                    "oracle" => FeaturePath::Oracle,
                    "neural" => FeaturePath::Neural,
                    _ => return Err(bad(key, value)),
                }
            }
            "channels" => num!(self.channels),
            "bottleneck" => num!(self.bottleneck),
            "heads" => num!(self.heads),
            "key_samples" => num!(self.key_samples),
            "blocks" => num!(self.blocks),
            "score_thresh" => num!(self.score_thresh),
            "max_detections" => num!(self.max_detections),
            "cosine_gate" => num!(self.cosine_gate),
            "iou_gate" => num!(self.iou_gate),
            "init_score" => num!(self.init_score),
            "max_lost" => num!(self.max_lost),
            "gap_max" => num!(self.gap_max),
            "ema_momentum" => num!(self.ema_momentum),
            "motion_gate_sigma" => num!(self.motion_gate_sigma),
            "motion_std_pos" => num!(self.motion_std_pos),
            "motion_std_vel" => num!(self.motion_std_vel),
            "iou_thresh" => num!(self.iou_thresh),
            "continuity" => {
                self.continuity = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad(key, value)),
                }
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "identities" => self.identities.to_string(),
            "frames" => self.frames.to_string(),
            "image_h" => self.image_h.to_string(),
            "image_w" => self.image_w.to_string(),
            "motion" => match self.motion {
                MotionPattern::Linear => "linear".to_string(),
                MotionPattern::Crossing => "crossing".to_string(),
            },
            "dropout" => fmt_num(self.dropout),
            "embedding_noise" => fmt_num(self.embedding_noise),
            "embedding_dim" => self.embedding_dim.to_string(),
            "path" => match self.path {
                FeaturePath::Oracle => "oracle".to_string(),
                FeaturePath::Neural => "neural".to_string(),
            },
            "channels" => self.channels.to_string(),
            "bottleneck" => self.bottleneck.to_string(),
            "heads" => self.heads.to_string(),
            "key_samples" => self.key_samples.to_string(),
            "blocks" => self.blocks.to_string(),
            "score_thresh" => fmt_num(self.score_thresh),
            "max_detections" => self.max_detections.to_string(),
            "cosine_gate" => fmt_num(self.cosine_gate),
            "iou_gate" => fmt_num(self.iou_gate),
            "init_score" => fmt_num(self.init_score),
            "max_lost" => self.max_lost.to_string(),
            "gap_max" => self.gap_max.to_string(),
            "ema_momentum" => fmt_num(self.ema_momentum),
            "motion_gate_sigma" => fmt_num(self.motion_gate_sigma),
            "motion_std_pos" => fmt_num(self.motion_std_pos),
            "motion_std_vel" => fmt_num(self.motion_std_vel),
            "iou_thresh" => fmt_num(self.iou_thresh),
            "continuity" => self.continuity.to_string(),
            _ => unreachable!("value_of called with unknown key"),
        }
    }

    /// Effective configuration, every key in fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    pub fn to_scenario(&self) -> SyntheticScenario {
        SyntheticScenario {
            seed: self.seed,
            n_identities: self.identities,
            n_frames: self.frames,
            image_h: self.image_h,
            image_w: self.image_w,
            motion: self.motion,
            dropout: self.dropout,
            embedding_noise: self.embedding_noise,
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn to_assoc(&self) -> AssocConfig {
        AssocConfig {
            cosine_gate: self.cosine_gate,
            iou_gate: self.iou_gate,
            init_score: self.init_score,
            max_lost: self.max_lost,
            gap_max: self.gap_max,
            ema_momentum: self.ema_momentum,
            motion_gate_sigma: self.motion_gate_sigma,
            motion: MotionConfig {
                std_weight_pos: self.motion_std_pos,
                std_weight_vel: self.motion_std_vel,
            },
        }
    }

    pub fn to_match_options(&self) -> MatchOptions {
        MatchOptions {
            iou_thresh: self.iou_thresh,
            continuity: self.continuity,
        }
    }
}
