//! MOTChallenge CSV ingestion and emission.
//!
//! One line per box: `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`
//! with a 1-based frame index and `id = -1` for raw detections. Numbers
//! are written without a decimal point when integral and with the
//! shortest round-trip representation otherwise, so writing what was
//! read reproduces canonical files byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::assoc::Track;
use crate::bbox::BBox;
use crate::detect::{Detection, STRIDE};
use crate::metrics::{GroundTruth, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum MotIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected 10 comma-separated fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: field {field} is not a number: {value:?}")]
    BadNumber {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: frame index must be at least 1")]
    BadFrame { line: usize },
    #[error("line {line}: box extent must be positive")]
    BadExtent { line: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One CSV record.
#[derive(Clone, Debug, PartialEq)]
pub struct MotLine {
    pub frame: usize,
    pub id: i64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotLine {
    pub fn bbox(&self) -> BBox {
        BBox::from_ltwh(self.bb_left, self.bb_top, self.bb_width, self.bb_height)
    }
}

/// Parses MOT CSV text; empty lines are skipped, anything else malformed
/// reports its 1-based line number.
pub fn parse_mot(text: &str) -> Result<Vec<MotLine>, MotIoError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 10 {
            return Err(MotIoError::FieldCount {
                line,
                got: fields.len(),
            });
        }
        let num = |field: &'static str, s: &str| -> Result<f64, MotIoError> {
            s.trim().parse::<f64>().map_err(|_| MotIoError::BadNumber {
                line,
                field,
                value: s.to_string(),
            })
        };
        let frame_f = num("frame", fields[0])?;
        if frame_f < 1.0 || frame_f.fract() != 0.0 {
            return Err(MotIoError::BadFrame { line });
        }
        let id_f = num("id", fields[1])?;
        let rec = MotLine {
            frame: frame_f as usize,
            id: id_f as i64,
            bb_left: num("bb_left", fields[2])?,
            bb_top: num("bb_top", fields[3])?,
            bb_width: num("bb_width", fields[4])?,
            bb_height: num("bb_height", fields[5])?,
            conf: num("conf", fields[6])?,
            x: num("x", fields[7])?,
            y: num("y", fields[8])?,
            z: num("z", fields[9])?,
        };
        if rec.bb_width <= 0.0 || rec.bb_height <= 0.0 {
            return Err(MotIoError::BadExtent { line });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_mot(path: &Path) -> Result<Vec<MotLine>, MotIoError> {
    let text = std::fs::read_to_string(path).map_err(|source| MotIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_mot(&text)
}

/// Shortest exact decimal: integers drop the point entirely.
pub fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{}", v)
    }
}

/// Renders lines sorted by frame then id.
pub fn format_mot(lines: &[MotLine]) -> String {
    let mut sorted: Vec<&MotLine> = lines.iter().collect();
    sorted.sort_by_key(|l| (l.frame, l.id));
    let mut out = String::new();
    for l in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            l.frame,
            l.id,
            fmt_num(l.bb_left),
            fmt_num(l.bb_top),
            fmt_num(l.bb_width),
            fmt_num(l.bb_height),
            fmt_num(l.conf),
            fmt_num(l.x),
            fmt_num(l.y),
            fmt_num(l.z),
        ));
    }
    out
}

pub fn write_mot(path: &Path, lines: &[MotLine]) -> Result<(), MotIoError> {
    std::fs::write(path, format_mot(lines)).map_err(|source| MotIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Identity-labelled lines (`id >= 0`) grouped for evaluation.
pub fn lines_to_ground_truth(lines: &[MotLine]) -> Result<GroundTruth, MetricsError> {
    let mut gt = GroundTruth::new();
    for l in lines {
        if l.id >= 0 {
            gt.insert(l.frame, l.id as u64, l.bbox())?;
        }
    }
    Ok(gt)
}

/// Groups detection lines by frame, deriving each box's grid cell.
pub fn lines_to_detections(lines: &[MotLine]) -> BTreeMap<usize, Vec<Detection>> {
    let mut out: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for l in lines {
        let bbox = l.bbox();
        let (cx, cy) = bbox.center();
        out.entry(l.frame).or_default().push(Detection {
            bbox,
            score: l.conf,
            center: (
                (cy / STRIDE as f64).floor().max(0.0) as usize,
                (cx / STRIDE as f64).floor().max(0.0) as usize,
            ),
        });
    }
    out
}

/// Tracker output as result lines; confidence carries the box score.
pub fn tracks_to_lines(tracks: &[Track]) -> Vec<MotLine> {
    let mut out = Vec::new();
    for track in tracks {
        for b in &track.boxes {
            out.push(MotLine {
                frame: b.frame,
                id: track.id as i64,
                bb_left: b.bbox.l,
                bb_top: b.bbox.t,
                bb_width: b.bbox.width(),
                bb_height: b.bbox.height(),
                conf: b.score,
                x: -1.0,
                y: -1.0,
                z: -1.0,
            });
        }
    }
    out
}

/// Ground truth as annotation lines with confidence 1.
pub fn ground_truth_to_lines(gt: &GroundTruth) -> Vec<MotLine> {
    let mut out = Vec::new();
    for (&frame, entries) in gt.frames() {
        for &(id, bbox) in entries {
            out.push(MotLine {
                frame,
                id: id as i64,
                bb_left: bbox.l,
                bb_top: bbox.t,
                bb_width: bbox.width(),
                bb_height: bbox.height(),
                conf: 1.0,
                x: -1.0,
                y: -1.0,
                z: -1.0,
            });
        }
    }
    out
}
