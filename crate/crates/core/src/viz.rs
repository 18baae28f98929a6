//! Grayscale PPM rendering of 2-D maps plus a plain-text dump format for
//! moving maps between the tracker and the viewer.

use std::path::Path;

use crate::tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("map dump line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("expected a [H,W] map, got shape {0:?}")]
    NotAMap(Vec<usize>),
}

/// Binary P6 bytes for a `[H,W]` map, min-max normalized to gray.
pub fn render_ppm<E: Element>(map: &Tensor<E>) -> Result<Vec<u8>, VizError> {
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        other => return Err(VizError::NotAMap(other.to_vec())),
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.data() {
        let v = v.to_f64_lossy();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for &v in map.data() {
        let g = (((v.to_f64_lossy() - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        out.extend_from_slice(&[g, g, g]);
    }
    Ok(out)
}

pub fn write_ppm<E: Element>(path: &Path, map: &Tensor<E>) -> Result<(), VizError> {
    let bytes = render_ppm(map)?;
    std::fs::write(path, bytes).map_err(|source| VizError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Text dump: `H W` on the first line, then one row of values per line.
pub fn format_map_dump<E: Element>(map: &Tensor<E>) -> Result<String, VizError> {
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        other => return Err(VizError::NotAMap(other.to_vec())),
    };
    let mut out = format!("{} {}\n", h, w);
    for row in 0..h {
        let vals: Vec<String> = (0..w)
            .map(|col| format!("{}", map.at(&[row, col]).to_f64_lossy()))
            .collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_map_dump<E: Element>(path: &Path, map: &Tensor<E>) -> Result<(), VizError> {
    let text = format_map_dump(map)?;
    std::fs::write(path, text).map_err(|source| VizError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_map_dump(text: &str) -> Result<Tensor<f64>, VizError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(VizError::Malformed {
        line: 1,
        msg: "empty dump".to_string(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| VizError::Malformed {
            line: 1,
            msg: format!("bad header: {}", e),
        })?;
    let [h, w] = dims[..] else {
        return Err(VizError::Malformed {
            line: 1,
            msg: "header must be 'H W'".to_string(),
        });
    };
    let mut data = Vec::with_capacity(h * w);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|e| VizError::Malformed {
                line: idx + 1,
                msg: format!("bad value {:?}: {}", tok, e),
            })?;
            data.push(v);
        }
    }
    if data.len() != h * w {
        return Err(VizError::Malformed {
            line: 1,
            msg: format!("expected {} values, got {}", h * w, data.len()),
        });
    }
    Ok(Tensor::new(vec![h, w], data).expect("length checked"))
}

pub fn read_map_dump(path: &Path) -> Result<Tensor<f64>, VizError> {
    let text = std::fs::read_to_string(path).map_err(|source| VizError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_map_dump(&text)
}
