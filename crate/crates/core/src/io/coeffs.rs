use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::face3dmm::CoeffSet;

/// One line of a coefficient file. Only `beta` is required.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    translation: Option<[f64; 3]>,
}

pub fn encode_coeffs(seq: &[CoeffSet]) -> Result<String> {
    let mut out = String::new();
    for c in seq {
        let line = Line {
            beta: c.beta.clone(),
            alpha: Some(c.alpha.clone()),
            delta: Some(c.delta.clone()),
            rotation: Some(c.rotation),
            translation: Some(c.translation),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses one frame per non-blank line. Missing fields default to zero
/// (`alpha`/`delta` empty). With `k_exp` set, every `beta` must have that
/// length.
pub fn decode_coeffs(text: &str, k_exp: Option<usize>) -> Result<Vec<CoeffSet>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let frame = out.len();
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Frame {
            frame,
            msg: format!("line {}: {e}", lineno + 1),
        })?;
        if let Some(k) = k_exp {
            if line.beta.len() != k {
                return Err(Error::Frame {
                    frame,
                    msg: format!("beta has {} values, expected {k}", line.beta.len()),
                });
            }
        }
        out.push(CoeffSet {
            alpha: line.alpha.unwrap_or_default(),
            beta: line.beta,
            delta: line.delta.unwrap_or_default(),
            rotation: line.rotation.unwrap_or_default(),
            translation: line.translation.unwrap_or_default(),
        });
    }
    Ok(out)
}

pub fn read_coeffs(path: &Path, k_exp: Option<usize>) -> Result<Vec<CoeffSet>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        format: "JSON-lines",
        offset: e.valid_up_to() as u64,
        msg: "invalid UTF-8".into(),
    })?;
    decode_coeffs(text, k_exp)
}

pub fn write_coeffs(path: &Path, seq: &[CoeffSet]) -> Result<()> {
    write_bytes(path, encode_coeffs(seq)?.as_bytes())
}
