//! Detection-script files: JSON lines of
//! `{"frame", "label", "box", "score", "space"}` replayed by the scripted
//! backend.

use std::fs;
use std::path::Path;

use phonewatch_core::detect::{LabelRegistry, ScriptEntry};
use phonewatch_core::geometry::{BBox, FrameSize};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
}

impl ScriptError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScriptError::Io { .. } => None,
            ScriptError::Parse { line, .. } | ScriptError::Schema { line, .. } => Some(*line),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    frame: u64,
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    space: [u32; 2],
}

pub fn parse_script(text: &str, labels: &LabelRegistry) -> Result<Vec<ScriptEntry>, ScriptError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| ScriptError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let schema = |message: String| ScriptError::Schema {
            line: line_no,
            message,
        };
        let label = labels
            .lookup(&raw.label)
            .ok_or_else(|| schema(format!("unknown class label `{}`", raw.label)))?;
        if !(0.0..=1.0).contains(&raw.score) {
            return Err(schema(format!("score {} outside [0, 1]", raw.score)));
        }
        let space = FrameSize::try_from(raw.space).map_err(|e| schema(e.to_string()))?;
        let bbox = BBox::try_from(raw.bbox).map_err(|e| schema(e.to_string()))?;
        out.push(ScriptEntry {
            frame: raw.frame,
            label,
            bbox,
            score: raw.score,
            space,
        });
    }
    Ok(out)
}

pub fn load_script(path: &Path, labels: &LabelRegistry) -> Result<Vec<ScriptEntry>, ScriptError> {
    let text = fs::read_to_string(path).map_err(|source| ScriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_script(&text, labels)
}

/// Renders entries back to script lines.
pub fn render_script(entries: &[ScriptEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let v = serde_json::json!({
            "frame": e.frame,
            "label": e.label.as_str(),
            "box": e.bbox.to_array(),
            "score": e.score,
            "space": [e.space.width(), e.space.height()],
        });
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s
}
