//! `.scenes` files: one JSON object per line, fields exactly as in
//! [`Scene`], unknown fields rejected.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use super::Scene;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("line {line}: field `{path}`: {message}")]
    Record {
        line: usize,
        path: String,
        message: String,
    },
    #[error("line {line}: invalid scene: {message}")]
    Invalid { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub fn encode_scene(scene: &Scene) -> String {
    serde_json::to_string(scene).expect("scenes always serialize")
}

pub fn encode_scenes(scenes: &[Scene]) -> String {
    scenes.iter().map(|s| encode_scene(s) + "\n").collect()
}

/// Parses newline-delimited scenes. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn decode_scenes(text: &str) -> Result<Vec<Scene>, SceneIoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_line(line, i + 1)?);
    }
    Ok(out)
}

fn decode_line(line: &str, lineno: usize) -> Result<Scene, SceneIoError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    let scene: Scene = serde_path_to_error::deserialize(de).map_err(|e| SceneIoError::Record {
        line: lineno,
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    scene.validate().map_err(|message| SceneIoError::Invalid {
        line: lineno,
        message,
    })?;
    Ok(scene)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SceneIoError> {
    let io_err = |source| SceneIoError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for s in scenes {
        writeln!(f, "{}", encode_scene(s)).map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, SceneIoError> {
    let io_err = |source| SceneIoError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if !line.trim().is_empty() {
            out.push(decode_line(&line, i + 1)?);
        }
    }
    Ok(out)
}
