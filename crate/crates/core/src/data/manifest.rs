//! JSON-lines dataset manifests.
//!
//! One object per line: `{"image_path": ..., "mask_path": ..., "dataset_name": ...}`,
//! with an optional `"prob_path"` naming a precomputed probability map to score instead
//! of running the network. Relative paths are resolved against the manifest's directory.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub dataset_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_path: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(ManifestEntry {
            image_path: resolve(e.image_path),
            mask_path: resolve(e.mask_path),
            dataset_name: e.dataset_name,
            prob_path: e.prob_path.map(resolve),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).map_err(|e| Error::format(path, e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
