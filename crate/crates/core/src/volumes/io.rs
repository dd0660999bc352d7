use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{unravel, Grid3};
use crate::error::{Error, Result};

pub const MVOL_MAGIC: &str = "MVOL1";
const DTYPE: &str = "f32le";

/// JSON header stored next to the raw payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvolHeader {
    pub magic: String,
    pub dims: [usize; 3],
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub dtype: String,
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A named stack of same-shaped grids together with free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MvolStack {
    pub channel_names: Vec<String>,
    pub channels: Vec<Grid3>,
    pub meta: serde_json::Value,
}

impl MvolStack {
    pub fn single(name: impl Into<String>, grid: Grid3, meta: serde_json::Value) -> Self {
        Self {
            channel_names: vec![name.into()],
            channels: vec![grid],
            meta,
        }
    }

    pub fn channel(&self, name: &str) -> Option<&Grid3> {
        self.channel_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.channels[i])
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Invariant("MVOL stack needs at least one channel".into()));
        }
        if self.channels.len() != self.channel_names.len() {
            return Err(Error::Invariant(format!(
                "{} channels but {} channel names",
                self.channels.len(),
                self.channel_names.len()
            )));
        }
        let first = &self.channels[0];
        if let Some(i) = self.channels.iter().position(|c| !c.same_shape(first)) {
            return Err(Error::Invariant(format!(
                "channel '{}' has dims {:?}, expected {:?}",
                self.channel_names[i],
                self.channels[i].dims(),
                first.dims()
            )));
        }
        Ok(())
    }
}

/// Resolves `<stem>.mvol.json` / `<stem>.mvol.raw` from a stem or from
/// either file name.
pub fn mvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".mvol.json")
        .or_else(|| s.strip_suffix(".mvol.raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.mvol.json")),
        PathBuf::from(format!("{stem}.mvol.raw")),
    )
}

pub fn write_mvol(stack: &MvolStack, path: impl AsRef<Path>) -> Result<()> {
    stack.validate()?;
    let (json_path, raw_path) = mvol_paths(path.as_ref());
    let first = &stack.channels[0];
    let header = MvolHeader {
        magic: MVOL_MAGIC.into(),
        dims: first.dims(),
        channels: stack.channels.len(),
        channel_names: stack.channel_names.clone(),
        dtype: DTYPE.into(),
        spacing_mm: first.spacing(),
        meta: stack.meta.clone(),
    };
    let mut payload = Vec::with_capacity(stack.channels.len() * first.len() * 4);
    for c in &stack.channels {
        for v in c.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolStack> {
    let (json_path, raw_path) = mvol_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: json_path.clone(),
        reason,
    };
    let header: MvolHeader = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if header.magic != MVOL_MAGIC {
        return Err(malformed(format!("bad magic '{}'", header.magic)));
    }
    if header.dtype != DTYPE {
        return Err(malformed(format!("unsupported dtype '{}'", header.dtype)));
    }
    if header.channels == 0 || header.channels != header.channel_names.len() {
        return Err(malformed(format!(
            "channels = {} but {} names",
            header.channels,
            header.channel_names.len()
        )));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(malformed(format!("dims {:?} must be positive", header.dims)));
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(malformed(format!("spacing {:?} must be positive", header.spacing_mm)));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims.iter().product::<usize>();
    let expected = n * header.channels;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: bytes.len() / 4,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let [x, y, z] = unravel(header.dims, i % n);
        return Err(Error::NonFinite {
            channel: i / n,
            x,
            y,
            z,
        });
    }
    let channels = values
        .chunks_exact(n)
        .map(|c| Grid3::new(header.dims, header.spacing_mm, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MvolStack {
        channel_names: header.channel_names,
        channels,
        meta: header.meta,
    })
}
