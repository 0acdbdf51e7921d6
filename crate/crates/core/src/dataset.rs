//! On-disk dataset layout: `<root>/<split>/{A,B}/<pair_id>.<ext>` plus `<root>/manifest.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{normalize_intensity, validate_pair, DatasetSplit, SamplePair};
use crate::error::{Error, Result};
use crate::rawfile::{self, ArrayKind};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;
const RASTER_EXTENSIONS: [&str; 2] = [rawfile::EXTENSION, "png"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub normalization: Normalization,
    /// Whether targets are pixel-aligned with sources (they then double as clean references).
    #[serde(default = "default_true")]
    pub aligned: bool,
    pub splits: BTreeMap<String, usize>,
    /// Free-form record of how the data was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<toml::Value>,
}

fn default_true() -> bool {
    true
}

impl Manifest {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            height,
            width,
            normalization: Normalization::default(),
            aligned: true,
            splits: BTreeMap::new(),
            generator: None,
        }
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!("manifest version {} unsupported", m.format_version)));
    }
    Ok(m)
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let text = toml::to_string(manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes both modalities of every pair as raw float files.
pub fn write_split(root: &Path, split_name: &str, split: &DatasetSplit) -> Result<()> {
    for modality in ["A", "B"] {
        let dir = root.join(split_name).join(modality);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for p in split.pairs() {
        let file = format!("{}.{}", p.pair_id, rawfile::EXTENSION);
        rawfile::write_image(&root.join(split_name).join("A").join(&file), &p.source)?;
        rawfile::write_image(&root.join(split_name).join("B").join(&file), &p.target)?;
    }
    Ok(())
}

fn raster_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| RASTER_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!("two rasters share stem {stem:?}: {} and {}", prev.display(), path.display())));
        }
    }
    Ok(out)
}

/// Raw (un-normalized) samples of a single-channel raster.
pub fn read_raster(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).unwrap_or_default();
    if ext == rawfile::EXTENSION {
        let raw = rawfile::read(path)?;
        if raw.kind != ArrayKind::Image || raw.channels != 1 {
            return Err(Error::Dataset(format!("{} is not a single-channel image", path.display())));
        }
        return Ok((raw.height, raw.width, raw.data));
    }
    let img = image::open(path).map_err(|e| Error::Codec { path: path.to_path_buf(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected 8- or 16-bit grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok((h, w, data))
}

/// Loads one split, pairing A and B files by stem. Pairs are ordered by id.
pub fn load_split(root: &Path, split_name: &str) -> Result<DatasetSplit> {
    let manifest = read_manifest(root)?;
    let a = raster_files(&root.join(split_name).join("A"))?;
    let b = raster_files(&root.join(split_name).join("B"))?;
    if let Some(stem) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(Error::Dataset(format!("{split_name}/B/{stem} has no modality-A partner")));
    }
    let Normalization { lo, hi } = manifest.normalization;
    let load = |path: &Path| -> Result<_> {
        let (h, w, raw) = read_raster(path)?;
        if (h, w) != (manifest.height, manifest.width) {
            return Err(Error::Dataset(format!(
                "{} is {h}x{w}, manifest says {}x{}",
                path.display(),
                manifest.height,
                manifest.width
            )));
        }
        normalize_intensity(&raw, h, w, lo, hi)
    };
    let mut pairs = Vec::with_capacity(a.len());
    for (stem, pa) in &a {
        let pb = b.get(stem).ok_or_else(|| Error::Dataset(format!("{split_name}/A/{stem} has no modality-B partner")))?;
        let (source, target) = (load(pa)?, load(pb)?);
        let pair = if manifest.aligned {
            SamplePair::aligned(stem.clone(), source, target)
        } else {
            SamplePair { pair_id: stem.clone(), source, target, aligned_target: None }
        };
        pairs.push(validate_pair(pair)?);
    }
    if let Some(&expected) = manifest.splits.get(split_name) {
        if expected != pairs.len() {
            return Err(Error::Dataset(format!("manifest lists {expected} {split_name} pairs, found {}", pairs.len())));
        }
    }
    DatasetSplit::new(pairs)
}
