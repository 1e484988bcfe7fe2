use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::Context;

use dtvit_core::datapipe::{DatasetIndex, IndexRecord};
use dtvit_core::morph::{preprocess, MorphParams};
use dtvit_core::raster::Raster;
use dtvit_core::{ImageTensor, LabeledSample};

pub const INDEX_FILE: &str = "index.tsv";

/// Accepts either an index file or a directory holding `index.tsv`.
/// Returns the index path and the directory its image paths are relative to.
pub fn resolve_index(path: &Path) -> (PathBuf, PathBuf) {
    let index = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
    let base = match index.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    (index, base)
}

pub fn read_index(path: &Path) -> anyhow::Result<(DatasetIndex, PathBuf)> {
    let (index, base) = resolve_index(path);
    let idx = DatasetIndex::read(&index).with_context(|| format!("reading index {}", index.display()))?;
    Ok((idx, base))
}

/// Decodes a raster into a 3-channel [0, 255] image. Raw scans go through
/// the morphology pipeline first; 8-bit rasters are taken as already processed.
pub fn load_image(path: &Path, morph: &MorphParams) -> anyhow::Result<ImageTensor> {
    let raster = Raster::read(path).with_context(|| format!("{}", path.display()))?;
    let gray = match raster {
        Raster::Raw(scan) => preprocess(&scan, morph).with_context(|| format!("{}", path.display()))?,
        Raster::Gray(g) => g,
    };
    Ok(ImageTensor::from_gray8(gray.height(), gray.width(), gray.pixels())?)
}

/// Loads samples in record order, decoding each distinct image once.
pub fn load_samples(records: &[IndexRecord], base: &Path, morph: &MorphParams) -> anyhow::Result<Vec<LabeledSample>> {
    let mut cache: HashMap<&str, ImageTensor> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let image = match cache.get(r.path.as_str()) {
                Some(img) => img.clone(),
                None => {
                    let img = load_image(&base.join(&r.path), morph)?;
                    cache.insert(&r.path, img.clone());
                    img
                }
            };
            LabeledSample::new(image, r.presence, r.location).with_context(|| format!("record {}", r.id))
        })
        .collect()
}
