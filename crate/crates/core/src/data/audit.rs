use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loader::{resolve_manifest, Split, SplitManifest};
use super::raster::read_label;
use crate::metrics::{format_ratio, imbalance_ratio, DatasetStats};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSize {
    pub split: Split,
    pub pairs: usize,
    pub tiles: usize,
    /// True when the split was carved out of the training list.
    pub carved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub changed_pixels: u64,
    pub unchanged_pixels: u64,
    pub imbalance_ratio: f64,
    pub ratio: String,
    pub label_files: usize,
    pub splits: Vec<SplitSize>,
}

fn tiles_in(root: &Path, manifest: &SplitManifest) -> Result<usize> {
    let t = manifest.tile_size;
    let mut total = 0;
    for id in &manifest.pair_ids {
        let path = root.join("label").join(format!("{id}.png"));
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        total += (h as usize / t) * (w as usize / t);
    }
    Ok(total)
}

/// Exact pixel counts over every `label/*.png`, the resulting imbalance
/// ratio, and per-split pair/tile counts for whichever manifests exist.
pub fn audit_dataset(root: &Path, tile_size: usize) -> Result<AuditReport> {
    let label_dir = root.join("label");
    let mut files: Vec<_> = std::fs::read_dir(&label_dir)
        .map_err(|e| Error::ingestion(&label_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let mut stats = DatasetStats { changed_pixels: 0, unchanged_pixels: 0 };
    for f in &files {
        let (_, _, mask) = read_label(f)?;
        let changed: u64 = mask.iter().map(|&v| v as u64).sum();
        stats.changed_pixels += changed;
        stats.unchanged_pixels += mask.len() as u64 - changed;
    }
    let ratio = imbalance_ratio(&stats)?;

    let mut splits = Vec::new();
    let has_val = SplitManifest::path(root, Split::Val).exists();
    for split in Split::ALL {
        let listed = SplitManifest::path(root, split).exists();
        let carved = split == Split::Val && !has_val && SplitManifest::path(root, Split::Train).exists();
        if !listed && !carved {
            continue;
        }
        let m = resolve_manifest(root, split, tile_size, 0)?;
        splits.push(SplitSize { split, pairs: m.len(), tiles: tiles_in(root, &m)?, carved });
    }
    Ok(AuditReport {
        changed_pixels: stats.changed_pixels,
        unchanged_pixels: stats.unchanged_pixels,
        imbalance_ratio: ratio,
        ratio: format_ratio(ratio),
        label_files: files.len(),
        splits,
    })
}
