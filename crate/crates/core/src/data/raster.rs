use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::{Error, Result};

/// Co-registered image pair with its change mask, stored row-major.
/// `t1`/`t2` are interleaved RGB (`H * W * 3` bytes), `label` is `H * W`
/// values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePair {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub t1: Vec<u8>,
    pub t2: Vec<u8>,
    pub label: Vec<u8>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, height: usize, width: usize, t1: Vec<u8>, t2: Vec<u8>, label: Vec<u8>) -> Result<Self> {
        let id = id.into();
        let px = height * width;
        if t1.len() != px * 3 || t2.len() != px * 3 || label.len() != px {
            return Err(Error::Input(format!("pair `{id}`: raster sizes do not match {height}x{width}")));
        }
        if label.iter().any(|&v| v > 1) {
            return Err(Error::Input(format!("pair `{id}`: label values must be 0 or 1")));
        }
        Ok(Self { id, height, width, t1, t2, label })
    }

    pub fn changed_pixels(&self) -> u64 {
        self.label.iter().map(|&v| v as u64).sum()
    }
}

pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

/// Reads a mask stored as 0/255 (0/1 is accepted too) into 0/1.
pub fn read_label(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut raw = img.into_raw();
    for v in raw.iter_mut() {
        *v = match *v {
            0 => 0,
            1 | 255 => 1,
            other => return Err(Error::ingestion(path, format!("label value {other} is not 0 or 255"))),
        };
    }
    Ok((h as usize, w as usize, raw))
}

pub fn write_rgb(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Input("RGB buffer does not match its dimensions".into()))?;
    img.save(path).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Writes a 0/1 mask as 0/255.
pub fn write_label(path: &Path, height: usize, width: usize, mask: &[u8]) -> Result<()> {
    let data = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Input("mask buffer does not match its dimensions".into()))?;
    img.save(path).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Writes `A/<id>.png`, `B/<id>.png` and `label/<id>.png` under `root`.
pub fn write_pair(root: &Path, pair: &ImagePair) -> Result<()> {
    for d in ["A", "B", "label"] {
        std::fs::create_dir_all(root.join(d))?;
    }
    let name = format!("{}.png", pair.id);
    write_rgb(&root.join("A").join(&name), pair.height, pair.width, &pair.t1)?;
    write_rgb(&root.join("B").join(&name), pair.height, pair.width, &pair.t2)?;
    write_label(&root.join("label").join(&name), pair.height, pair.width, &pair.label)
}
