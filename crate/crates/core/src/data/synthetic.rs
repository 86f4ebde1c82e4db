//! Generated pairs for tests, smoke runs and benchmarking.

use rand::Rng;

use super::{write_pair, ImagePair, Split, SplitManifest};
use crate::init::named_rng;
use crate::Result;

/// A pair whose second image equals the first plus one to three solid
/// rectangles; the label marks exactly the rectangles.
pub fn synthetic_pair(id: &str, size: usize, seed: u64) -> ImagePair {
    let mut rng = named_rng(seed, id);
    let base: [i32; 3] = [rng.random_range(60..140), rng.random_range(60..140), rng.random_range(60..140)];
    let mut t1 = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            // low-frequency texture plus pixel noise
            let wave = (((x / 8 + y / 8) % 2) as i32) * 20;
            for b in base {
                let v = b + wave + rng.random_range(-12..=12);
                t1.push(v.clamp(0, 255) as u8);
            }
        }
    }
    let mut t2: Vec<u8> = t1.iter().map(|&v| (v as i32 + rng.random_range(-6..=6)).clamp(0, 255) as u8).collect();
    let mut label = vec![0u8; size * size];
    let boxes = rng.random_range(1..=3);
    for _ in 0..boxes {
        let bh = rng.random_range(size / 8..=size / 3);
        let bw = rng.random_range(size / 8..=size / 3);
        let y0 = rng.random_range(0..=size - bh);
        let x0 = rng.random_range(0..=size - bw);
        let color = [rng.random_range(180..=255u8), rng.random_range(0..=80u8), rng.random_range(120..=255u8)];
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let i = y * size + x;
                label[i] = 1;
                t2[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    ImagePair { id: id.to_string(), height: size, width: size, t1, t2, label }
}

pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    (0..n).map(|i| synthetic_pair(&format!("syn{i:04}"), size, seed)).collect()
}

/// Rasters encoding each pixel's source coordinate (row, column), for checking
/// that geometric transforms move all three rasters together. The label is a
/// 3x3-cell checkerboard.
pub fn coordinate_pair(id: &str, height: usize, width: usize) -> ImagePair {
    let mut t1 = Vec::with_capacity(height * width * 3);
    let mut label = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            t1.extend_from_slice(&[(y % 256) as u8, (x % 256) as u8, ((y / 256) * 16 + x / 256) as u8]);
            label.push((((y / 3) + (x / 3)) % 2) as u8);
        }
    }
    let t2 = t1.clone();
    ImagePair { id: id.to_string(), height, width, t1, t2, label }
}

/// Recover the (row, column) stored by [`coordinate_pair`], from either image.
pub fn decode_coordinate(px: &[u8]) -> (usize, usize) {
    let hi = px[2] as usize;
    (px[0] as usize + (hi / 16) * 256, px[1] as usize + (hi % 16) * 256)
}

/// Write pairs and manifests in the standard directory layout.
pub fn write_dataset(root: &std::path::Path, splits: &[(Split, &[ImagePair])], tile_size: usize) -> Result<()> {
    for (split, pairs) in splits {
        for p in pairs.iter() {
            write_pair(root, p)?;
        }
        SplitManifest::new(*split, pairs.iter().map(|p| p.id.clone()).collect(), tile_size)?.write(root)?;
    }
    Ok(())
}
