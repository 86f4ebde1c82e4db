//! Error-map rendering: one colour per confusion category.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMapPalette {
    pub tp: [u8; 3],
    pub tn: [u8; 3],
    pub fp: [u8; 3],
    pub fn_: [u8; 3],
}

impl Default for ErrorMapPalette {
    /// TP white, TN black, FP red, FN blue.
    fn default() -> Self {
        Self { tp: [255, 255, 255], tn: [0, 0, 0], fp: [255, 0, 0], fn_: [0, 0, 255] }
    }
}

impl ErrorMapPalette {
    pub fn colors(&self) -> [[u8; 3]; 4] {
        [self.tp, self.tn, self.fp, self.fn_]
    }
}

pub fn render_error_map(pred: &[u8], gt: &[u8], height: usize, width: usize, palette: &ErrorMapPalette) -> Result<RgbImage> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::Input(format!(
            "masks of {} and {} pixels do not fit {height}x{width}",
            pred.len(),
            gt.len()
        )));
    }
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        let c = match (p, g) {
            (1, 1) => palette.tp,
            (0, 0) => palette.tn,
            (1, 0) => palette.fp,
            (0, 1) => palette.fn_,
            _ => return Err(Error::Input(format!("non-binary mask value at pixel {i}"))),
        };
        img.put_pixel((i % width) as u32, (i / width) as u32, Rgb(c));
    }
    Ok(img)
}
