use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ImagePair;
use crate::{Error, Result};

/// Random transforms for training pairs. Each scalar parameter is drawn
/// uniformly from its closed range for every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Allowed rotations in quarter turns (0..=3), counter-clockwise.
    pub rotations: Vec<u8>,
    /// Gaussian noise standard deviation on the 0..255 scale.
    pub gaussian_sigma: (f64, f64),
    /// Fraction of pixels replaced by salt or pepper.
    pub salt_pepper_density: (f64, f64),
    /// Side of the random crop relative to the image, resized back.
    pub crop_scale: (f64, f64),
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            rotations: vec![0],
            gaussian_sigma: (0.0, 0.0),
            salt_pepper_density: (0.0, 0.0),
            crop_scale: (1.0, 1.0),
            seed: 0,
        }
    }

    /// Training default: any quarter turn, mild noise, crops down to 80 %.
    pub fn standard(seed: u64) -> Self {
        Self {
            rotations: vec![0, 1, 2, 3],
            gaussian_sigma: (0.0, 8.0),
            salt_pepper_density: (0.0, 0.01),
            crop_scale: (0.8, 1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b;
        if self.rotations.is_empty() || self.rotations.iter().any(|&r| r > 3) {
            return Err(Error::Config("rotations must be a non-empty subset of 0..=3 quarter turns".into()));
        }
        let (s0, s1) = self.gaussian_sigma;
        if !ordered(self.gaussian_sigma) || s0 < 0.0 || s1 > 25.0 {
            return Err(Error::Config(format!("gaussian sigma range {:?} outside [0, 25]", self.gaussian_sigma)));
        }
        let (d0, d1) = self.salt_pepper_density;
        if !ordered(self.salt_pepper_density) || d0 < 0.0 || d1 > 0.05 {
            return Err(Error::Config(format!(
                "salt-and-pepper density {:?} outside [0, 0.05]",
                self.salt_pepper_density
            )));
        }
        let (c0, c1) = self.crop_scale;
        if !ordered(self.crop_scale) || c0 <= 0.0 || c1 > 1.0 {
            return Err(Error::Config(format!("crop scale {:?} outside (0, 1]", self.crop_scale)));
        }
        Ok(())
    }
}

/// RNG for one sample, determined only by the global seed, the epoch and
/// the sample index.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
    rng
}

fn remap(src: &[u8], channels: usize, out_h: usize, out_w: usize, map: impl Fn(usize, usize) -> usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for y in 0..out_h {
        for x in 0..out_w {
            let s = map(y, x) * channels;
            out.extend_from_slice(&src[s..s + channels]);
        }
    }
    out
}

fn geometric(pair: &ImagePair, out_h: usize, out_w: usize, map: impl Fn(usize, usize) -> usize) -> ImagePair {
    ImagePair {
        id: pair.id.clone(),
        height: out_h,
        width: out_w,
        t1: remap(&pair.t1, 3, out_h, out_w, &map),
        t2: remap(&pair.t2, 3, out_h, out_w, &map),
        label: remap(&pair.label, 1, out_h, out_w, &map),
    }
}

/// Rotate all three rasters by `k` counter-clockwise quarter turns.
pub fn rotate_quarter(pair: &ImagePair, k: u8) -> ImagePair {
    let (h, w) = (pair.height, pair.width);
    match k % 4 {
        0 => pair.clone(),
        1 => geometric(pair, w, h, |y, x| x * w + (w - 1 - y)),
        2 => geometric(pair, h, w, |y, x| (h - 1 - y) * w + (w - 1 - x)),
        _ => geometric(pair, w, h, |y, x| (h - 1 - x) * w + y),
    }
}

/// Crop `[y0, y0 + ch) x [x0, x0 + cw)` and resize back to the full size
/// with nearest-neighbour sampling, so labels stay binary and every output
/// pixel of every raster comes from the same source pixel.
pub fn crop_resize(pair: &ImagePair, y0: usize, x0: usize, ch: usize, cw: usize) -> ImagePair {
    let (h, w) = (pair.height, pair.width);
    geometric(pair, h, w, |y, x| {
        let sy = y0 + (y * ch) / h;
        let sx = x0 + (x * cw) / w;
        sy * w + sx
    })
}

fn gaussian_noise(img: &mut [u8], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    for v in img.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + sigma * z).round().clamp(0.0, 255.0) as u8;
    }
}

fn salt_pepper(img: &mut [u8], density: f64, rng: &mut impl Rng) {
    if density <= 0.0 {
        return;
    }
    for px in img.chunks_mut(3) {
        if rng.random::<f64>() < density {
            let v = if rng.random::<bool>() { 255 } else { 0 };
            px.fill(v);
        }
    }
}

fn draw(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Crop-resize and rotation act identically on both images and the label;
/// noise is drawn independently for each image and never touches the label.
pub fn augment(pair: &ImagePair, policy: &AugmentationPolicy, rng: &mut impl Rng) -> ImagePair {
    let (h, w) = (pair.height, pair.width);
    let scale = draw(policy.crop_scale, rng);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let y0 = if ch < h { rng.random_range(0..=h - ch) } else { 0 };
    let x0 = if cw < w { rng.random_range(0..=w - cw) } else { 0 };
    let mut out = if (ch, cw) == (h, w) { pair.clone() } else { crop_resize(pair, y0, x0, ch, cw) };

    let k = policy.rotations[rng.random_range(0..policy.rotations.len())];
    out = rotate_quarter(&out, k);

    for img in [&mut out.t1, &mut out.t2] {
        let sigma = draw(policy.gaussian_sigma, rng);
        gaussian_noise(img, sigma, rng);
        let density = draw(policy.salt_pepper_density, rng);
        salt_pepper(img, density, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{coordinate_pair, decode_coordinate};
    use proptest::prelude::*;

    #[test]
    fn identity_policy_is_identity() {
        let p = coordinate_pair("p", 32, 48);
        let mut rng = sample_rng(1, 0, 0);
        assert_eq!(augment(&p, &AugmentationPolicy::identity(), &mut rng), p);
    }

    #[test]
    fn quarter_turn_group() {
        let p = coordinate_pair("p", 16, 24);
        assert_eq!(rotate_quarter(&rotate_quarter(&p, 1), 1), rotate_quarter(&p, 2));
        assert_eq!(rotate_quarter(&rotate_quarter(&p, 3), 1), p);
        let r = rotate_quarter(&p, 1);
        assert_eq!((r.height, r.width), (24, 16));
    }

    #[test]
    fn same_seed_same_output() {
        let p = coordinate_pair("p", 32, 32);
        let pol = AugmentationPolicy::standard(3);
        let a = augment(&p, &pol, &mut sample_rng(3, 2, 5));
        let b = augment(&p, &pol, &mut sample_rng(3, 2, 5));
        assert_eq!(a, b);
        let c = augment(&p, &pol, &mut sample_rng(3, 2, 6));
        assert_ne!(a, c);
    }

    #[test]
    fn policy_bounds() {
        assert!(AugmentationPolicy::standard(0).validate().is_ok());
        let mut p = AugmentationPolicy::identity();
        p.salt_pepper_density = (0.0, 0.2);
        assert!(p.validate().is_err());
        let mut p = AugmentationPolicy::identity();
        p.rotations = vec![4];
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn geometry_consistent(seed in 0u64..10_000) {
            let src = coordinate_pair("c", 32, 32);
            let pol = AugmentationPolicy { gaussian_sigma: (0.0, 0.0), salt_pepper_density: (0.0, 0.0), ..AugmentationPolicy::standard(seed) };
            let out = augment(&src, &pol, &mut sample_rng(seed, 0, 0));
            for i in 0..out.height * out.width {
                let a = decode_coordinate(&out.t1[i * 3..i * 3 + 3]);
                let b = decode_coordinate(&out.t2[i * 3..i * 3 + 3]);
                prop_assert_eq!(a, b);
                prop_assert_eq!(out.label[i], src.label[a.0 * src.width + a.1]);
            }
        }

        #[test]
        fn noisy_labels_stay_binary(seed in 0u64..1000) {
            let src = coordinate_pair("c", 16, 16);
            let out = augment(&src, &AugmentationPolicy::standard(seed), &mut sample_rng(seed, 1, 2));
            prop_assert!(out.label.iter().all(|&v| v <= 1));
        }
    }
}
