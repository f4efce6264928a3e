//! Paired augmentation: one geometric transform shared by both views,
//! independent intensity jitter per view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation angles are drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Additive brightness offsets are drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factors are drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Whether the per-view intensity jitter is applied.
    pub jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            jitter: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub angle_deg: f64,
    pub flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricTransform {
    pub brightness: f64,
    pub contrast: f64,
}

impl PhotometricTransform {
    pub const IDENTITY: Self = Self {
        brightness: 0.0,
        contrast: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPair {
    pub view1: GrayImage,
    pub view2: GrayImage,
    pub geometric: GeometricTransform,
    pub photometric: [PhotometricTransform; 2],
}

/// Rotates about the image centre (bilinear, edge-replicating) and then
/// optionally mirrors left-right.
pub fn apply_geometric(img: &GrayImage, t: &GeometricTransform) -> GrayImage {
    let n = img.size;
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, n as isize - 1) as usize;
        let j = j.clamp(0, n as isize - 1) as usize;
        img.pixels[i * n + j]
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let jj = if t.flip { n - 1 - j } else { j };
            // inverse rotation of the destination pixel
            let (y, x) = (i as f64 - c, jj as f64 - c);
            let sy = cos * y - sin * x + c;
            let sx = sin * y + cos * x + c;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[i * n + j] = top * (1.0 - fy) + bottom * fy;
        }
    }
    GrayImage { size: n, pixels: out }
}

/// Contrast about the image mean, then a brightness offset, clamped to `[0, 1]`.
pub fn apply_photometric(img: &GrayImage, t: &PhotometricTransform) -> GrayImage {
    if *t == PhotometricTransform::IDENTITY {
        return img.clone();
    }
    let mean = img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
    GrayImage {
        size: img.size,
        pixels: img
            .pixels
            .iter()
            .map(|&v| ((v - mean) * t.contrast + mean + t.brightness).clamp(0.0, 1.0))
            .collect(),
    }
}

/// Two views of `image` sharing one geometric transform.
pub fn make_augmented_pair(image: &GrayImage, seed: u64, cfg: &AugmentConfig) -> AugmentPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle_deg = if cfg.max_rotation_deg > 0.0 {
        rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let geometric = GeometricTransform { angle_deg, flip };
    let mut jitter = || {
        if !cfg.jitter {
            return PhotometricTransform::IDENTITY;
        }
        let b = cfg.brightness.abs();
        let c = cfg.contrast.abs();
        PhotometricTransform {
            brightness: if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 },
            contrast: if c > 0.0 {
                rng.random_range(1.0 - c..=1.0 + c)
            } else {
                1.0
            },
        }
    };
    let photometric = [jitter(), jitter()];
    let base = apply_geometric(image, &geometric);
    AugmentPair {
        view1: apply_photometric(&base, &photometric[0]),
        view2: apply_photometric(&base, &photometric[1]),
        geometric,
        photometric,
    }
}
