//! Density fields to grayscale classifier inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::grid::GridField;

/// Square grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(size: usize, bytes: &[u8]) -> Self {
        Self {
            size,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.size as u32, self.size as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&self.to_u8()).map_err(png_err)?;
        }
        Ok(out)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).at(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale
            || info.bit_depth != png::BitDepth::Eight
            || info.width != info.height
        {
            return Err(bad(format!(
                "expected square 8-bit grayscale, got {:?}/{:?} {}x{}",
                info.color_type, info.bit_depth, info.width, info.height
            )));
        }
        Ok(Self::from_u8(info.width as usize, &buf[..info.buffer_size()]))
    }
}

fn png_err(e: png::EncodingError) -> Error {
    Error::Format {
        path: Default::default(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Output side length in pixels.
    pub output_size: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Intensity of fully saturated tumour tissue.
    pub foreground: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            output_size: 112,
            noise_sigma: 0.02,
            foreground: 0.9,
        }
    }
}

/// Box-filter resampling of a row-major `src_h x src_w` array to `dst_h x dst_w`.
/// Each output cell is the area-weighted mean of the source cells it covers.
pub fn resample_area(src: &[f64], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    let weights = |n_src: usize, n_dst: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut s = lo.floor() as usize;
                while (s as f64) < hi && s < n_src {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((s, overlap / scale));
                    }
                    s += 1;
                }
                taps
            })
            .collect()
    };
    let rows = weights(src_h, dst_h);
    let cols = weights(src_w, dst_w);
    let mut out = vec![0.0; dst_h * dst_w];
    for (oi, rtaps) in rows.iter().enumerate() {
        for (oj, ctaps) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(si, wr) in rtaps {
                for &(sj, wc) in ctaps {
                    acc += wr * wc * src[si * src_w + sj];
                }
            }
            out[oi * dst_w + oj] = acc;
        }
    }
    out
}

/// Low-frequency background: a few random plane waves around mid-grey.
fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let amp = rng.random_range(0.02..0.05);
            let fy = rng.random_range(-2.0..2.0);
            let fx = rng.random_range(-2.0..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, fy, fx, phase)
        })
        .collect();
    let base = rng.random_range(0.25..0.35);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
            let v: f64 = waves
                .iter()
                .map(|&(a, fy, fx, ph)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos())
                .sum();
            out.push(base + v);
        }
    }
    out
}

/// Composites `u / k` over a seeded background texture, adds Gaussian noise,
/// clamps to `[0, 1]` and resamples to `cfg.output_size`.
pub fn render_image(u: &GridField, k: f64, noise_seed: u64, cfg: &RenderConfig) -> GrayImage {
    let (h, w) = (u.height(), u.width());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let bg = background(h, w, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let pixels: Vec<f64> = u
        .values()
        .iter()
        .zip(&bg)
        .map(|(&ui, &b)| {
            let alpha = (ui / k).clamp(0.0, 1.0);
            let v = b * (1.0 - alpha) + cfg.foreground * alpha;
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (v + n).clamp(0.0, 1.0)
        })
        .collect();
    let size = cfg.output_size;
    GrayImage {
        size,
        pixels: resample_area(&pixels, h, w, size, size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> RenderConfig {
        RenderConfig {
            output_size: 32,
            noise_sigma: noise,
            foreground: 0.9,
        }
    }

    #[test]
    fn empty_field_renders_background_only() {
        let u = GridField::constant(64, 64, 1.0, 0.0).unwrap();
        let img = render_image(&u, 1.0, 5, &cfg(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bg = background(64, 64, &mut rng);
        assert_eq!(img.pixels, resample_area(&bg, 64, 64, 32, 32));
        assert!(img.pixels.iter().all(|&p| (0.1..0.5).contains(&p)));
    }

    #[test]
    fn saturated_field_renders_foreground() {
        let u = GridField::constant(64, 64, 1.0, 1.4).unwrap();
        let img = render_image(&u, 1.4, 5, &cfg(0.0));
        assert!(img.pixels.iter().all(|&p| (p - 0.9).abs() < 1e-12));
    }

    #[test]
    fn rendering_is_deterministic_and_clamped() {
        let u = crate::sim::gaussian_blob(64, 64, 1.0, (30.0, 30.0), 8.0, 1.0).unwrap();
        let a = render_image(&u, 1.0, 9, &cfg(0.3));
        let b = render_image(&u, 1.0, 9, &cfg(0.3));
        assert_eq!(a.to_u8(), b.to_u8());
        assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_ne!(a.to_u8(), render_image(&u, 1.0, 10, &cfg(0.3)).to_u8());
    }

    #[test]
    fn area_resampling_preserves_mean_and_constants() {
        let src: Vec<f64> = (0..128 * 128).map(|i| (i % 7) as f64).collect();
        let dst = resample_area(&src, 128, 128, 14, 14);
        let mean_src = src.iter().sum::<f64>() / src.len() as f64;
        let mean_dst = dst.iter().sum::<f64>() / dst.len() as f64;
        assert!((mean_src - mean_dst).abs() < 1e-9);
        let ones = resample_area(&vec![1.0; 100], 10, 10, 4, 4);
        assert!(ones.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // integer factor reduces to block means
        let block = resample_area(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 1);
        assert_eq!(block, vec![2.5]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage {
            size: 3,
            pixels: vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1, 0.2, 0.3, 0.4],
        };
        let path = dir.path().join("x.png");
        std::fs::write(&path, img.encode_png().unwrap()).unwrap();
        let back = GrayImage::read_png(&path).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
    }
}
