//! Stochastic views for positive pairs.
//!
//! Geometric transforms (resized crop, horizontal flip) act on every channel
//! of a view alike. Photometric transforms (colour jitter, grayscale) touch
//! only the first three channels of 3- and 4-channel images; a fourth channel
//! and single-channel images are left photometrically untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bilinear, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Area fraction range of the random resized crop.
    pub crop_scale_range: (f32, f32),
    pub horizontal_flip_prob: f32,
    /// Brightness, contrast and saturation vary by `0.8 * s`, hue by `0.2 * s`.
    pub color_jitter_strength: f32,
    pub grayscale_prob: f32,
    /// Side length of produced views; `None` keeps the input size.
    pub output_size: Option<usize>,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            horizontal_flip_prob: 0.5,
            color_jitter_strength: 0.4,
            grayscale_prob: 0.1,
            output_size: None,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration under which both views equal the (resized) input.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            color_jitter_strength: 0.0,
            grayscale_prob: 0.0,
            output_size: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [
            ("horizontal_flip_prob", self.horizontal_flip_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.color_jitter_strength.is_nan() || self.color_jitter_strength < 0.0 {
            return Err(Error::Config(format!(
                "color_jitter_strength must be nonnegative, got {}",
                self.color_jitter_strength
            )));
        }
        if self.output_size == Some(0) {
            return Err(Error::Config("output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Two independent views of `image`.
///
/// Each view draws separate geometric and photometric seeds from `rng`, so
/// toggling photometric settings never changes the geometry of either view.
pub fn augment_pair(image: &Image, cfg: &AugmentationConfig, rng: &mut impl Rng) -> (Image, Image) {
    let seeds: [u64; 4] = rng.random();
    let v1 = augment_view(image, cfg, seeds[0], seeds[1]);
    let v2 = augment_view(image, cfg, seeds[2], seeds[3]);
    (v1, v2)
}

/// One view from explicit geometric and photometric seeds.
pub fn augment_view(image: &Image, cfg: &AugmentationConfig, geo_seed: u64, photo_seed: u64) -> Image {
    let mut geo = ChaCha8Rng::seed_from_u64(geo_seed);
    let size = cfg.output_size.unwrap_or(image.height);
    let mut out = crop_and_flip(image, cfg, size, &mut geo);
    if image.channels >= 3 {
        let mut photo = ChaCha8Rng::seed_from_u64(photo_seed);
        photometric(&mut out, cfg, &mut photo);
    }
    out
}

fn crop_and_flip(image: &Image, cfg: &AugmentationConfig, size: usize, rng: &mut impl Rng) -> Image {
    let (lo, hi) = cfg.crop_scale_range;
    let area = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let log_ratio = rng.random_range((3.0f32 / 4.0).ln()..=(4.0f32 / 3.0).ln());
    let ratio = log_ratio.exp();
    let (mut cw, mut ch) = ((area * ratio).sqrt(), (area / ratio).sqrt());
    // Keep the sampled area when the aspect ratio would overflow the image.
    if cw > 1.0 {
        (cw, ch) = (1.0, area);
    } else if ch > 1.0 {
        (cw, ch) = (area, 1.0);
    }
    let x0 = if cw < 1.0 { rng.random_range(0.0..=1.0 - cw) } else { 0.0 };
    let y0 = if ch < 1.0 { rng.random_range(0.0..=1.0 - ch) } else { 0.0 };
    let flip = cfg.horizontal_flip_prob > 0.0 && rng.random::<f32>() < cfg.horizontal_flip_prob;

    let (h, w) = (image.height as f32, image.width as f32);
    let sy = ch * h / size as f32;
    let sx = cw * w / size as f32;
    let mut out = Image::zeros(image.channels, size, size);
    for c in 0..image.channels {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for oy in 0..size {
            let fy = y0 * h + (oy as f32 + 0.5) * sy - 0.5;
            for ox in 0..size {
                let fx = x0 * w + (ox as f32 + 0.5) * sx - 0.5;
                let tx = if flip { size - 1 - ox } else { ox };
                dst[oy * size + tx] = bilinear(src, image.height, image.width, fy, fx);
            }
        }
    }
    out
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn photometric(img: &mut Image, cfg: &AugmentationConfig, rng: &mut impl Rng) {
    let n = img.plane_len();
    let s = cfg.color_jitter_strength;
    if s > 0.0 {
        let b = 0.8 * s;
        let brightness = rng.random_range((1.0 - b).max(0.0)..=1.0 + b);
        let contrast = rng.random_range((1.0 - b).max(0.0)..=1.0 + b);
        let saturation = rng.random_range((1.0 - b).max(0.0)..=1.0 + b);
        let hue = rng.random_range(-0.2 * s..=0.2 * s);
        let (rgb, _) = img.data.split_at_mut(3 * n);
        let (r, rest) = rgb.split_at_mut(n);
        let (g, bl) = rest.split_at_mut(n);

        for i in 0..n {
            r[i] = (r[i] * brightness).clamp(0.0, 1.0);
            g[i] = (g[i] * brightness).clamp(0.0, 1.0);
            bl[i] = (bl[i] * brightness).clamp(0.0, 1.0);
        }
        let mean = (0..n).map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * bl[i]).sum::<f32>() / n as f32;
        for i in 0..n {
            r[i] = ((r[i] - mean) * contrast + mean).clamp(0.0, 1.0);
            g[i] = ((g[i] - mean) * contrast + mean).clamp(0.0, 1.0);
            bl[i] = ((bl[i] - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        for i in 0..n {
            let gray = LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * bl[i];
            r[i] = (gray + (r[i] - gray) * saturation).clamp(0.0, 1.0);
            g[i] = (gray + (g[i] - gray) * saturation).clamp(0.0, 1.0);
            bl[i] = (gray + (bl[i] - gray) * saturation).clamp(0.0, 1.0);
        }
        // Hue: rotate chroma in YIQ space.
        let (sin, cos) = (2.0 * std::f32::consts::PI * hue).sin_cos();
        for i in 0..n {
            let y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
            let ci = 0.596 * r[i] - 0.274 * g[i] - 0.322 * bl[i];
            let cq = 0.211 * r[i] - 0.523 * g[i] + 0.312 * bl[i];
            let (ii, qq) = (ci * cos - cq * sin, ci * sin + cq * cos);
            r[i] = (y + 0.956 * ii + 0.621 * qq).clamp(0.0, 1.0);
            g[i] = (y - 0.272 * ii - 0.647 * qq).clamp(0.0, 1.0);
            bl[i] = (y - 1.106 * ii + 1.703 * qq).clamp(0.0, 1.0);
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.random::<f32>() < cfg.grayscale_prob {
        for i in 0..n {
            let gray = LUMA[0] * img.data[i] + LUMA[1] * img.data[n + i] + LUMA[2] * img.data[2 * n + i];
            img.data[i] = gray;
            img.data[n + i] = gray;
            img.data[2 * n + i] = gray;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn noise_image(channels: usize, size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * size * size).map(|_| rng.random::<f32>()).collect();
        Image::from_vec(channels, size, size, data).unwrap()
    }

    #[test]
    fn identity_config_returns_input() {
        let img = noise_image(4, 12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment_pair(&img, &AugmentationConfig::identity(), &mut rng);
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn identity_config_with_resize_returns_resized_input() {
        let img = noise_image(3, 12, 2);
        let cfg = AugmentationConfig {
            output_size: Some(8),
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment_pair(&img, &cfg, &mut rng);
        assert_eq!(a, img.resized(8));
        assert_eq!(a, b);
    }

    #[test]
    fn views_are_reproducible_and_bounded() {
        let img = noise_image(3, 16, 3);
        let cfg = AugmentationConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let p1 = augment_pair(&img, &cfg, &mut r1);
        let p2 = augment_pair(&img, &cfg, &mut r2);
        assert_eq!(p1, p2);
        assert_ne!(p1.0, p1.1);
        assert!(p1.0.is_bounded() && p1.1.is_bounded());
    }

    #[test]
    fn fourth_channel_ignores_photometric_settings() {
        let img = noise_image(4, 16, 4);
        let with = AugmentationConfig {
            color_jitter_strength: 0.8,
            grayscale_prob: 1.0,
            ..AugmentationConfig::default()
        };
        let without = AugmentationConfig {
            color_jitter_strength: 0.0,
            grayscale_prob: 0.0,
            ..with.clone()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let (a1, b1) = augment_pair(&img, &with, &mut r1);
        let (a2, b2) = augment_pair(&img, &without, &mut r2);
        assert_eq!(a1.plane(3), a2.plane(3));
        assert_eq!(b1.plane(3), b2.plane(3));
        assert_ne!(a1.plane(0), a2.plane(0));
    }

    #[test]
    fn single_channel_is_only_geometric() {
        let img = noise_image(1, 10, 6);
        let cfg = AugmentationConfig {
            crop_scale_range: (1.0, 1.0),
            horizontal_flip_prob: 1.0,
            color_jitter_strength: 1.0,
            grayscale_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = augment_pair(&img, &cfg, &mut rng);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(a.at(0, y, x), img.at(0, y, 9 - x));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = AugmentationConfig {
            crop_scale_range: (0.0, 1.0),
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.crop_scale_range = (0.6, 0.5);
        assert!(cfg.validate().is_err());
        let cfg = AugmentationConfig {
            grayscale_prob: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        AugmentationConfig::default().validate().unwrap();
    }
}
