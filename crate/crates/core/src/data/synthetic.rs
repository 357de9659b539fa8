//! Single-factor procedural sources for the composite dataset: a one-channel
//! handwritten-digit look-alike and a three-channel textured-object set.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{ellipse_stroke, hsv_to_rgb, in_polygon, polyline_distance, regular_polygon, star, supersample, Placement};
use super::{Dataset, FactorSpec, Image, LabeledImage};
use crate::error::{Error, Result};

/// Size and seed of a procedural source pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SourceConfig {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("source count must be positive".into()));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("source size must be at least 8, got {}", self.size)));
        }
        Ok(())
    }
}

type Stroke = Vec<(f32, f32)>;

/// Stroke skeletons of the ten digits in a unit box, y pointing down.
fn digit_glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse_stroke(0.5, 0.5, 0.2, 0.32, 20)],
        1 => vec![vec![(0.38, 0.28), (0.52, 0.16), (0.52, 0.84)]],
        2 => vec![vec![
            (0.3, 0.3),
            (0.38, 0.18),
            (0.5, 0.15),
            (0.62, 0.19),
            (0.68, 0.3),
            (0.63, 0.43),
            (0.3, 0.84),
            (0.72, 0.84),
        ]],
        3 => vec![vec![
            (0.3, 0.2),
            (0.45, 0.15),
            (0.62, 0.18),
            (0.68, 0.3),
            (0.6, 0.44),
            (0.45, 0.5),
            (0.62, 0.56),
            (0.7, 0.7),
            (0.62, 0.82),
            (0.45, 0.86),
            (0.3, 0.8),
        ]],
        4 => vec![vec![(0.62, 0.84), (0.62, 0.16), (0.28, 0.62), (0.76, 0.62)]],
        5 => vec![vec![
            (0.7, 0.16),
            (0.36, 0.16),
            (0.33, 0.46),
            (0.52, 0.42),
            (0.67, 0.52),
            (0.7, 0.68),
            (0.62, 0.82),
            (0.47, 0.86),
            (0.3, 0.8),
        ]],
        6 => vec![vec![
            (0.66, 0.16),
            (0.48, 0.26),
            (0.36, 0.45),
            (0.33, 0.65),
            (0.4, 0.82),
            (0.54, 0.86),
            (0.66, 0.78),
            (0.68, 0.62),
            (0.56, 0.52),
            (0.42, 0.54),
            (0.34, 0.62),
        ]],
        7 => vec![vec![(0.28, 0.16), (0.72, 0.16), (0.58, 0.45), (0.46, 0.84)]],
        8 => vec![
            ellipse_stroke(0.5, 0.32, 0.16, 0.16, 16),
            ellipse_stroke(0.5, 0.67, 0.2, 0.18, 16),
        ],
        _ => vec![
            ellipse_stroke(0.5, 0.34, 0.17, 0.17, 16),
            vec![(0.67, 0.34), (0.64, 0.6), (0.56, 0.84)],
        ],
    }
}

fn render_digit(digit: usize, size: usize, rng: &mut impl Rng) -> Image {
    let angle = rng.random_range(-0.2f32..0.2);
    let shear = rng.random_range(-0.2f32..0.2);
    let sx = rng.random_range(0.85f32..1.05);
    let sy = rng.random_range(0.85f32..1.05);
    let tx = rng.random_range(-0.08f32..0.08);
    let ty = rng.random_range(-0.08f32..0.08);
    let half_width = rng.random_range(0.045f32..0.075);
    let (sin, cos) = angle.sin_cos();

    let strokes: Vec<Stroke> = digit_glyph(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let x = x + rng.random_range(-0.02f32..0.02) - 0.5;
                    let y = y + rng.random_range(-0.02f32..0.02) - 0.5;
                    let (x, y) = (sx * (x + shear * y), sy * y);
                    (cos * x - sin * y + 0.5 + tx, sin * x + cos * y + 0.5 + ty)
                })
                .collect()
        })
        .collect();

    let pixel = 1.0 / size as f32;
    let mut img = Image::zeros(1, size, size);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f32 + 0.5) * pixel;
            let y = (py as f32 + 0.5) * pixel;
            let d = polyline_distance(x, y, &strokes);
            let v = ((half_width - d) / pixel + 0.5).clamp(0.0, 1.0);
            img.set(0, py, px, v);
        }
    }
    img
}

/// One-channel ten-class digit pool with per-sample affine and stroke jitter.
pub fn generate_digits(cfg: &SourceConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = (0..cfg.count)
        .map(|i| {
            let digit = rng.random_range(0..10);
            LabeledImage {
                pixels: render_digit(digit, cfg.size, &mut rng),
                factor_labels: vec![digit],
                sample_index: i,
            }
        })
        .collect();
    Ok(Dataset {
        name: "digits".into(),
        factors: vec![FactorSpec::new("digit", 10)],
        images,
        seed: cfg.seed,
    })
}

fn object_outline(class: usize) -> Vec<(f32, f32)> {
    match class {
        0 => regular_polygon(3, 1.0, -PI / 2.0),
        1 => regular_polygon(4, 0.95, PI / 4.0),
        2 => star(5, 1.0, 0.45),
        3 => regular_polygon(24, 0.85, 0.0),
        4 => vec![(-0.95, -0.3), (0.95, -0.3), (0.95, 0.3), (-0.95, 0.3)],
        5 => star(4, 1.0, 0.3),
        6 => vec![(0.0, -1.0), (0.9, 0.9), (0.0, 0.35), (-0.9, 0.9)],
        7 => vec![
            (-0.3, -0.95),
            (0.3, -0.95),
            (0.3, -0.3),
            (0.95, -0.3),
            (0.95, 0.3),
            (0.3, 0.3),
            (0.3, 0.95),
            (-0.3, 0.95),
            (-0.3, 0.3),
            (-0.95, 0.3),
            (-0.95, -0.3),
            (-0.3, -0.3),
        ],
        8 => regular_polygon(6, 0.95, 0.0),
        _ => star(8, 1.0, 0.65),
    }
}

/// Luminance pattern of an object class, evaluated in the object's frame.
fn object_pattern(class: usize, u: f32, v: f32) -> f32 {
    let band = |t: f32, k: f32| 0.5 + 0.5 * (k * PI * t).cos();
    match class % 5 {
        0 => band(u, 3.0),
        1 => band(v, 3.0),
        2 => band((u * u + v * v).sqrt(), 4.0),
        3 => band(u + v, 2.5) * band(u - v, 2.5),
        _ => 1.0,
    }
}

const OBJECT_CONTRAST: f32 = 0.5;

fn render_object(class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let s = size as f32;
    // Background: a random two-colour linear gradient.
    let bg_a = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.25), rng.random_range(0.1..0.5));
    let bg_b = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.25), rng.random_range(0.1..0.5));
    let bg_angle: f32 = rng.random_range(0.0..2.0 * PI);
    let (gs, gc) = bg_angle.sin_cos();
    // A weak class tint: hue near class/10 at low saturation.
    let hue = (class as f32 / 10.0 + rng.random_range(-0.05f32..0.05)).rem_euclid(1.0);
    let fg = hsv_to_rgb(hue, rng.random_range(0.1..0.3), rng.random_range(0.6..1.0));
    let dark = rng.random_range(0.0..0.4f32);

    let placement = Placement {
        cx: s / 2.0 + rng.random_range(-0.12 * s..=0.12 * s),
        cy: s / 2.0 + rng.random_range(-0.12 * s..=0.12 * s),
        radius: rng.random_range(0.28 * s..0.4 * s),
        angle: rng.random_range(-0.4f32..0.4),
    };
    let outline = object_outline(class);

    let mut img = Image::zeros(3, size, size);
    for py in 0..size {
        for px in 0..size {
            let cover = supersample(px, py, |x, y| {
                let (u, v) = placement.to_local(x, y);
                f32::from(in_polygon(u, v, &outline))
            });
            let (u, v) = placement.to_local(px as f32 + 0.5, py as f32 + 0.5);
            let shade = dark + (1.0 - dark) * object_pattern(class, u, v);
            let t = 0.5 + 0.5 * ((px as f32 / s - 0.5) * gc + (py as f32 / s - 0.5) * gs);
            for c in 0..3 {
                let bg = bg_a[c] * (1.0 - t) + bg_b[c] * t;
                let v = bg * (1.0 - cover) + fg[c] * shade * cover;
                // Halved contrast around mid-grey keeps the object the weaker
                // signal next to the digit channel.
                img.set(c, py, px, (0.5 + OBJECT_CONTRAST * (v - 0.5)).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Three-channel ten-class object pool. Class identity lives in silhouette,
/// shading pattern and a faint hue tint; backgrounds are random, and the whole
/// image is rendered at reduced contrast.
pub fn generate_objects(cfg: &SourceConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = (0..cfg.count)
        .map(|i| {
            let class = rng.random_range(0..10);
            LabeledImage {
                pixels: render_object(class, cfg.size, &mut rng),
                factor_labels: vec![class],
                sample_index: i,
            }
        })
        .collect();
    Ok(Dataset {
        name: "objects".into(),
        factors: vec![FactorSpec::new("object", 10)],
        images,
        seed: cfg.seed,
    })
}
