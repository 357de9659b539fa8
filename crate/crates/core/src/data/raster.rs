//! Small anti-aliased rasterization helpers used by the procedural generators.

use std::f32::consts::PI;

/// Subsample offsets for 3x3 supersampling within a pixel.
const SUB: [f32; 3] = [1.0 / 6.0, 0.5, 5.0 / 6.0];

/// Similarity transform from image pixel coordinates into an object's local
/// frame, where the object occupies roughly the unit disc.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Placement {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub angle: f32,
}

impl Placement {
    #[inline]
    pub fn to_local(self, x: f32, y: f32) -> (f32, f32) {
        let dx = (x - self.cx) / self.radius;
        let dy = (y - self.cy) / self.radius;
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Mean of `f` over a 3x3 grid of subsamples of the pixel at `(px, py)`.
pub(crate) fn supersample(px: usize, py: usize, f: impl Fn(f32, f32) -> f32) -> f32 {
    let mut acc = 0.0;
    for sy in SUB {
        for sx in SUB {
            acc += f(px as f32 + sx, py as f32 + sy);
        }
    }
    acc / 9.0
}

/// Even-odd point-in-polygon test.
pub(crate) fn in_polygon(x: f32, y: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Vertices of a regular polygon inscribed in a circle of radius `r`.
pub(crate) fn regular_polygon(sides: usize, r: f32, phase: f32) -> Vec<(f32, f32)> {
    (0..sides)
        .map(|k| {
            let a = phase + 2.0 * PI * k as f32 / sides as f32;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

pub(crate) fn star(points: usize, outer: f32, inner: f32) -> Vec<(f32, f32)> {
    (0..2 * points)
        .map(|k| {
            let a = -PI / 2.0 + PI * k as f32 / points as f32;
            let r = if k % 2 == 0 { outer } else { inner };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Distance from `(x, y)` to the segment `a`-`b`.
#[inline]
pub(crate) fn segment_distance(x: f32, y: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

pub(crate) fn polyline_distance(x: f32, y: f32, strokes: &[Vec<(f32, f32)>]) -> f32 {
    let mut best = f32::INFINITY;
    for stroke in strokes {
        for w in stroke.windows(2) {
            best = best.min(segment_distance(x, y, w[0], w[1]));
        }
    }
    best
}

/// Closed elliptical polyline approximation.
pub(crate) fn ellipse_stroke(cx: f32, cy: f32, rx: f32, ry: f32, segments: usize) -> Vec<(f32, f32)> {
    (0..=segments)
        .map(|k| {
            let a = 2.0 * PI * k as f32 / segments as f32;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// HSV (all components in `[0, 1]`) to RGB.
pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
