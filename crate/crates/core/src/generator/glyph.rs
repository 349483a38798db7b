//! Class glyphs and scene backgrounds.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, Canvas, ClassId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
];

impl Shape {
    /// Whether the point `(u, v)` in box-local unit coordinates is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            Shape::Disk => du * du + dv * dv <= 0.16,
            Shape::Square => du.abs() <= 0.3 && dv.abs() <= 0.3,
            Shape::Triangle => (0.15..=0.85).contains(&v) && du.abs() <= 0.4 * (v - 0.15) / 0.7,
            Shape::Ring => (0.04..=0.16).contains(&(du * du + dv * dv)),
            Shape::Cross => (du.abs() <= 0.12 && dv.abs() <= 0.4) || (dv.abs() <= 0.12 && du.abs() <= 0.4),
            Shape::Diamond => du.abs() + dv.abs() <= 0.4,
        }
    }
}

pub fn class_shape(class: ClassId) -> Shape {
    SHAPES[class.index() % SHAPES.len()]
}

/// Hue in `[0, 1)`. The first twelve classes get twelve distinct hues spaced
/// so that neighbouring ids are far apart on the color wheel.
pub fn class_hue(class: ClassId) -> f64 {
    let i = class.index();
    if i < 12 {
        ((i * 5) % 12) as f64 / 12.0
    } else {
        (i as f64 * 0.618_033_988_749_895).fract()
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub const FILL_SATURATION: f64 = 0.5;
pub const FILL_VALUE: f64 = 0.5;
pub const SHAPE_SATURATION: f64 = 0.95;
pub const SHAPE_VALUE: f64 = 0.95;

/// Pixel index range whose centers fall inside `[lo, hi)` of a unit axis.
fn covered(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo * n as f64 - 0.5).ceil().max(0.0) as usize;
    let end = ((hi * n as f64 - 0.5).ceil().max(0.0) as usize).min(n);
    first..end.max(first)
}

/// Draws the class glyph into the pixels covered by `bbox`.
pub fn render_glyph(class: ClassId, bbox: &BBox, canvas: &mut Array3<f64>) {
    render_glyph_faded(class, bbox, canvas, 0.0);
}

/// [`render_glyph`] with colors pulled toward gray by `fade` in `[0, 1]`.
pub fn render_glyph_faded(class: ClassId, bbox: &BBox, canvas: &mut Array3<f64>, fade: f64) {
    let (h, w, c) = canvas.dim();
    let hue = class_hue(class);
    let shape = class_shape(class);
    let mix = |rgb: [f64; 3]| rgb.map(|x| x + fade * (0.5 - x));
    let fill = mix(hsv_to_rgb(hue, FILL_SATURATION, FILL_VALUE));
    let ink = mix(hsv_to_rgb(hue, SHAPE_SATURATION, SHAPE_VALUE));
    let (bw, bh) = (bbox.width(), bbox.height());
    for y in covered(bbox.y_min(), bbox.y_max(), h) {
        let v = ((y as f64 + 0.5) / h as f64 - bbox.y_min()) / bh;
        for x in covered(bbox.x_min(), bbox.x_max(), w) {
            let u = ((x as f64 + 0.5) / w as f64 - bbox.x_min()) / bw;
            let color = if shape.contains(u, v) { ink } else { fill };
            for (ch, value) in color.iter().enumerate().take(c) {
                canvas[[y, x, ch]] = *value;
            }
        }
    }
}

pub fn flat_background(canvas: Canvas) -> Array3<f64> {
    Array3::from_elem((canvas.height, canvas.width, canvas.channels), 0.5)
}

/// Low-saturation texture of a few overlaid plane waves.
pub fn textured_background(canvas: Canvas, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: f64 = rng.gen_range(0.35..0.65);
    let tint: [f64; 3] = [
        rng.gen_range(-0.07..0.07),
        rng.gen_range(-0.07..0.07),
        rng.gen_range(-0.07..0.07),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    Array3::from_shape_fn((canvas.height, canvas.width, canvas.channels), |(y, x, ch)| {
        let (u, v) = (x as f64 / canvas.width as f64, y as f64 / canvas.height as f64);
        let wave: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * u + fy * v + ph).sin()).sum();
        ((base + wave) * (1.0 + tint[ch % 3])).clamp(0.0, 1.0)
    })
}
