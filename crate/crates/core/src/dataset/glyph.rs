//! Procedural stroke glyphs: a self-contained stand-in for handwritten digits.
//!
//! Each class is a fixed composition of line strokes with no nontrivial
//! rotational stabilizer. Samples vary in stroke width and sub-pixel
//! translation. Strokes stay inside a centered disk so that rotations never
//! clip the glyph.

use rand::Rng;

use super::BaseCorpus;
use crate::group::SO2Element;
use crate::image::{rotate_image, Image, Interpolation};
use crate::seed::{derive_seed, rng_from_seed, stream};

pub const MIN_GLYPH_SIZE: usize = 16;

type Stroke = [(f64, f64); 2];

/// Width in pixels of the linear fade at stroke edges. Soft, MNIST-like edges
/// keep bilinear resampling error low.
const EDGE_RAMP: f64 = 2.5;

/// Polyline templates in unit coordinates (y up), all inside the unit disk.
/// Ordered so that neighbouring classes are easy to tell apart; small toy
/// runs use only the first few.
const TEMPLATES: &[&[(f64, f64)]] = &[
    // F
    &[(0.45, 0.75), (-0.35, 0.75), (-0.35, -0.8), (f64::NAN, f64::NAN), (-0.35, 0.05), (0.25, 0.05)],
    // J
    &[
        (-0.1, 0.75),
        (0.45, 0.75),
        (f64::NAN, f64::NAN),
        (0.25, 0.75),
        (0.25, -0.5),
        (0.0, -0.8),
        (-0.3, -0.7),
        (-0.4, -0.45),
    ],
    // L
    &[(-0.3, 0.8), (-0.3, -0.75), (0.45, -0.75)],
    // 7
    &[(-0.45, 0.75), (0.45, 0.75), (-0.1, -0.85)],
    // P
    &[
        (-0.35, -0.8),
        (-0.35, 0.75),
        (0.25, 0.75),
        (0.45, 0.55),
        (0.45, 0.25),
        (0.25, 0.05),
        (-0.35, 0.05),
    ],
    // 4
    &[(0.2, -0.85), (0.2, 0.8), (-0.5, -0.2), (0.5, -0.2)],
    // R
    &[
        (-0.35, -0.8),
        (-0.35, 0.75),
        (0.25, 0.75),
        (0.45, 0.55),
        (0.45, 0.25),
        (0.25, 0.05),
        (-0.35, 0.05),
        (f64::NAN, f64::NAN),
        (-0.05, 0.05),
        (0.45, -0.75),
    ],
    // Y
    &[(-0.45, 0.75), (0.0, 0.1), (0.45, 0.75), (f64::NAN, f64::NAN), (0.0, 0.1), (0.0, -0.85)],
    // T
    &[(-0.5, 0.75), (0.5, 0.75), (f64::NAN, f64::NAN), (0.0, 0.75), (0.0, -0.85)],
    // 2
    &[
        (-0.45, 0.5),
        (-0.2, 0.8),
        (0.3, 0.8),
        (0.45, 0.5),
        (-0.45, -0.75),
        (0.5, -0.75),
    ],
];

fn template_strokes(points: &[(f64, f64)]) -> Vec<Stroke> {
    points
        .windows(2)
        .filter(|w| !(w[0].0.is_nan() || w[1].0.is_nan()))
        .map(|w| [w[0], w[1]])
        .collect()
}

/// Random polyline for classes beyond the fixed templates.
fn random_strokes(class: usize, attempt: u64) -> Vec<Stroke> {
    let mut rng = rng_from_seed(derive_seed(class as u64, stream::GLYPH, attempt));
    let n_points = 4 + rng.random_range(0..2);
    let mut pts = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let r: f64 = 0.85 * rng.random::<f64>().sqrt();
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        pts.push((r * t.cos(), r * t.sin()));
    }
    template_strokes(&pts)
}

fn segment_distance(p: (f64, f64), s: &Stroke) -> f64 {
    let [(ax, ay), (bx, by)] = *s;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - ax - t * dx).hypot(p.1 - ay - t * dy)
}

struct Jitter {
    width: f64,
    shift_x: f64,
    shift_y: f64,
}

fn rasterize(strokes: &[Stroke], size: usize, jitter: &Jitter) -> Image {
    let half = size as f64 / 2.0;
    let scale = 0.62 * half;
    let c = (size as f64 - 1.0) / 2.0;
    Image::from_fn(size, size, |r, col| {
        // pixel in glyph units, y up
        let x = (col as f64 - c - jitter.shift_x) / scale;
        let y = (c - r as f64 - jitter.shift_y) / scale;
        let d = strokes
            .iter()
            .map(|s| segment_distance((x, y), s))
            .fold(f64::INFINITY, f64::min)
            * scale;
        ((jitter.width / 2.0 + EDGE_RAMP / 2.0 - d) / EDGE_RAMP).clamp(0.0, 1.0) as f32
    })
}

fn is_asymmetric(img: &Image) -> bool {
    // half turns are the hardest stabilizer to rule out for stroke shapes
    [90.0, 180.0, 270.0].iter().all(|&a| {
        let g = SO2Element::from_degrees(a).expect("finite");
        img.mse(&rotate_image(img, g, Interpolation::Nearest).expect("non-empty")) > 0.01
    })
}

fn class_strokes(class: usize, size: usize) -> Vec<Stroke> {
    if let Some(t) = TEMPLATES.get(class) {
        return template_strokes(t);
    }
    let nominal = Jitter {
        width: nominal_width(size),
        shift_x: 0.0,
        shift_y: 0.0,
    };
    (0..)
        .map(|attempt| random_strokes(class, attempt))
        .find(|s| is_asymmetric(&rasterize(s, size, &nominal)))
        .expect("some random polyline is asymmetric")
}

fn nominal_width(size: usize) -> f64 {
    (size as f64 / 12.0).max(1.2)
}

/// Renders `per_class` jittered glyphs for each of `n_classes` classes,
/// class-major order. Deterministic given `seed`.
///
/// # Panics
///
/// If `size < MIN_GLYPH_SIZE` or `n_classes == 0`.
pub fn render_glyph_corpus(n_classes: usize, per_class: usize, size: usize, seed: u64) -> BaseCorpus {
    assert!(n_classes >= 1, "at least one class is required");
    assert!(size >= MIN_GLYPH_SIZE, "glyph size must be at least {MIN_GLYPH_SIZE}");
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        let strokes = class_strokes(class, size);
        for i in 0..per_class {
            let index = (class * per_class + i) as u64;
            let mut rng = rng_from_seed(derive_seed(seed, stream::GLYPH, index));
            let jitter = Jitter {
                width: nominal_width(size) * rng.random_range(0.8..1.2),
                shift_x: rng.random_range(-1.0..=1.0),
                shift_y: rng.random_range(-1.0..=1.0),
            };
            images.push(rasterize(&strokes, size, &jitter));
            labels.push(class);
        }
    }
    BaseCorpus {
        images,
        labels,
        n_classes,
    }
}
