//! Deterministic synthetic attributed classes: each class is a unique
//! (shape, color, size, background) tuple drawn with per-instance jitter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributeVector, ClassRecord, Dataset, Image};
use crate::error::{ArlError, Result};

pub const SHAPES: usize = 4;
pub const COLORS: usize = 6;
pub const SIZES: usize = 3;
pub const BACKGROUNDS: usize = 3;

/// One-hot widths concatenated: shape, color, size, background.
pub const SYNTHETIC_ATTRIBUTES: usize = SHAPES + COLORS + SIZES + BACKGROUNDS;

const PALETTE: [[f32; 3]; COLORS] = [
    [0.90, 0.12, 0.10],
    [0.12, 0.78, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.88, 0.10],
    [0.88, 0.12, 0.88],
    [0.10, 0.88, 0.90],
];

const RADIUS: [f32; SIZES] = [0.18, 0.26, 0.34];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticClass {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub background: usize,
}

impl SyntheticClass {
    pub fn from_index(i: usize) -> SyntheticClass {
        SyntheticClass {
            shape: i / (COLORS * SIZES * BACKGROUNDS),
            color: (i / (SIZES * BACKGROUNDS)) % COLORS,
            size: (i / BACKGROUNDS) % SIZES,
            background: i % BACKGROUNDS,
        }
    }

    pub fn index(&self) -> usize {
        ((self.shape * COLORS + self.color) * SIZES + self.size) * BACKGROUNDS + self.background
    }

    pub fn attribute(&self) -> AttributeVector {
        let mut a = vec![0.0; SYNTHETIC_ATTRIBUTES];
        a[self.shape] = 1.0;
        a[SHAPES + self.color] = 1.0;
        a[SHAPES + COLORS + self.size] = 1.0;
        a[SHAPES + COLORS + SIZES + self.background] = 1.0;
        AttributeVector(a)
    }
}

fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.82,
        2 => v >= -0.7 && v <= 0.95 && u.abs() <= 0.95 * (0.95 - v) / 1.65,
        _ => (u.abs() <= 0.32 && v.abs() <= 0.95) || (v.abs() <= 0.32 && u.abs() <= 0.95),
    }
}

fn background(kind: usize, x: usize, y: usize, side: usize) -> [f32; 3] {
    match kind {
        0 => [0.12, 0.12, 0.14],
        1 => [0.62, 0.60, 0.55],
        _ => {
            let period = (side / 6).max(2);
            if ((x + y) / period) % 2 == 0 {
                [0.35, 0.30, 0.22]
            } else {
                [0.55, 0.50, 0.40]
            }
        }
    }
}

fn render(class: SyntheticClass, side: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = side as f32;
    let radius = RADIUS[class.size] * s * rng.gen_range(0.94..1.06);
    let margin = (0.5 * s - radius).max(0.0) * 0.5;
    let cx = 0.5 * s + rng.gen_range(-margin..=margin);
    let cy = 0.5 * s + rng.gen_range(-margin..=margin);
    let theta = rng.gen_range(-15.0f32..15.0).to_radians();
    let (sin, cos) = theta.sin_cos();
    let tint = rng.gen_range(0.92f32..1.08);
    let color = PALETTE[class.color].map(|c| (c * tint).min(1.0));
    let mut im = Image::zeros(3, side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f32 + 0.5 - cx) / radius;
            let dy = (y as f32 + 0.5 - cy) / radius;
            let u = cos * dx + sin * dy;
            let v = -(-sin * dx + cos * dy);
            let px = if inside(class.shape, u, v) {
                color
            } else {
                background(class.background, x, y, side)
            };
            for (c, &p) in px.iter().enumerate() {
                let noise: f32 = rng.gen_range(-0.06..0.06);
                im.set(c, y, x, (p + noise).clamp(0.0, 1.0));
            }
        }
    }
    im
}

fn instance_seed(seed: u64, class: usize, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((class as u64) << 32)
        ^ (k as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Class tuples are drawn without replacement in a seed-shuffled order; the
/// first 60% become training classes, then 20% validation, 20% test.
pub fn generate_synthetic(seed: u64, n_classes: usize, per_class: usize, side: usize) -> Result<Dataset> {
    let capacity = SHAPES * COLORS * SIZES * BACKGROUNDS;
    if n_classes > capacity {
        return Err(ArlError::Capacity(format!(
            "{} classes requested but only {} distinct synthetic classes exist",
            n_classes, capacity
        )));
    }
    if n_classes < 10 || per_class < 10 {
        return Err(ArlError::Contract(format!(
            "synthetic data needs >= 10 classes and >= 10 images per class (got {} x {})",
            n_classes, per_class
        )));
    }
    if ![28, 32, 64].contains(&side) {
        return Err(ArlError::Contract(format!("image side must be 28, 32 or 64 (got {})", side)));
    }
    let mut order: Vec<usize> = (0..capacity).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let classes = order[..n_classes]
        .iter()
        .map(|&ci| {
            let class = SyntheticClass::from_index(ci);
            let images = (0..per_class)
                .map(|k| render(class, side, &mut ChaCha8Rng::seed_from_u64(instance_seed(seed, ci, k))))
                .collect();
            ClassRecord {
                id: ci as i64,
                attribute: class.attribute(),
                images,
            }
        })
        .collect();
    Dataset::new(classes)
}
