use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::check_resolution;
use crate::numerics::Tensor;

use super::dataset::{Dataset, Normalization, Sample, Split};

pub const SHAPE_NAMES: [&str; 3] = ["disk", "square", "triangle"];

/// Minimum share of object pixels inside the recorded quadrant.
pub const QUADRANT_SHARE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_label(label: usize) -> Self {
        [Shape::Disk, Shape::Square, Shape::Triangle][label % 3]
    }

    /// Whether pixel center `(x, y)` lies in the shape with bounding box
    /// origin `(x0, y0)` and side `s`.
    fn covers(self, x: f64, y: f64, x0: f64, y0: f64, s: f64) -> bool {
        let (u, v) = ((x - x0) / s, (y - y0) / s);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Square => true,
            // apex at the top center, base along the bottom edge
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

/// One generated image with its object mask.
#[derive(Clone, Debug)]
pub struct ShapeImage {
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub label: usize,
    pub quadrant: usize,
}

/// Quadrant index of pixel `(x, y)`: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
pub fn quadrant_of(x: usize, y: usize, resolution: usize) -> usize {
    let half = resolution / 2;
    usize::from(x >= half) + 2 * usize::from(y >= half)
}

fn mask_for(shape: Shape, x0: f64, y0: f64, s: f64, r: usize) -> Vec<bool> {
    (0..r * r)
        .map(|i| shape.covers((i % r) as f64 + 0.5, (i / r) as f64 + 0.5, x0, y0, s))
        .collect()
}

fn quadrant_share(mask: &[bool], quadrant: usize, r: usize) -> f64 {
    let total = mask.iter().filter(|&&m| m).count();
    let inside = mask
        .iter()
        .enumerate()
        .filter(|&(i, &m)| m && quadrant_of(i % r, i / r, r) == quadrant)
        .count();
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// Draws one image of class `label` on a noise background.
pub fn draw_shape(label: usize, resolution: usize, rng: &mut impl Rng) -> ShapeImage {
    let r = resolution;
    let shape = Shape::from_label(label);
    let quadrant = rng.random_range(0..4);
    let half = r as f64 / 2.0;
    let (qx, qy) = ((quadrant % 2) as f64 * half, (quadrant / 2) as f64 * half);

    let mut placed = None;
    for _ in 0..32 {
        let s = rng.random_range(0.55..0.95) * half;
        // center anywhere in the quadrant's inner region; boxes may spill over
        let cx = qx + rng.random_range(0.3..0.7) * half;
        let cy = qy + rng.random_range(0.3..0.7) * half;
        let (x0, y0) = (cx - s / 2.0, cy - s / 2.0);
        if x0 < 0.0 || y0 < 0.0 || x0 + s > r as f64 || y0 + s > r as f64 {
            continue;
        }
        let mask = mask_for(shape, x0, y0, s, r);
        if quadrant_share(&mask, quadrant, r) >= QUADRANT_SHARE {
            placed = Some(mask);
            break;
        }
    }
    // fallback: fit the box inside the quadrant
    let mask = placed.unwrap_or_else(|| {
        let s = 0.8 * half;
        mask_for(shape, qx + 0.1 * half, qy + 0.1 * half, s, r)
    });

    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let mut data = vec![0.0; 3 * r * r];
    for c in 0..3 {
        for (i, &inside) in mask.iter().enumerate() {
            let noise = rng.random_range(-0.1..0.1);
            let base = if inside { color[c] } else { background[c] };
            data[c * r * r + i] = (base + noise).clamp(0.0, 1.0);
        }
    }
    ShapeImage {
        image: Tensor::new(&[3, r, r], data).expect("shape matches data"),
        mask,
        label,
        quadrant,
    }
}

fn split(n_per_class: usize, resolution: usize, rng: &mut ChaCha8Rng, split: Split) -> Dataset {
    let items = (0..3 * n_per_class)
        .map(|i| {
            let s = draw_shape(i % 3, resolution, rng);
            Sample {
                image: s.image,
                label: s.label,
                quadrant: Some(s.quadrant),
            }
        })
        .collect();
    Dataset {
        items,
        class_names: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
        split,
        resolution,
        norm: Normalization::identity(),
    }
}

/// Three-class shapes dataset: `n_per_class` training images per class and
/// an independently drawn validation set of `max(1, n_per_class / 2)` per
/// class. Both splits are standardized with training statistics.
pub fn synth_shapes(n_per_class: usize, resolution: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    check_resolution(resolution, resolution)?;
    if resolution < 32 {
        return Err(Error::Resolution(format!(
            "synthetic shapes need at least 32 pixels, got {resolution}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = split(n_per_class, resolution, &mut rng, Split::Train);
    let val = split((n_per_class / 2).max(1), resolution, &mut rng, Split::Val);
    Ok(Dataset::standardize_pair(train, val))
}
