//! Seeded synthetic scenes with shadow-like illumination loss.
//!
//! The clean image is a smooth textured background (a few random cosine
//! fields with per-channel tint) with one to three solid rectangles or disks
//! painted over it. The degraded image multiplies it by an attenuation field
//! `L = clamp(1 - sum_k depth_k * exp(-d_k^2 / (2 r_k^2)), 0.2, 1)`, so
//! degradation only ever darkens.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::SIZE_MULTIPLE;
use crate::tensor::Tensor;

pub const MIN_ATTENUATION: f64 = 0.2;
pub const CLEAN_RANGE: (f64, f64) = (0.05, 1.0);
pub const DEPTH_RANGE: (f64, f64) = (0.3, 0.8);
pub const BLOB_COUNT_RANGE: (usize, usize) = (2, 5);

/// One Gaussian attenuation blob, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub depth: f64,
}

/// Everything needed to regenerate one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub seed: u64,
    pub blobs: Vec<Blob>,
}

impl SceneSpec {
    /// Draws blob parameters from `seed`. `n_blobs` defaults to a uniform
    /// draw from 2..=5.
    pub fn sample(size: usize, seed: u64, n_blobs: Option<usize>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10B);
        let n = n_blobs.unwrap_or_else(|| rng.gen_range(BLOB_COUNT_RANGE.0..=BLOB_COUNT_RANGE.1));
        let s = size as f64;
        let blobs = (0..n)
            .map(|_| Blob {
                cx: rng.gen_range(0.0..s),
                cy: rng.gen_range(0.0..s),
                radius: rng.gen_range(0.12 * s..0.3 * s),
                depth: rng.gen_range(DEPTH_RANGE.0..DEPTH_RANGE.1),
            })
            .collect();
        SceneSpec { size, seed, blobs }
    }

    /// Attenuation at pixel centre `(x, y)`.
    pub fn attenuation(&self, x: f64, y: f64) -> f64 {
        let drop: f64 = self
            .blobs
            .iter()
            .map(|b| {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                b.depth * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum();
        (1.0 - drop).clamp(MIN_ATTENUATION, 1.0)
    }
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

fn clean_image(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.75));
    let fields: Vec<([f64; 3], f64, f64, f64)> = (0..4)
        .map(|_| {
            let amp = std::array::from_fn(|_| rng.gen_range(0.04..0.12));
            let fx = rng.gen_range(0.5..4.0) * 2.0 * PI / s;
            let fy = rng.gen_range(0.5..4.0) * 2.0 * PI / s;
            let phase = rng.gen_range(0.0..2.0 * PI);
            (amp, fx, fy, phase)
        })
        .collect();
    let n_shapes = rng.gen_range(1..=3);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let color = std::array::from_fn(|_| rng.gen_range(0.1..0.95));
            let shape = if rng.gen_bool(0.5) {
                let (w, h) = (rng.gen_range(0.1 * s..0.4 * s), rng.gen_range(0.1 * s..0.4 * s));
                let (x0, y0) = (rng.gen_range(0.0..s - w), rng.gen_range(0.0..s - h));
                Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
            } else {
                Shape::Disk {
                    cx: rng.gen_range(0.0..s),
                    cy: rng.gen_range(0.0..s),
                    r: rng.gen_range(0.06 * s..0.2 * s),
                }
            };
            (shape, color)
        })
        .collect();

    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = base;
            for (amp, fx, fy, phase) in &fields {
                let v = (fx * px + fy * py + phase).cos();
                for c in 0..3 {
                    rgb[c] += amp[c] * v;
                }
            }
            for (shape, color) in &shapes {
                if shape.contains(px, py) {
                    rgb = *color;
                }
            }
            for c in 0..3 {
                out[c * plane + y * size + x] = rgb[c].clamp(CLEAN_RANGE.0, CLEAN_RANGE.1);
            }
        }
    }
    out
}

/// Returns `(degraded, clean)`, each `[1, 3, size, size]`.
pub fn generate_pair(spec: &SceneSpec) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if spec.size == 0 || !spec.size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::shape(format!(
            "scene size must be a positive multiple of {SIZE_MULTIPLE}, got {}",
            spec.size
        )));
    }
    let size = spec.size;
    let clean = clean_image(size, spec.seed);
    let plane = size * size;
    let mut degraded = clean.clone();
    if !spec.blobs.is_empty() {
        for y in 0..size {
            for x in 0..size {
                let l = spec.attenuation(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..3 {
                    degraded[c * plane + y * size + x] *= l;
                }
            }
        }
    }
    let shape = [1, 3, size, size];
    Ok((
        Tensor::from_f64(&shape, &degraded)?,
        Tensor::from_f64(&shape, &clean)?,
    ))
}
