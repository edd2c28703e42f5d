//! Random crop and flips shared across the tensors of one sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::SIZE_MULTIPLE;
use crate::tensor::{Scalar, Tensor};

/// One concrete crop-and-flip draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Transform {
    /// Uniform window position and independent fair flips.
    pub fn sample<R: Rng>(rng: &mut R, h: usize, w: usize, crop: usize) -> Result<Self> {
        check_crop(h, w, crop)?;
        Ok(Transform {
            top: rng.gen_range(0..=h - crop),
            left: rng.gen_range(0..=w - crop),
            crop,
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
        })
    }

    pub fn identity(crop: usize) -> Self {
        Transform { top: 0, left: 0, crop, flip_h: false, flip_v: false }
    }

    /// Applies to every image of an `[N, C, H, W]` tensor.
    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = t.dims4()?;
        check_crop(h, w, self.crop)?;
        if self.top + self.crop > h || self.left + self.crop > w {
            return Err(Error::shape(format!("crop window {self:?} exceeds {h}x{w}")));
        }
        let k = self.crop;
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * k * k);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..k {
                let sy = self.top + if self.flip_v { k - 1 - y } else { y };
                for x in 0..k {
                    let sx = self.left + if self.flip_h { k - 1 - x } else { x };
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Tensor::from_vec(&[n, c, k, k], out)
    }
}

fn check_crop(h: usize, w: usize, crop: usize) -> Result<()> {
    if crop == 0 || !crop.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::shape(format!("crop must be a positive multiple of {SIZE_MULTIPLE}, got {crop}")));
    }
    if crop > h || crop > w {
        return Err(Error::shape(format!("crop {crop} larger than image {h}x{w}")));
    }
    Ok(())
}

/// Draws one transform from `seed` and applies it to every tensor in `items`.
pub fn augment<T: Scalar>(items: &[&Tensor<T>], crop: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Contract("augment needs at least one tensor".into()))?;
    let [_, _, h, w] = first.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tf = Transform::sample(&mut rng, h, w, crop)?;
    items.iter().map(|t| tf.apply(t)).collect()
}
