//! Synthetic data, image files and augmentation.

mod augment;
mod dataset;
mod netpbm;
mod synth;

pub use augment::{augment, Transform};
pub use dataset::{generate_dataset, Dataset, DatasetMeta, Pair, PairEntry, FORMAT_VERSION, META_FILE};
pub use netpbm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, quantize, read_pgm, read_ppm, write_pgm, write_ppm,
};
pub use synth::{generate_pair, Blob, SceneSpec, BLOB_COUNT_RANGE, CLEAN_RANGE, DEPTH_RANGE, MIN_ATTENUATION};

/// `[1, 3, H, W]` image with values nominally in `[0, 1]`.
pub type Image = crate::tensor::Tensor<f32>;
