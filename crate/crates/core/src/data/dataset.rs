//! On-disk dataset directory: `NNNN_input.ppm`, `NNNN_gt.ppm`, optional
//! `NNNN_mask.pgm`, and a `meta.json` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm};
use super::synth::{generate_pair, SceneSpec};
use crate::error::{Error, Result};
use crate::losses::{build_pseudo_mask, PseudoMaskConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub format_version: u32,
}

/// File paths of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub index: usize,
    pub input: PathBuf,
    pub gt: PathBuf,
    pub mask: Option<PathBuf>,
}

/// A loaded pair, `[1, 3, H, W]` each.
#[derive(Debug, Clone)]
pub struct Pair {
    pub index: usize,
    pub input: Tensor<f32>,
    pub gt: Tensor<f32>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `count` synthetic pairs; pair `i` uses seed `seed + i`.
///
/// Masks are built from the quantized images exactly as they will be read
/// back, so they match what training derives from the files.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
    n_blobs: Option<usize>,
) -> Result<DatasetMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..count {
        let spec = SceneSpec::sample(size, seed.wrapping_add(i as u64), n_blobs);
        let (degraded, clean) = generate_pair(&spec)?;
        let input_bytes = encode_ppm(&degraded)?;
        let gt_bytes = encode_ppm(&clean)?;
        let mask = build_pseudo_mask(
            &decode_ppm::<f32>(&input_bytes)?,
            &decode_ppm::<f32>(&gt_bytes)?,
            &PseudoMaskConfig::default(),
        )?;
        write_bytes(&dir.join(format!("{i:04}_input.ppm")), &input_bytes)?;
        write_bytes(&dir.join(format!("{i:04}_gt.ppm")), &gt_bytes)?;
        write_bytes(&dir.join(format!("{i:04}_mask.pgm")), &encode_pgm(&mask)?)?;
    }
    let meta = DatasetMeta { count, size, seed, format_version: FORMAT_VERSION };
    let meta_path = dir.join(META_FILE);
    write_bytes(&meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

/// Indexed view of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: Option<DatasetMeta>,
    pub entries: Vec<PairEntry>,
}

impl Dataset {
    /// Scans `dir` for complete input/gt pairs, ordered by index. The
    /// manifest is optional; when present its format version is checked.
    pub fn open(dir: &Path) -> Result<Self> {
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut found: BTreeMap<usize, [Option<PathBuf>; 3]> = BTreeMap::new();
        for ent in rd {
            let ent = ent.map_err(|e| Error::io(dir, e))?;
            let name = ent.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some((idx, rest)) = name.split_once('_') else { continue };
            if idx.len() != 4 || !idx.bytes().all(|b| b.is_ascii_digit()) {
                continue;
            }
            let slot = match rest {
                "input.ppm" => 0,
                "gt.ppm" => 1,
                "mask.pgm" => 2,
                _ => continue,
            };
            found.entry(idx.parse().unwrap()).or_default()[slot] = Some(ent.path());
        }
        let entries: Vec<PairEntry> = found
            .into_iter()
            .filter_map(|(index, [input, gt, mask])| {
                Some(PairEntry { index, input: input?, gt: gt?, mask })
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        let meta_path = dir.join(META_FILE);
        let meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: DatasetMeta = serde_json::from_str(&text)?;
            if meta.format_version != FORMAT_VERSION {
                return Err(Error::Format(format!(
                    "dataset format version {} unsupported",
                    meta.format_version
                )));
            }
            Some(meta)
        } else {
            None
        };
        Ok(Dataset { root: dir.to_path_buf(), meta, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads entry `i` (position, not file index).
    pub fn load(&self, i: usize) -> Result<Pair> {
        let e = &self.entries[i];
        let input: Tensor<f32> = read_ppm(&e.input)?;
        let gt: Tensor<f32> = read_ppm(&e.gt)?;
        if input.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "pair {}: input {:?} vs gt {:?}",
                e.index,
                input.shape(),
                gt.shape()
            )));
        }
        Ok(Pair { index: e.index, input, gt })
    }

    /// Loads the stored mask of entry `i`, if any.
    pub fn load_mask(&self, i: usize) -> Result<Option<Tensor<f32>>> {
        self.entries[i].mask.as_deref().map(read_pgm).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_then_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let meta = generate_dataset(dir.path(), 3, 32, 7, None).unwrap();
        assert_eq!(meta.count, 3);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.meta.as_ref(), Some(&meta));
        for i in 0..3 {
            let p = ds.load(i).unwrap();
            assert_eq!(p.index, i);
            assert_eq!(p.input.shape(), &[1, 3, 32, 32]);
            let stored = ds.load_mask(i).unwrap().unwrap();
            let rebuilt = build_pseudo_mask(&p.input, &p.gt, &PseudoMaskConfig::default()).unwrap();
            assert_eq!(stored, rebuilt);
        }
    }

    #[test]
    fn empty_and_incomplete_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::EmptyDataset(_))));
        fs::write(dir.path().join("0000_input.ppm"), b"x").unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::EmptyDataset(_))));
        assert!(Dataset::open(&dir.path().join("missing")).is_err());
    }
}
