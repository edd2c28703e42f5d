//! Binary checkpoint format.
//!
//! ```text
//! "UBND1"                      5 bytes: "UBND" magic + ASCII version digit
//! base_channels       u32
//! context_channels    u32
//! use_mask, use_saam, use_context   u8 each (0 or 1)
//! parameter count     u32
//! per parameter:
//!   name length u16, name bytes (UTF-8)
//!   rank u8, extents u32 x rank
//!   values f32 x numel
//! ```
//!
//! All integers and floats are little-endian. Values are always stored as
//! 32-bit floats regardless of the compute precision.

use std::fs;
use std::path::Path;

use super::{ModelConfig, UniBlendNet};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"UBND";
pub const VERSION: u8 = b'1';

pub fn encode<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [config.base_channels, config.context_channels] {
        out.extend_from_slice(&u32_of(v, "channel count")?.to_le_bytes());
    }
    for flag in [config.use_mask, config.use_saam, config.use_context] {
        out.push(flag as u8);
    }
    out.extend_from_slice(&u32_of(params.len(), "parameter count")?.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "extent")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated("checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("checkpoint flag byte {b}"))),
        }
    }
}

/// Decodes a checkpoint and validates it against the layout its own config
/// block describes.
pub fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic {
        what: "checkpoint",
        expected: "UBND".into(),
        found: String::from_utf8_lossy(bytes).into_owned(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: "UBND".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION - b'0',
            found: version.wrapping_sub(b'0'),
        });
    }
    let config = ModelConfig {
        base_channels: r.u32()? as usize,
        context_channels: r.u32()? as usize,
        use_mask: r.flag()?,
        use_saam: r.flag()?,
        use_context: r.flag()?,
    };
    let net = UniBlendNet::new(config)?;
    let specs = net.param_specs();

    let count = r.u32()? as usize;
    let mut params = ModelParams::empty();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if spec.shape != shape {
            return Err(Error::ParameterShape {
                name,
                expected: spec.shape.clone(),
                found: shape,
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(&name, Tensor::from_vec(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    params.check_layout(&specs)?;
    Ok((params, config))
}

pub fn save_params<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(ModelParams<f32>, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint that must fit `expected`; the first parameter whose
/// shape disagrees is named in the error.
pub fn load_params_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams<f32>> {
    let (params, _) = load_params(path)?;
    params.check_layout(&UniBlendNet::new(*expected)?.param_specs())?;
    Ok(params)
}
