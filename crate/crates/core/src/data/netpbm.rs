//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `round(clamp(v, 0, 1) * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Encodes channel `0..3` of image `0` of an `[N, 3, H, W]` tensor as P6.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [_, c, h, w] = img.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("ppm needs 3 channels, got {c}")));
    }
    let mut out = header("P6", w, h);
    let d = img.data();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i].to_f64_lossy()));
        }
    }
    Ok(out)
}

/// Encodes image `0`, channel `0` as P5.
pub fn encode_pgm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [_, _, h, w] = img.dims4()?;
    let mut out = header("P5", w, h);
    out.extend(img.data()[..h * w].iter().map(|v| quantize(v.to_f64_lossy())));
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::BadMagic {
            what: "netpbm image",
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated("netpbm header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("netpbm header value out of range".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {}", fields[2])));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::Format("missing separator after maxval".into())),
        None => return Err(Error::Truncated("netpbm header")),
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Format("zero image extent".into()));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        offset: pos,
    })
}

/// Decodes P6 into `[1, 3, H, W]` with values `byte / 255`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let hd = parse_header(bytes, b"P6")?;
    let plane = hd.width * hd.height;
    let payload = &bytes[hd.offset..];
    if payload.len() < 3 * plane {
        return Err(Error::Truncated("ppm payload"));
    }
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = T::from_f64_lossy(payload[3 * i + ch] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[1, 3, hd.height, hd.width], data)
}

/// Decodes P5 into `[1, 1, H, W]` with values `byte / 255`.
pub fn decode_pgm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let hd = parse_header(bytes, b"P5")?;
    let plane = hd.width * hd.height;
    let payload = &bytes[hd.offset..];
    if payload.len() < plane {
        return Err(Error::Truncated("pgm payload"));
    }
    let data = payload[..plane]
        .iter()
        .map(|&b| T::from_f64_lossy(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[1, 1, hd.height, hd.width], data)
}

pub fn write_ppm<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;
    use proptest::prelude::*;

    #[test]
    fn two_pixel_payload() {
        let img = Tensor::<f32>::from_vec(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let b = encode_ppm(&img).unwrap();
        assert_eq!(&b[..11], b"P6\n2 1\n255\n");
        assert_eq!(&b[11..], &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn constant_white_and_clamping() {
        let img = Tensor::<f32>::full(&[1, 3, 2, 2], 1.0).unwrap();
        let b = encode_ppm(&img).unwrap();
        assert!(b[11..].iter().all(|&v| v == 255));
        let over = Tensor::<f32>::full(&[1, 3, 1, 1], 1.7).unwrap();
        assert_eq!(&encode_ppm(&over).unwrap()[11..], &[255, 255, 255]);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_ppm::<f32>(b"P5\n1 1\n255\n\0"), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_ppm::<f32>(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Truncated(_))));
        assert!(matches!(decode_ppm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm::<f32>(b"P6\n1"), Err(Error::Truncated(_))));
        let ok = decode_ppm::<f32>(b"P6\n# comment\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(ok.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let m = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let back: Tensor<f32> = decode_pgm(&encode_pgm(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn quantization_error_bound(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let img = Tensor::<f64>::create(&[1, 3, h, w], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap();
            let back: Tensor<f64> = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
