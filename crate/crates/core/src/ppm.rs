//! Binary P6 PPM images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::modk::write_atomic;
use crate::tensor::Tensor;

/// Encodes an `[H, W, 3]` image in `[0, 1]` as 8-bit P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("ppm", format!("expected [H, W, 3], got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes P6 with maxval 255, `#` comments allowed in the header.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let n = w * h * 3;
    let px = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(vec![h, w, 3], px.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Tiles equally sized images into a grid `cols` wide.
pub fn tile(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("no images to tile".into()))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![0.0; gh * gw * 3];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape("tile", "images differ in shape"));
        }
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for y in 0..h {
            let dst = ((oy + y) * gw + ox) * 3;
            out[dst..dst + w * 3].copy_from_slice(&img.data()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Tensor::new(vec![gh, gw, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_8_bits() {
        let img = Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f64 / 17.0).collect()).unwrap();
        let b = encode_ppm(&img).unwrap();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&b).unwrap();
        assert_eq!(back.shape(), &[2, 3, 3]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut b = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        b.extend([255, 0, 0]);
        assert_eq!(decode_ppm(&b).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn tiles_row_major() {
        let a = Tensor::full(&[1, 1, 3], 0.25);
        let b = Tensor::full(&[1, 1, 3], 0.75);
        let t = tile(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.data()[3], 0.75);
        assert_eq!(t.data()[9], 0.0);
    }
}
