//! 8-bit binary netpbm files: PPM (P6) for colour images, PGM (P5) for masks and maps.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Snap values onto the 8-bit grid so in-memory images equal their file contents.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| from_u8(to_u8(v)))
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => return Err(shape_err!("PPM needs 3×H×W, got {:?}", img.shape())),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_u8(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => return Err(shape_err!("PGM needs H×W, got {:?}", map.shape())),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

/// Parse a P5/P6 header, returning `(magic, width, height, payload offset)`.
fn parse_header(bytes: &[u8]) -> Result<(&[u8], usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        fields.push(&bytes[start..pos]);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad netpbm header field".into()))
    };
    if num(fields[3])? != 255 {
        return Err(Error::Format("only 8-bit netpbm is supported".into()));
    }
    Ok((fields[0], num(fields[1])?, num(fields[2])?, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (magic, w, h, pos) = parse_header(bytes)?;
    if magic != b"P6" {
        return Err(Error::Format("not a binary PPM".into()));
    }
    let plane = w * h;
    let raster = bytes.get(pos..pos + 3 * plane).ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = from_u8(raster[3 * i + c]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (magic, w, h, pos) = parse_header(bytes)?;
    if magic != b"P5" {
        return Err(Error::Format("not a binary PGM".into()));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    Tensor::new(vec![h, w], raster.iter().map(|&v| from_u8(v)).collect())
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write(path, encode_ppm(img)?)
}

pub fn write_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    write(path, encode_pgm(map)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&read(path)?)
}
