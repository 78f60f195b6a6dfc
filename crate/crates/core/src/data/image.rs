use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const WIDTH: usize = 48;
pub const HEIGHT: usize = 48;
pub const PIXELS: usize = WIDTH * HEIGHT;

/// A 48×48 grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Shape(format!(
                "image needs {PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric(format!(
                "pixel {i} = {} lies outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(GrayImage { pixels })
    }

    pub fn filled(value: f64) -> Self {
        GrayImage {
            pixels: vec![value.clamp(0.0, 1.0); PIXELS],
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| to_byte(*v)).collect()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Applies `f` to every pixel and clamps the result back into `[0, 1]`.
    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        GrayImage {
            pixels: self
                .pixels
                .iter()
                .enumerate()
                .map(|(i, &v)| f(i, v).clamp(0.0, 1.0))
                .collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * WIDTH + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / PIXELS as f64
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, WIDTH, HEIGHT, &self.to_bytes())
    }
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(Error::file(path))?;
    file.write_all(&encode_pgm(width, height, bytes)?)
        .map_err(Error::file(path))
}

pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() != width * height {
        return Err(Error::Shape(format!(
            "{} bytes for a {width}x{height} image",
            bytes.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Parses a P5 PGM produced by [`encode_pgm`]; returns (width, height, bytes).
pub fn decode_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Parse {
        row: 0,
        message: format!("PGM: {m}"),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = &data[pos + 1..];
    if body.len() != w * h {
        return Err(bad("payload size mismatch"));
    }
    Ok((w, h, body.to_vec()))
}
