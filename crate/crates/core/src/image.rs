//! Grayscale images, binary masks and binary PGM (P5) files.
//!
//! Generated images are quantised to multiples of 1/255 so that writing and
//! re-reading an 8-bit PGM is lossless.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data has {len} values for {height}×{width}")]
    Length {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("pixel value {0} outside [0, 1]")]
    Range(f64),
    #[error("expected {expected}×{expected} image, got {height}×{width}")]
    Resolution {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("size mismatch: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                len: data.len(),
            });
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Range(bad));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Stores `value` clamped to `[0, 1]` and quantised to 8 bits.
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = quantize(value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(f(v))).collect(),
        }
    }

    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = quantize(*v);
        }
        self
    }

    pub fn ensure_square(&self, expected: usize) -> Result<(), ImageError> {
        if self.height != expected || self.width != expected {
            return Err(ImageError::Resolution {
                expected,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        write_pgm(path, self.width, self.height, &self.to_bytes())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let (w, h, bytes) = read_pgm(path)?;
        Self::new(h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ImageError> {
        if bits.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                len: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Centre of mass `(y, x)` of set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    /// Block-wise downsampling: a cell is set when at least half of its
    /// pixels are set.
    pub fn downsample_area(&self, grid: usize) -> Vec<f64> {
        let bh = self.height / grid;
        let bw = self.width / grid;
        let mut out = vec![0.0; grid * grid];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut n = 0;
                for y in gy * bh..(gy + 1) * bh {
                    for x in gx * bw..(gx + 1) * bw {
                        n += usize::from(self.get(y, x));
                    }
                }
                if 2 * n >= bh * bw {
                    out[gy * grid + gx] = 1.0;
                }
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_pgm(path, self.width, self.height, &bytes)
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let (w, h, bytes) = read_pgm(path)?;
        Self::from_bits(h, w, bytes.iter().map(|&b| b >= 128).collect())
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<(), ImageError> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), ImageError> {
    parse_pgm(&fs::read(path)?)
}

/// Parses an 8-bit binary PGM, allowing `#` comments in the header.
pub fn parse_pgm(raw: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(ImageError::Pgm(format!("magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::Pgm(format!("bad number {s}")))
    };
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(ImageError::Pgm(format!("max value {max}")));
    }
    let body = raw.get(pos..pos + w * h).ok_or_else(|| ImageError::Pgm("short body".into()))?;
    Ok((w, h, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 3, vec![0.0, 1.0, 0.5, 0.25, 0.75, 0.1])
            .unwrap()
            .quantized();
        let p = dir.path().join("a.pgm");
        img.write_pgm(&p).unwrap();
        assert_eq!(Image::read_pgm(&p).unwrap(), img);
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n3 2\n255\n"));

        let mut m = Mask::empty(2, 2);
        m.set(1, 0, true);
        m.write_pgm(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap()[11..], [0, 0, 255, 0]);
        assert_eq!(Mask::read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn header_comments_and_errors() {
        let raw = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(parse_pgm(raw).unwrap(), (2, 1, vec![0, 255]));
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());
        assert!(Image::new(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn area_downsampling_half_rule() {
        let mut m = Mask::empty(4, 4);
        // Top-left 2×2 block: exactly half set -> 1.
        m.set(0, 0, true);
        m.set(0, 1, true);
        // Top-right block: one pixel -> 0.
        m.set(0, 3, true);
        assert_eq!(m.downsample_area(2), vec![1.0, 0.0, 0.0, 0.0]);
    }
}
