//! Linear-radiance RGB images and their file formats.
//!
//! All arithmetic happens in linear radiance. PNG files are gamma-2.2
//! encoded on write and decoded on read; NPY files hold raw `<f4` grids of
//! shape `(H, W, 3)`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PNG_GAMMA: f64 = 2.2;

/// Rec.709 luminance weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// `H x W x 3` row-major linear radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", width * height * 3),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", other.width, other.height),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Self, s: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    /// Per-pixel Rec.709 luminance, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| p[0] * LUMA_WEIGHTS[0] + p[1] * LUMA_WEIGHTS[1] + p[2] * LUMA_WEIGHTS[2])
            .collect()
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0).powf(1.0 / PNG_GAMMA) * 255.0).round() as u8)
            .collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| (b as f64 / 255.0).powf(PNG_GAMMA))
            .collect();
        Self::from_vec(w as usize, h as usize, data)
    }

    pub fn write_npy<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dict = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, 3), }}",
            self.height, self.width
        );
        // magic(6) + version(2) + header_len(2) + dict + padding + '\n' must be a multiple of 64.
        let unpadded = 10 + dict.len() + 1;
        let pad = (64 - unpadded % 64) % 64;
        let header = format!("{dict}{}\n", " ".repeat(pad));
        out.write_all(b"\x93NUMPY\x01\x00")?;
        out.write_all(&(header.len() as u16).to_le_bytes())?;
        out.write_all(header.as_bytes())?;
        for v in &self.data {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_npy<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Corrupt(format!("unreadable npy data: {e}")))?;
        if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
            return Err(Error::Corrupt("missing NPY magic".into()));
        }
        let (header_len, offset) = match bytes[6] {
            1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
            2 | 3 if bytes.len() >= 12 => (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            ),
            v => return Err(Error::VersionMismatch { found: v as u32, expected: 1 }),
        };
        let header = bytes
            .get(offset..offset + header_len)
            .and_then(|h| std::str::from_utf8(h).ok())
            .ok_or_else(|| Error::Corrupt("bad NPY header".into()))?;
        if !header.contains("'descr': '<f4'") || header.contains("'fortran_order': True") {
            return Err(Error::Corrupt(format!("unsupported NPY layout: {header}")));
        }
        let shape_str = header
            .split("'shape': (")
            .nth(1)
            .and_then(|s| s.split(')').next())
            .ok_or_else(|| Error::Corrupt("NPY header lacks shape".into()))?;
        let dims: Vec<usize> = shape_str
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Corrupt(format!("bad NPY shape '{shape_str}'")))?;
        if dims.len() != 3 || dims[2] != 3 {
            return Err(Error::Corrupt(format!("expected (H, W, 3), got {dims:?}")));
        }
        let payload = &bytes[offset + header_len..];
        let n = dims[0] * dims[1] * 3;
        if payload.len() != n * 4 {
            return Err(Error::Corrupt(format!(
                "NPY payload has {} bytes, expected {}",
                payload.len(),
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_vec(dims[1], dims[0], data)
    }

    pub fn save_npy(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_npy(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_npy(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_npy(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn npy_roundtrip_is_lossless_for_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageBuffer::from_fn(7, 5, |_, _, _| rng.random::<f32>() as f64);
        let mut buf = Vec::new();
        img.write_npy(&mut buf).unwrap();
        assert_eq!((buf.len() - 7 * 5 * 12) % 64, 0);
        assert_eq!(ImageBuffer::read_npy(&buf[..]).unwrap(), img);
    }

    #[test]
    fn npy_rejects_truncation() {
        let img = ImageBuffer::filled(3, 3, 0.25);
        let mut buf = Vec::new();
        img.write_npy(&mut buf).unwrap();
        buf.pop();
        assert!(ImageBuffer::read_npy(&buf[..]).is_err());
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageBuffer::from_fn(8, 4, |x, y, c| ((x + y + c) as f64 / 14.0).min(1.0));
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            // One 8-bit step in gamma space bounds the linear error.
            assert!((a.powf(1.0 / PNG_GAMMA) - b.powf(1.0 / PNG_GAMMA)).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn shape_checks() {
        let a = ImageBuffer::new(2, 2);
        let b = ImageBuffer::new(3, 2);
        assert!(a.check_shape(&b).is_err());
        assert!(ImageBuffer::from_vec(2, 2, vec![0.0; 5]).is_err());
    }
}
