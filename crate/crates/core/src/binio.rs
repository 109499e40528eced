//! Little-endian helpers shared by the binary scene and checkpoint formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct LeWriter<W: Write> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.inner.write_all(&[v])
    }

    pub fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        vs.iter().try_for_each(|v| self.f64(*v))
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct LeReader<R: Read> {
    inner: R,
}

fn truncated(e: std::io::Error) -> Error {
    Error::Corrupt(format!("truncated or unreadable data: {e}"))
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub fn f64s<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in out.iter_mut() {
            *v = self.f64()?;
        }
        Ok(out)
    }

    /// Length prefix with a sanity bound so corrupt files cannot request
    /// absurd allocations.
    pub fn len(&mut self, limit: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(Error::Corrupt(format!("length {n} exceeds limit {limit}")));
        }
        Ok(n as usize)
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Corrupt("trailing bytes after payload".into())),
            Err(e) => Err(truncated(e)),
        }
    }
}
