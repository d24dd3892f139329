//! Little-endian binary encoding and the versioned section container used
//! by every checkpoint file.
//!
//! Container layout: magic `NSVC`, `u32` format version, `u32` section count,
//! then per section a 4-byte ASCII tag, a `u64` payload length and the
//! payload. Parameters inside payloads are `f32` little-endian.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"NSVC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_prefixed(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length exceeds u32"));
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.len_prefixed(b.len());
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn vector(&mut self, v: &Array1<f64>) {
        self.len_prefixed(v.len());
        for &x in v {
            self.f32(x as f32);
        }
    }

    pub fn matrix(&mut self, m: &Array2<f64>) {
        self.len_prefixed(m.nrows());
        self.len_prefixed(m.ncols());
        for &x in m {
            self.f32(x as f32);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len_prefixed(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_prefixed()?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Malformed(format!("bad utf-8: {e}")))
    }

    fn finite(&mut self) -> Result<f64> {
        let v = self.f32()?;
        if !v.is_finite() {
            return Err(Error::Malformed("non-finite parameter".into()));
        }
        Ok(f64::from(v))
    }

    pub fn vector(&mut self) -> Result<Array1<f64>> {
        let n = self.len_prefixed()?;
        (0..n).map(|_| self.finite()).collect::<Result<Vec<_>>>().map(Array1::from)
    }

    pub fn matrix(&mut self) -> Result<Array2<f64>> {
        let r = self.len_prefixed()?;
        let c = self.len_prefixed()?;
        let data = (0..r * c).map(|_| self.finite()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((r, c), data).expect("shape matches length"))
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Tagged sections in insertion order.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Container {
    sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: &[u8; 4], payload: Vec<u8>) {
        self.sections.push((*tag, payload));
    }

    pub fn get(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: &[u8; 4]) -> Result<&[u8]> {
        self.get(tag).ok_or_else(|| {
            Error::Malformed(format!("missing section {}", String::from_utf8_lossy(tag)))
        })
    }

    pub fn tags(&self) -> Vec<String> {
        self.sections
            .iter()
            .map(|(t, _)| String::from_utf8_lossy(t).into_owned())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(CONTAINER_MAGIC);
        w.u32(CONTAINER_VERSION);
        w.u32(self.sections.len() as u32);
        for (tag, payload) in &self.sections {
            w.buf.extend_from_slice(tag);
            w.u64(payload.len() as u64);
            w.buf.extend_from_slice(payload);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != CONTAINER_MAGIC {
            return Err(Error::UnknownFormat(format!(
                "bad container magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::UnknownFormat(format!("container version {version}")));
        }
        let n = r.u32()? as usize;
        let mut seen = BTreeMap::new();
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = usize::try_from(r.u64()?)
                .map_err(|_| Error::Malformed("section too large".into()))?;
            let payload = r.take(len)?.to_vec();
            if seen.insert(tag, ()).is_some() {
                return Err(Error::Malformed(format!(
                    "duplicate section {}",
                    String::from_utf8_lossy(&tag)
                )));
            }
            sections.push((tag, payload));
        }
        r.finish()?;
        Ok(Self { sections })
    }
}
