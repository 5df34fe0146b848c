//! Multi-band feature cube and label raster, with their binary formats.
//!
//! MFPC layout (little endian): `"MFPC"`, u32 version (1), u32 K, u32 H,
//! u32 W, u32 C, then K band blocks of `9*H*W` f32 in (channel, row, col)
//! order, then `H*W` u16 labels (0 = unlabeled).
//!
//! MFLB layout: `"MFLB"`, u32 H, u32 W, then `H*W` u16 labels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURES: usize = 9;
const CUBE_MAGIC: &[u8; 4] = b"MFPC";
const LABEL_MAGIC: &[u8; 4] = b"MFLB";
const CUBE_VERSION: u32 = 1;

/// Per-band 9-channel rasters sharing one label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct PolSarCube {
    height: usize,
    width: usize,
    classes: usize,
    bands: Vec<Vec<f32>>,
    labels: Vec<u16>,
}

impl PolSarCube {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        bands: Vec<Vec<f32>>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let plane = height
            .checked_mul(width)
            .ok_or_else(|| Error::DimensionMismatch("raster size overflows".into()))?;
        if bands.is_empty() {
            return Err(Error::InvalidValue("cube needs at least one band".into()));
        }
        for (k, b) in bands.iter().enumerate() {
            if b.len() != FEATURES * plane {
                return Err(Error::DimensionMismatch(format!(
                    "band {} holds {} values, expected {}",
                    k,
                    b.len(),
                    FEATURES * plane
                )));
            }
            if b[..3 * plane].iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidValue(format!(
                    "band {} has a negative or NaN diagonal power",
                    k
                )));
            }
        }
        if labels.len() != plane {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {}x{} raster",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > classes) {
            return Err(Error::InvalidValue(format!(
                "label {} exceeds class count {}",
                bad, classes
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            bands,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Band `k` as `9*H*W` values in (channel, row, col) order.
    pub fn band(&self, k: usize) -> &[f32] {
        &self.bands[k]
    }

    pub fn feature(&self, band: usize, channel: usize, row: usize, col: usize) -> f32 {
        self.bands[band][(channel * self.height + row) * self.width + col]
    }

    /// The 9-vector of one pixel in one band.
    pub fn pixel(&self, band: usize, row: usize, col: usize) -> [f32; FEATURES] {
        std::array::from_fn(|c| self.feature(band, c, row, col))
    }

    /// A cube holding only the listed bands, in the given order.
    pub fn select_bands(&self, which: &[usize]) -> Result<Self> {
        let bands = which
            .iter()
            .map(|&k| {
                self.bands
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::InvalidValue(format!("no band {}", k)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.height, self.width, self.classes, bands, self.labels.clone())
    }

    pub fn label_raster(&self) -> LabelRaster {
        LabelRaster {
            height: self.height,
            width: self.width,
            labels: self.labels.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(24 + self.bands.len() * FEATURES * plane * 4 + plane * 2);
        out.extend_from_slice(CUBE_MAGIC);
        for v in [
            CUBE_VERSION,
            self.bands.len() as u32,
            self.height as u32,
            self.width as u32,
            self.classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.bands {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CUBE_MAGIC {
            return Err(Error::Parse("bad magic: not an MFPC cube".into()));
        }
        let version = r.u32()?;
        if version != CUBE_VERSION {
            return Err(Error::Parse(format!("unsupported MFPC version {}", version)));
        }
        let k = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let plane = h
            .checked_mul(w)
            .ok_or_else(|| Error::Parse(format!("dimensions {}x{} overflow", h, w)))?;
        let band_bytes = plane
            .checked_mul(FEATURES * 4)
            .ok_or_else(|| Error::Parse("band size overflows".into()))?;
        let payload = band_bytes
            .checked_mul(k)
            .and_then(|b| b.checked_add(plane * 2))
            .ok_or_else(|| Error::Parse("payload size overflows".into()))?;
        if r.remaining() < payload {
            return Err(Error::Parse(format!(
                "truncated payload: header advertises {} bands of {}x{} ({} bytes), {} available",
                k,
                h,
                w,
                payload,
                r.remaining()
            )));
        }
        let mut bands = Vec::with_capacity(k);
        for _ in 0..k {
            let raw = r.take(band_bytes)?;
            bands.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
        }
        let labels = r
            .take(plane * 2)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if r.remaining() != 0 {
            return Err(Error::Parse(format!("{} trailing bytes", r.remaining())));
        }
        Self::new(h, w, c, bands, labels).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Class raster, used for predictions (MFLB files) and ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {}x{} raster",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.labels.len() * 2);
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != LABEL_MAGIC {
            return Err(Error::Parse("bad magic: not an MFLB raster".into()));
        }
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let n = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| Error::Parse(format!("dimensions {}x{} overflow", h, w)))?;
        if r.remaining() != n {
            return Err(Error::Parse(format!(
                "expected {} label bytes, found {}",
                n,
                r.remaining()
            )));
        }
        let labels = r
            .take(n)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(h, w, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse(format!(
                "truncated input: wanted {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
