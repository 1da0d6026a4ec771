//! Patient bag files.
//!
//! Layout (little-endian): magic `EMPD`, u32 version, u32 N, u32 d,
//! u32 num_slides, N records of (u16 slide, i32 gx, i32 gy), then N·d f32
//! embeddings in row-major order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::data::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const BAG_MAGIC: [u8; 4] = *b"EMPD";
pub const BAG_VERSION: u32 = 1;

/// Grid position of a patch: tile indices on one slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchCoord {
    pub slide: u16,
    pub gx: i32,
    pub gy: i32,
}

impl PatchCoord {
    pub fn new(slide: u16, gx: i32, gy: i32) -> Self {
        PatchCoord { slide, gx, gy }
    }
}

/// All patches of one patient, across slides.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub patient_id: String,
    pub num_slides: u16,
    /// N x d, one row per patch.
    pub embeddings: Matrix,
    pub coords: Vec<PatchCoord>,
    /// Length-C binary vector; empty until a manifest attaches it.
    pub label: Vec<f64>,
}

impl PatchBag {
    pub fn new(patient_id: impl Into<String>, embeddings: Matrix, coords: Vec<PatchCoord>) -> Result<Self> {
        let num_slides = coords.iter().map(|c| c.slide + 1).max().unwrap_or(0);
        let bag = PatchBag {
            patient_id: patient_id.into(),
            num_slides,
            embeddings,
            coords,
            label: Vec::new(),
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::InvalidBag(format!("{}: no patches", self.patient_id)));
        }
        if self.embeddings.rows() != self.coords.len() {
            return Err(Error::DimMismatch {
                what: "embedding rows vs coordinate records",
                expected: self.coords.len(),
                found: self.embeddings.rows(),
            });
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if c.slide >= self.num_slides {
                return Err(Error::InvalidBag(format!(
                    "{}: slide index {} >= num_slides {}",
                    self.patient_id, c.slide, self.num_slides
                )));
            }
            if !seen.insert(*c) {
                return Err(Error::InvalidBag(format!(
                    "{}: duplicate grid cell ({}, {}) on slide {}",
                    self.patient_id, c.gx, c.gy, c.slide
                )));
            }
        }
        if !self.embeddings.is_finite() {
            return Err(Error::InvalidBag(format!("{}: non-finite embedding", self.patient_id)));
        }
        Ok(())
    }

    /// A new bag holding patches `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> PatchBag {
        PatchBag {
            patient_id: self.patient_id.clone(),
            num_slides: self.num_slides,
            embeddings: self.embeddings.select_rows(indices),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            label: self.label.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let d = self.dim();
        let mut w = Writer::with_capacity(20 + n * 10 + n * d * 4);
        w.bytes(&BAG_MAGIC);
        w.u32(BAG_VERSION);
        w.u32(n as u32);
        w.u32(d as u32);
        w.u32(u32::from(self.num_slides));
        for c in &self.coords {
            w.u16(c.slide);
            w.i32(c.gx);
            w.i32(c.gy);
        }
        for &v in self.embeddings.as_slice() {
            w.f32(v as f32);
        }
        w.finish()
    }

    /// Parses a bag; `path` is used for error messages and the patient id.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(BAG_MAGIC)?;
        r.version(BAG_VERSION)?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let num_slides = r.u32()?;
        if n == 0 {
            return Err(Error::EmptyBag { path: path.to_owned() });
        }
        r.require(n * 10 + n * d * 4)?;
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let slide = r.u16()?;
            let gx = r.i32()?;
            let gy = r.i32()?;
            coords.push(PatchCoord { slide, gx, gy });
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(f64::from(r.f32()?));
        }
        let bag = PatchBag {
            patient_id: patient_id_from_path(path),
            num_slides: u16::try_from(num_slides)
                .map_err(|_| Error::InvalidBag(format!("num_slides {num_slides} exceeds u16")))?,
            embeddings: Matrix::from_vec(n, d, data)?,
            coords,
            label: Vec::new(),
        };
        bag.validate()?;
        Ok(bag)
    }
}

pub(crate) fn patient_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn write_bag(bag: &PatchBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bag.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<PatchBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PatchBag::from_bytes(&bytes, path)
}

/// Reads a bag and checks its embedding width against the manifest.
pub fn read_bag_with_dim(path: impl AsRef<Path>, d: usize) -> Result<PatchBag> {
    let bag = read_bag(path)?;
    if bag.dim() != d {
        return Err(Error::DimMismatch {
            what: "bag embedding dimension vs manifest d",
            expected: d,
            found: bag.dim(),
        });
    }
    Ok(bag)
}
