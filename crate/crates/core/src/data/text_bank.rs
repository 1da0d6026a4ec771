//! Per-class text embeddings plus learnable prompt rows.
//!
//! File layout (little-endian): magic `EMPT`, u32 version, u32 C, u32 d,
//! then C·d f32 values.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const TEXT_MAGIC: [u8; 4] = *b"EMPT";
pub const TEXT_VERSION: u32 = 1;

/// Number of learnable prompt rows when none is configured.
pub const DEFAULT_PROMPT_ROWS: usize = 4;
/// Learnable rows start uniform in `[-PROMPT_INIT_SCALE, PROMPT_INIT_SCALE]`.
pub const PROMPT_INIT_SCALE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    /// C x d, frozen class-description embeddings.
    pub frozen: Matrix,
    /// t x d, initial values of the learnable prompt rows.
    pub learnable: Matrix,
}

impl TextBank {
    pub fn new(frozen: Matrix, prompt_rows: usize, seed: u64) -> Self {
        let learnable = init_prompts(prompt_rows, frozen.cols(), seed);
        TextBank { frozen, learnable }
    }

    pub fn classes(&self) -> usize {
        self.frozen.rows()
    }

    pub fn prompt_rows(&self) -> usize {
        self.learnable.rows()
    }

    pub fn dim(&self) -> usize {
        self.frozen.cols()
    }

    /// `[frozen; learnable]`, shape (C + t) x d.
    pub fn prompt_matrix(&self) -> Matrix {
        let mut data = self.frozen.as_slice().to_vec();
        data.extend_from_slice(self.learnable.as_slice());
        Matrix::from_vec(self.classes() + self.prompt_rows(), self.dim(), data)
            .expect("frozen and learnable rows share d")
    }
}

pub fn init_prompts(rows: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, d, |_, _| rng.random_range(-PROMPT_INIT_SCALE..=PROMPT_INIT_SCALE))
}

pub fn text_bank_bytes(frozen: &Matrix) -> Vec<u8> {
    let mut w = Writer::with_capacity(16 + frozen.len() * 4);
    w.bytes(&TEXT_MAGIC);
    w.u32(TEXT_VERSION);
    w.u32(frozen.rows() as u32);
    w.u32(frozen.cols() as u32);
    for &v in frozen.as_slice() {
        w.f32(v as f32);
    }
    w.finish()
}

pub fn write_text_bank(frozen: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text_bank_bytes(frozen)).map_err(|e| Error::io(path, e))
}

pub fn parse_frozen_rows(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut r = Reader::new(bytes, path);
    r.magic(TEXT_MAGIC)?;
    r.version(TEXT_VERSION)?;
    let c = r.u32()? as usize;
    let d = r.u32()? as usize;
    r.require(c * d * 4)?;
    let mut data = Vec::with_capacity(c * d);
    for _ in 0..c * d {
        data.push(f64::from(r.f32()?));
    }
    Matrix::from_vec(c, d, data)
}

/// Loads the frozen rows and seeds `prompt_rows` learnable rows.
///
/// `expected_classes` is the manifest's C; a different row count in the file
/// is an error.
pub fn load_text_bank(
    path: impl AsRef<Path>,
    expected_classes: usize,
    prompt_rows: usize,
    seed: u64,
) -> Result<TextBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frozen = parse_frozen_rows(&bytes, path)?;
    if frozen.rows() != expected_classes {
        return Err(Error::DimMismatch {
            what: "text bank class rows vs manifest C",
            expected: expected_classes,
            found: frozen.rows(),
        });
    }
    Ok(TextBank::new(frozen, prompt_rows, seed))
}
