//! Reader for the IDX byte format used by MNIST-family datasets.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use super::{dequantize_bytes, DataShape, Dataset};
use crate::error::{Error, Result};

/// Unsigned-byte images: `count x rows x cols` values in `0..=255`.
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let bad = |m: &str| Error::InvalidArgument(format!("malformed IDX image file: {m}"));
    if bytes.len() < 16 {
        return Err(bad("shorter than the header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != 3 {
        return Err(bad("expected an unsigned-byte tensor with 3 dimensions"));
    }
    let dim = |i: usize| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, rows, cols) = (dim(0), dim(1), dim(2));
    let expected = count * rows * cols;
    if bytes.len() - 16 != expected {
        return Err(bad(&format!(
            "header promises {expected} pixels, file holds {}",
            bytes.len() - 16
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_images(&bytes)
}

impl IdxImages {
    /// Keeps the first `limit` images.
    pub fn truncate(mut self, limit: usize) -> Self {
        if limit < self.count {
            self.count = limit;
            self.pixels.truncate(limit * self.rows * self.cols);
        }
        self
    }

    pub fn dequantize(&self, name: &str, rng: &mut impl Rng) -> Result<Dataset> {
        let n = self.rows * self.cols;
        let values = dequantize_bytes(&self.pixels, rng);
        let samples = Array2::from_shape_vec((self.count, n), values)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Dataset::new(name, DataShape::image(1, self.rows, self.cols), samples)
    }
}

/// Serializes images to IDX bytes (used by tests and tooling).
pub fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 3];
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}
