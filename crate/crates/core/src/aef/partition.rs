use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::flow::BlockSplit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Center,
    Corner,
    Random,
}

/// Choice of `D` core coordinates out of `N`; the remaining ones form the shell.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionScheme {
    pub kind: PartitionKind,
    pub seed: u64,
    n: usize,
    /// Sorted core indices.
    core: Vec<usize>,
}

impl PartitionScheme {
    pub fn new(kind: PartitionKind, shape: DataShape, d: usize, seed: u64) -> Result<Self> {
        let n = shape.numel();
        if d == 0 || d >= n {
            return Err(Error::InvalidArgument(format!(
                "core size must satisfy 0 < D < N, got D = {d}, N = {n}"
            )));
        }
        let mut core = match kind {
            PartitionKind::Random => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                idx.truncate(d);
                idx
            }
            PartitionKind::Center | PartitionKind::Corner => block_indices(kind, shape, d)?,
        };
        core.sort_unstable();
        Ok(Self { kind, seed, n, core })
    }

    pub fn core(&self) -> &[usize] {
        &self.core
    }

    pub fn shell(&self) -> Vec<usize> {
        let mut in_core = vec![false; self.n];
        for &i in &self.core {
            in_core[i] = true;
        }
        (0..self.n).filter(|i| !in_core[*i]).collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.core.len()
    }

    /// Split with the core as block one.
    pub fn split(&self) -> Result<BlockSplit> {
        BlockSplit::new(self.n, &self.core)
    }
}

/// Pixel block for center/corner schemes.
///
/// Images use a `ceil(sqrt(D/C))`-sided square per channel, truncated row-major;
/// vectors use a contiguous run.
fn block_indices(kind: PartitionKind, shape: DataShape, d: usize) -> Result<Vec<usize>> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    if h == 1 {
        let start = match kind {
            PartitionKind::Center => (shape.numel() - d) / 2,
            _ => 0,
        };
        return Ok((start..start + d).collect());
    }
    if d % c != 0 {
        return Err(Error::InvalidArgument(format!(
            "core size {d} is not divisible by the {c} channels"
        )));
    }
    let per = d / c;
    let side = (per as f64).sqrt().ceil() as usize;
    if side > h || side > w {
        return Err(Error::InvalidArgument(format!(
            "a {side}x{side} core block does not fit a {h}x{w} image"
        )));
    }
    let (top, left) = match kind {
        PartitionKind::Center => ((h - side) / 2, (w - side) / 2),
        _ => (0, 0),
    };
    let mut out = Vec::with_capacity(d);
    for ch in 0..c {
        let block = (0..side).flat_map(|y| (0..side).map(move |x| (y, x))).take(per);
        for (y, x) in block {
            out.push((ch * h + top + y) * w + left + x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_of_four_by_four() {
        let p = PartitionScheme::new(PartitionKind::Center, DataShape::image(1, 4, 4), 4, 0).unwrap();
        assert_eq!(p.core(), &[5, 6, 9, 10]);
        assert_eq!(p.shell().len(), 12);
    }

    #[test]
    fn corner_truncates_row_major() {
        let p = PartitionScheme::new(PartitionKind::Corner, DataShape::image(1, 4, 4), 3, 0).unwrap();
        assert_eq!(p.core(), &[0, 1, 4]);
    }

    #[test]
    fn multichannel_blocks_repeat_per_channel() {
        let p = PartitionScheme::new(PartitionKind::Corner, DataShape::image(2, 2, 2), 2, 0).unwrap();
        assert_eq!(p.core(), &[0, 4]);
        assert!(PartitionScheme::new(PartitionKind::Corner, DataShape::image(2, 2, 2), 3, 0).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let s = DataShape::vector(20);
        let a = PartitionScheme::new(PartitionKind::Random, s, 5, 9).unwrap();
        let b = PartitionScheme::new(PartitionKind::Random, s, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.core().len(), 5);
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        let s = DataShape::vector(4);
        assert!(PartitionScheme::new(PartitionKind::Center, s, 4, 0).is_err());
        assert!(PartitionScheme::new(PartitionKind::Center, s, 0, 0).is_err());
    }

    #[test]
    fn vector_center_is_contiguous() {
        let p = PartitionScheme::new(PartitionKind::Center, DataShape::vector(6), 2, 0).unwrap();
        assert_eq!(p.core(), &[2, 3]);
    }
}
