//! Datasets, dequantization, noise injection and splitting.

pub mod idx;
pub mod toy;

use candle_core::Tensor;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, DatasetConfig};
use crate::error::{Error, Result};
use crate::params::DEVICE;

/// Layout of a single sample. Vectors are stored as `1 x 1 x n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DataShape {
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn vector(n: usize) -> Self {
        Self::image(1, 1, n)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_image(&self) -> bool {
        self.height > 1
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub shape: DataShape,
    /// `count x N`, one sample per row.
    pub samples: Array2<f64>,
    /// Sizes of the splits this dataset was assembled from; always sums to `len()`.
    pub split_sizes: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: DataShape, samples: Array2<f64>) -> Result<Self> {
        if samples.ncols() != shape.numel() {
            return Err(Error::Dimension(format!(
                "samples have {} columns but the shape has {} elements",
                samples.ncols(),
                shape.numel()
            )));
        }
        let count = samples.nrows();
        Ok(Self {
            name: name.into(),
            shape,
            samples,
            split_sizes: vec![count],
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> Array2<f64> {
        self.samples.select(Axis(0), indices)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        array_to_tensor(&self.samples)
    }

    /// Rows `indices` as a `(B, N)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        array_to_tensor(&self.select(indices))
    }

    pub fn head(&self, count: usize) -> Array2<f64> {
        let n = count.min(self.len());
        self.samples.slice(ndarray::s![..n, ..]).to_owned()
    }
}

pub fn array_to_tensor(a: &Array2<f64>) -> Result<Tensor> {
    let (r, c) = a.dim();
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (r, c), &DEVICE)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v: Vec<f64> = t.flatten_all()?.to_vec1()?;
    Array2::from_shape_vec((r, c), v).map_err(|e| Error::Dimension(e.to_string()))
}

/// Largest `f64` below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `(raw + u) / 256` with `u ~ U[0, 1)`; results stay strictly below one.
pub fn dequantize(raw: &[i32], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if let Some(v) = raw.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::Domain(format!(
            "dequantization expects integers in 0..=255, got {v}"
        )));
    }
    Ok(raw
        .iter()
        .map(|&r| {
            let u: f64 = rng.random();
            // (255 + u) can round up to 256 in floating point
            ((r as f64 + u) / 256.0).min(BELOW_ONE)
        })
        .collect())
}

pub fn dequantize_bytes(raw: &[u8], rng: &mut impl Rng) -> Vec<f64> {
    raw.iter()
        .map(|&r| {
            let u: f64 = rng.random();
            ((r as f64 + u) / 256.0).min(BELOW_ONE)
        })
        .collect()
}

/// Gaussian white noise, followed by clipping to `[0, 1]` for pixel data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    sigma: f64,
    clip: bool,
}

impl NoiseSpec {
    /// Standard noise levels for MNIST-like data.
    pub const MNIST_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
    /// Standard noise levels for natural images.
    pub const NATURAL_LEVELS: [f64; 3] = [0.05, 0.1, 0.2];

    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise std must be a nonnegative finite number, got {sigma}"
            )));
        }
        Ok(Self { sigma, clip: true })
    }

    /// Noise without clipping, for real-valued vector data.
    pub fn unclipped(sigma: f64) -> Result<Self> {
        Ok(Self {
            clip: false,
            ..Self::new(sigma)?
        })
    }

    /// Clipped for images, unclipped for vectors.
    pub fn for_shape(shape: DataShape, sigma: f64) -> Result<Self> {
        if shape.is_image() {
            Self::new(sigma)
        } else {
            Self::unclipped(sigma)
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

pub fn add_noise(batch: &Array2<f64>, spec: NoiseSpec, rng: &mut impl Rng) -> Result<Array2<f64>> {
    if !spec.clip {
        if spec.sigma == 0.0 {
            return Ok(batch.clone());
        }
        let normal = Normal::new(0.0, spec.sigma).expect("validated std");
        return Ok(batch.mapv(|x| x + normal.sample(rng)));
    }
    if let Some(v) = batch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "noise injection expects values in [0, 1], got {v}"
        )));
    }
    if spec.sigma == 0.0 {
        return Ok(batch.clone());
    }
    let normal = Normal::new(0.0, spec.sigma).expect("validated std");
    Ok(batch.mapv(|x| (x + normal.sample(rng)).clamp(0.0, 1.0)))
}

/// Seeded disjoint split into `(train, validation)`.
pub fn split(ds: &Dataset, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let n = ds.len();
    let val = (n as f64 * validation_fraction).round() as usize;
    if val == 0 || val >= n {
        return Err(Error::InvalidArgument(format!(
            "fraction {validation_fraction} of {n} samples gives a degenerate split"
        )));
    }
    let (train_idx, val_idx) = split_indices(n, val, seed);
    let make = |idx: &[usize], suffix: &str| Dataset {
        name: format!("{}-{suffix}", ds.name),
        shape: ds.shape,
        samples: ds.select(idx),
        split_sizes: vec![idx.len()],
    };
    Ok((make(&train_idx, "train"), make(&val_idx, "validation")))
}

/// Returns `(train, validation)` index sets, each sorted.
pub fn split_indices(n: usize, validation: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..validation].to_vec();
    let mut train = idx[validation..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Mirrors each image in `batch` left-right with probability one half.
pub fn random_hflip(batch: &mut Array2<f64>, shape: DataShape, rng: &mut impl Rng) {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    for mut row in batch.rows_mut() {
        if !rng.random_bool(0.5) {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                for x in 0..w / 2 {
                    row.swap(base + x, base + w - 1 - x);
                }
            }
        }
    }
}

/// Train/validation/test sets for one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Whether samples were dequantized from 8-bit integers.
    pub dequantized: bool,
    /// Generator of toy data, with the noise-free test points.
    pub toy: Option<(toy::ToyManifold, Array2<f64>)>,
}

/// Loads or generates the datasets described by `cfg`; splitting is seeded by `seed`.
pub fn load_run_data(cfg: &DatasetConfig, seed: u64) -> Result<RunData> {
    match &cfg.source {
        DataSource::Toy {
            manifold,
            ambient_dim,
            count,
            test_count,
            noise,
            seed: toy_seed,
        } => {
            let all = toy::toy_manifold(*manifold, *ambient_dim, count + test_count, *noise, *toy_seed)?;
            let pool: Vec<usize> = (0..*count).collect();
            let held: Vec<usize> = (*count..count + test_count).collect();
            let ds = &all.dataset;
            let train_pool = Dataset::new(ds.name.clone(), ds.shape, ds.select(&pool))?;
            let mut test = Dataset::new(format!("{}-test", ds.name), ds.shape, ds.select(&held))?;
            test.split_sizes = vec![*test_count];
            let (train, validation) = split(&train_pool, cfg.validation_fraction, seed)?;
            let clean_test = all.clean.select(Axis(0), &held);
            Ok(RunData {
                train,
                validation,
                test,
                dequantized: false,
                toy: Some((all.manifold, clean_test)),
            })
        }
        DataSource::Idx {
            train_images,
            test_images,
            limit,
        } => {
            let mut tr = idx::read_images(train_images)?;
            let mut te = idx::read_images(test_images)?;
            if let Some(l) = limit {
                tr = tr.truncate(*l);
                te = te.truncate(*l);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = tr.dequantize("idx", &mut rng)?;
            let test = te.dequantize("idx-test", &mut rng)?;
            let (train, validation) = split(&pool, cfg.validation_fraction, seed)?;
            Ok(RunData {
                train,
                validation,
                test,
                dequantized: true,
                toy: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dequantize_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = dequantize(&[0, 255], &mut rng).unwrap();
            assert!(v[0] >= 0.0 && v[0] < 1.0 / 256.0);
            assert!(v[1] >= 255.0 / 256.0 && v[1] < 1.0);
        }
        assert!(dequantize(&[256], &mut rng).is_err());
        assert!(dequantize(&[-1], &mut rng).is_err());
    }

    #[test]
    fn dequantize_is_seeded() {
        let raw: Vec<i32> = (0..50).collect();
        let a = dequantize(&raw, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dequantize(&raw, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_is_identity_and_negative_is_rejected() {
        let x = array![[0.1, 0.9], [0.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&x, NoiseSpec::new(0.0).unwrap(), &mut rng).unwrap(), x);
        assert!(NoiseSpec::new(-0.1).is_err());
        assert!(add_noise(&array![[1.5]], NoiseSpec::new(0.1).unwrap(), &mut rng).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = Dataset::new("d", DataShape::vector(1), Array2::zeros((1000, 1))).unwrap();
        let (tr, va) = split(&ds, 0.1, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (900, 100));
        let (a, b) = split_indices(1000, 100, 3);
        assert!(a.iter().all(|i| b.binary_search(i).is_err()));
        assert_eq!(split_indices(1000, 100, 3), (a, b));
        assert!(split(&ds, 0.0, 0).is_err());
        let tiny = Dataset::new("t", DataShape::vector(1), Array2::zeros((3, 1))).unwrap();
        assert!(split(&tiny, 0.1, 0).is_err());
    }

    #[test]
    fn hflip_mirrors_rows() {
        let shape = DataShape::image(1, 2, 3);
        let mut b = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        // find a seed whose first coin flips the row
        let mut flipped = false;
        for seed in 0..10 {
            let mut c = b.clone();
            random_hflip(&mut c, shape, &mut ChaCha8Rng::seed_from_u64(seed));
            if c != b {
                assert_eq!(c, array![[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]]);
                flipped = true;
                b = c;
                break;
            }
        }
        assert!(flipped && b[[0, 0]] == 3.0);
    }

    #[test]
    fn noise_clipping_follows_the_data_kind() {
        let x = array![[0.0, 0.5, 1.0, 0.3], [0.2, 0.9, 0.99, 0.7]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = NoiseSpec::for_shape(DataShape::image(1, 2, 2), 0.5).unwrap();
        let y = add_noise(&x, img, &mut rng).unwrap();
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));

        let vec = NoiseSpec::for_shape(DataShape::vector(4), 0.5).unwrap();
        let y = add_noise(&x, vec, &mut rng).unwrap();
        assert!(y.iter().any(|v| !(0.0..=1.0).contains(v)));
        // Vectors may live anywhere on the real line.
        let wide = array![[-3.0, 7.0]];
        assert!(add_noise(&wide, NoiseSpec::unclipped(0.1).unwrap(), &mut rng).is_ok());
        assert!(add_noise(&wide, NoiseSpec::new(0.1).unwrap(), &mut rng).is_err());
    }
}
