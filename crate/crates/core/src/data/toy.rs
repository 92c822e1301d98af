//! Synthetic low-dimensional manifolds embedded in `R^N` by a random orthonormal map.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataShape, Dataset};
use crate::config::ManifoldKind;
use crate::error::{Error, Result};

pub const CIRCLE_RADIUS: f64 = 1.0;
const SINE_RANGE: f64 = PI;
const SWISS_T: (f64, f64) = (1.5 * PI, 4.5 * PI);
const SWISS_HEIGHT: f64 = 1.0;
const SWISS_SCALE: f64 = 1.0 / (4.5 * PI);

pub fn intrinsic_dim(kind: ManifoldKind) -> usize {
    match kind {
        ManifoldKind::SineCurve | ManifoldKind::Circle => 1,
        ManifoldKind::SwissRibbon => 2,
    }
}

/// Dimension of the flat space the manifold is drawn in before embedding.
pub fn chart_dim(kind: ManifoldKind) -> usize {
    match kind {
        ManifoldKind::SineCurve | ManifoldKind::Circle => 2,
        ManifoldKind::SwissRibbon => 3,
    }
}

/// Everything needed to regenerate the data or measure distances to the true manifold.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyManifold {
    pub kind: ManifoldKind,
    pub ambient_dim: usize,
    pub noise: f64,
    pub seed: u64,
    /// `ambient_dim x chart_dim` orthonormal columns, row-major.
    pub embedding: Vec<f64>,
}

impl ToyManifold {
    pub fn new(kind: ManifoldKind, ambient_dim: usize, noise: f64, seed: u64) -> Result<Self> {
        let m = chart_dim(kind);
        if ambient_dim < m || intrinsic_dim(kind) >= ambient_dim {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} needs an ambient dimension of at least {m}, got {ambient_dim}"
            )));
        }
        if !(noise >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise must be nonnegative, got {noise}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(ambient_dim, m, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let embedding = (0..ambient_dim)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| q[(i, j)])
            .collect();
        Ok(Self {
            kind,
            ambient_dim,
            noise,
            seed,
            embedding,
        })
    }

    fn chart(&self) -> usize {
        chart_dim(self.kind)
    }

    /// Point on the manifold in chart coordinates for intrinsic parameters `t`.
    pub fn chart_point(&self, t: &[f64]) -> Vec<f64> {
        match self.kind {
            ManifoldKind::SineCurve => vec![t[0], t[0].sin()],
            ManifoldKind::Circle => vec![CIRCLE_RADIUS * t[0].cos(), CIRCLE_RADIUS * t[0].sin()],
            ManifoldKind::SwissRibbon => vec![
                SWISS_SCALE * t[0] * t[0].cos(),
                t[1],
                SWISS_SCALE * t[0] * t[0].sin(),
            ],
        }
    }

    pub fn embed(&self, chart: &[f64]) -> Vec<f64> {
        let m = self.chart();
        (0..self.ambient_dim)
            .map(|i| (0..m).map(|j| self.embedding[i * m + j] * chart[j]).sum())
            .collect()
    }

    /// Orthogonal projection of an ambient point onto the chart plane, and the residual norm.
    pub fn project(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let m = self.chart();
        let c: Vec<f64> = (0..m)
            .map(|j| (0..self.ambient_dim).map(|i| self.embedding[i * m + j] * x[i]).sum())
            .collect();
        let back = self.embed(&c);
        let off: f64 = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
        (c, off.sqrt())
    }

    fn sample_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.kind {
            ManifoldKind::SineCurve => vec![rng.random_range(-SINE_RANGE..SINE_RANGE)],
            ManifoldKind::Circle => vec![rng.random_range(0.0..2.0 * PI)],
            ManifoldKind::SwissRibbon => vec![
                rng.random_range(SWISS_T.0..SWISS_T.1),
                rng.random_range(0.0..SWISS_HEIGHT),
            ],
        }
    }

    /// Euclidean distance from `x` to the (bounded) clean manifold.
    pub fn distance(&self, x: &[f64]) -> f64 {
        let (c, off) = self.project(x);
        let in_plane = match self.kind {
            ManifoldKind::Circle => ((c[0].powi(2) + c[1].powi(2)).sqrt() - CIRCLE_RADIUS).abs(),
            ManifoldKind::SineCurve => curve_distance(-SINE_RANGE, SINE_RANGE, |t| {
                (t - c[0]).powi(2) + (t.sin() - c[1]).powi(2)
            }),
            ManifoldKind::SwissRibbon => {
                let h = c[1].clamp(0.0, SWISS_HEIGHT);
                let d = curve_distance(SWISS_T.0, SWISS_T.1, |t| {
                    (SWISS_SCALE * t * t.cos() - c[0]).powi(2) + (SWISS_SCALE * t * t.sin() - c[2]).powi(2)
                });
                (d * d + (c[1] - h).powi(2)).sqrt()
            }
        };
        (in_plane * in_plane + off * off).sqrt()
    }
}

/// `sqrt(min_t f(t))` over `[lo, hi]`: dense grid followed by golden-section refinement.
fn curve_distance(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    const GRID: usize = 2000;
    let step = (hi - lo) / GRID as f64;
    let best = (0..=GRID)
        .map(|k| lo + k as f64 * step)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("non-empty grid");
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    f(0.5 * (a + b)).min(f(best)).max(0.0).sqrt()
}

/// A generated toy dataset with its clean (noise-free) counterpart.
#[derive(Clone, Debug)]
pub struct ToyData {
    pub dataset: Dataset,
    pub clean: Array2<f64>,
    pub manifold: ToyManifold,
}

/// Samples `count` points on the manifold plus isotropic Gaussian noise.
///
/// Each coordinate gets std `noise / sqrt(N)`, so the expected squared distance
/// from the manifold is `noise^2` regardless of the ambient dimension.
pub fn toy_manifold(
    kind: ManifoldKind,
    ambient_dim: usize,
    count: usize,
    noise: f64,
    seed: u64,
) -> Result<ToyData> {
    let manifold = ToyManifold::new(kind, ambient_dim, noise, seed)?;
    // separate stream so the embedding does not depend on `count`
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let per_coord = noise / (ambient_dim as f64).sqrt();
    let mut clean = Array2::zeros((count, ambient_dim));
    let mut noisy = Array2::zeros((count, ambient_dim));
    for r in 0..count {
        let t = manifold.sample_params(&mut rng);
        let p = manifold.embed(&manifold.chart_point(&t));
        for (i, v) in p.into_iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            clean[[r, i]] = v;
            noisy[[r, i]] = v + per_coord * e;
        }
    }
    let name = format!("toy-{}", kind_name(kind));
    Ok(ToyData {
        dataset: Dataset::new(name, DataShape::vector(ambient_dim), noisy)?,
        clean,
        manifold,
    })
}

fn kind_name(kind: ManifoldKind) -> &'static str {
    match kind {
        ManifoldKind::SineCurve => "sine-curve",
        ManifoldKind::Circle => "circle",
        ManifoldKind::SwissRibbon => "swiss-ribbon",
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    manifold: ToyManifold,
    count: usize,
    name: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes samples as little-endian `f64` rows to `path` and generator parameters next to it.
pub fn save(data: &ToyData, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = data
        .dataset
        .samples
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        manifold: data.manifold.clone(),
        count: data.dataset.len(),
        name: data.dataset.name.clone(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

/// Reads a dataset written by [`save`]. The clean points are regenerated from the sidecar seed.
pub fn load(path: &Path) -> Result<ToyData> {
    let sp = sidecar_path(path);
    let side: Sidecar =
        serde_json::from_slice(&std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = side.manifold.ambient_dim;
    if bytes.len() != side.count * n * 8 {
        return Err(Error::Dimension(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            side.count * n * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let samples = Array2::from_shape_vec((side.count, n), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let m = &side.manifold;
    let regenerated = toy_manifold(m.kind, n, side.count, m.noise, m.seed)?;
    Ok(ToyData {
        dataset: Dataset::new(side.name, DataShape::vector(n), samples)?,
        clean: regenerated.clean,
        manifold: side.manifold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_circle_has_fixed_radius() {
        let d = toy_manifold(ManifoldKind::Circle, 2, 500, 0.0, 4).unwrap();
        for r in d.dataset.samples.rows() {
            assert!((r[0] * r[0] + r[1] * r[1] - CIRCLE_RADIUS.powi(2)).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = toy_manifold(ManifoldKind::SwissRibbon, 5, 50, 0.1, 11).unwrap();
        let b = toy_manifold(ManifoldKind::SwissRibbon, 5, 50, 0.1, 11).unwrap();
        assert_eq!(a.dataset.samples, b.dataset.samples);
        let c = toy_manifold(ManifoldKind::SwissRibbon, 5, 50, 0.1, 12).unwrap();
        assert_ne!(a.dataset.samples, c.dataset.samples);
    }

    #[test]
    fn embedding_is_orthonormal() {
        let m = ToyManifold::new(ManifoldKind::SwissRibbon, 7, 0.0, 2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..7).map(|i| m.embedding[i * 3 + a] * m.embedding[i * 3 + b]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clean_points_have_zero_distance() {
        for kind in [ManifoldKind::SineCurve, ManifoldKind::Circle, ManifoldKind::SwissRibbon] {
            let d = toy_manifold(kind, 6, 50, 0.0, 1).unwrap();
            for r in d.dataset.samples.rows() {
                let dist = d.manifold.distance(r.as_slice().unwrap());
                assert!(dist < 1e-6, "{kind:?}: {dist}");
            }
        }
    }

    #[test]
    fn sine_curve_noise_stays_within_three_sigma() {
        let noise = 0.05;
        let d = toy_manifold(ManifoldKind::SineCurve, 10, 1000, noise, 7).unwrap();
        let within = d
            .dataset
            .samples
            .rows()
            .into_iter()
            .filter(|r| d.manifold.distance(r.as_slice().unwrap()) <= 3.0 * noise)
            .count();
        assert!(within >= 990, "{within}");
    }

    #[test]
    fn intrinsic_dimension_must_be_smaller() {
        assert!(toy_manifold(ManifoldKind::Circle, 1, 10, 0.0, 0).is_err());
        assert!(toy_manifold(ManifoldKind::SwissRibbon, 2, 10, 0.0, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.bin");
        let d = toy_manifold(ManifoldKind::SineCurve, 4, 20, 0.1, 5).unwrap();
        save(&d, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.dataset.samples, d.dataset.samples);
        assert_eq!(back.clean, d.clean);
        assert_eq!(back.manifold, d.manifold);
    }
}
