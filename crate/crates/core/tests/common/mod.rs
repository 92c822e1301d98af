#![allow(dead_code)]

use aef_core::aef::AefModel;
use aef_core::config::{Activation, Architecture, FlowConfig, ModelConfig, Variant};
use aef_core::data::DataShape;
use aef_core::params::{normal_tensor, DEVICE};
use aef_core::vae::VaeModel;
use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_flow() -> FlowConfig {
    FlowConfig {
        layers: 2,
        hidden: 8,
        blocks: 1,
        activation: Activation::Tanh,
    }
}

/// Tanh MLP config with both flows on, so every component is smooth.
pub fn model_config(variant: Variant, d: usize, hidden: &[usize]) -> ModelConfig {
    ModelConfig {
        variant,
        latent_dim: d,
        architecture: Architecture::Mlp {
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
        },
        prior_flow: true,
        latent_flow: true,
        flow: small_flow(),
        preprocess: None,
        sigma_init: 1.0,
        train_sigma: true,
        expansion_init_std: 0.5,
        partition_seed: 0,
    }
}

/// Randomly initialized AEF with every trainable parameter jittered away from its
/// (near-identity) initialization.
pub fn random_aef(cfg: &ModelConfig, shape: DataShape, seed: u64, jitter: f64) -> AefModel {
    let mut r = rng(seed);
    let m = AefModel::new(cfg, shape, &mut r).unwrap();
    m.params().perturb("", jitter, &mut r).unwrap();
    m
}

pub fn random_vae(cfg: &ModelConfig, shape: DataShape, seed: u64, jitter: f64) -> VaeModel {
    let mut r = rng(seed);
    let m = VaeModel::new(cfg, shape, &mut r).unwrap();
    m.params().perturb("", jitter, &mut r).unwrap();
    m
}

pub fn randn(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor {
    normal_tensor(&[rows, cols], std, &mut rng(seed)).unwrap()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), cols), &DEVICE).unwrap()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Linear-Gaussian model shared by the AEF and VAE oracles:
/// `z ~ N(0, 1)`, `x | z ~ N(c z + b, σ² I)` in `R^n`, so `x ~ N(b, c cᵀ + σ² I)`.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: f64,
}

impl LinearGaussian {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let s2 = self.sigma * self.sigma;
        let cc: f64 = self.c.iter().map(|v| v * v).sum();
        let r: Vec<f64> = x.iter().zip(&self.b).map(|(a, b)| a - b).collect();
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let cr: f64 = r.iter().zip(&self.c).map(|(a, b)| a * b).sum();
        // Sherman-Morrison: (σ²I + ccᵀ)⁻¹ = (I − ccᵀ/(σ² + cᵀc)) / σ²
        let quad = (rr - cr * cr / (s2 + cc)) / s2;
        let logdet = (n - 1) as f64 * s2.ln() + (s2 + cc).ln();
        -0.5 * (n as f64 * LN_2PI + logdet + quad)
    }

    /// Posterior `z | x` as `(mean, std)`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let s2 = self.sigma * self.sigma;
        let cc: f64 = self.c.iter().map(|v| v * v).sum();
        let precision = 1.0 + cc / s2;
        let cr: f64 = x
            .iter()
            .zip(&self.b)
            .zip(&self.c)
            .map(|((a, b), c)| (a - b) * c)
            .sum();
        (cr / s2 / precision, precision.sqrt().recip())
    }

    /// Row-vector gain `k` with posterior mean `k·(x − b)`.
    pub fn posterior_gain(&self) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let cc: f64 = self.c.iter().map(|v| v * v).sum();
        let precision = 1.0 + cc / s2;
        self.c.iter().map(|c| c / s2 / precision).collect()
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng(seed);
        (0..count)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                self.c
                    .iter()
                    .zip(&self.b)
                    .map(|(c, b)| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        c * z + b + self.sigma * e
                    })
                    .collect()
            })
            .collect()
    }
}

/// Config of an AEF/VAE whose encoder heads and decoder are purely linear, without flows.
pub fn linear_config(variant: Variant, sigma: f64, train_sigma: bool) -> ModelConfig {
    ModelConfig {
        variant,
        latent_dim: 1,
        architecture: Architecture::Mlp {
            hidden: vec![],
            activation: Activation::Tanh,
        },
        prior_flow: false,
        latent_flow: false,
        flow: small_flow(),
        preprocess: None,
        sigma_init: sigma,
        train_sigma,
        expansion_init_std: 0.1,
        partition_seed: 0,
    }
}

/// Sets the decoder of a linear model to `z -> c z + b`.
pub fn set_linear_decoder(params: &aef_core::params::ParamStore, lg: &LinearGaussian) {
    params.set("decoder.layer0.weight", &lg.c).unwrap();
    params.set("decoder.layer0.bias", &lg.b).unwrap();
}

/// Sets the encoder heads to `mean = xᵀa + a0`, `log-scale = ls` (constant).
pub fn set_linear_encoder(params: &aef_core::params::ParamStore, a: &[f64], a0: f64, ls: f64) {
    params.set("encoder.mean.weight", a).unwrap();
    params.set("encoder.mean.bias", &[a0]).unwrap();
    params.set("encoder.log_scale.weight", &vec![0.0; a.len()]).unwrap();
    params.set("encoder.log_scale.bias", &[ls]).unwrap();
}

/// A linear-Gaussian oracle in `R^3`.
pub fn oracle() -> LinearGaussian {
    LinearGaussian {
        c: vec![1.2, -0.7, 0.4],
        b: vec![0.3, -0.1, 0.5],
        sigma: 0.6,
    }
}
