//! VAE baseline sharing the AEF's encoder, decoder, latent flow, prior and residual model.
//!
//! The posterior is `z = n_post(g_m(x) + g_s(x) ⊙ ε)` with `ε ~ N(0, I)`, where
//! `n_post` runs the latent flow in its parallel direction (IAF orientation).

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aef::{ErrorDistribution, Preprocess};
use crate::config::{ModelConfig, Variant};
use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::flow::{clamp_log_scale, ensure_finite, AutoregressiveFlow, Bijection, Prior};
use crate::nets::{row_sum, Decoder, Encoder};
use crate::params::{normal_tensor, ParamStore, DEVICE, DTYPE};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A reparameterized posterior draw.
#[derive(Clone, Debug)]
pub struct PosteriorSample {
    pub z: Tensor,
    /// Per-row `Σ log g_s + logdet n_post`.
    pub logdet: Tensor,
    /// Per-row exact `log q(z | x)`.
    pub log_q: Tensor,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    shape: DataShape,
    latent_dim: usize,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    posterior_flow: Option<AutoregressiveFlow>,
    prior: Prior,
    error: ErrorDistribution,
    preprocess: Option<Preprocess>,
}

impl VaeModel {
    pub fn new(cfg: &ModelConfig, shape: DataShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.variant != Variant::Vae {
            return Err(Error::InvalidArgument(format!(
                "{} is not a VAE variant",
                cfg.variant.as_str()
            )));
        }
        let n = shape.numel();
        let d = cfg.latent_dim;
        let mut params = ParamStore::new();
        let mut b = params.builder(rng);
        let encoder = Encoder::new(&mut b.pp("encoder"), &cfg.architecture, shape, d)?;
        let decoder = Decoder::new(&mut b.pp("decoder"), &cfg.architecture, shape, d)?;
        let posterior_flow = if cfg.latent_flow {
            Some(AutoregressiveFlow::new(&mut b.pp("latent_flow"), d, &cfg.flow)?)
        } else {
            None
        };
        let prior = Prior::new(&mut b.pp("prior"), d, cfg.prior_flow.then_some(&cfg.flow))?;
        let error = ErrorDistribution::new(&mut b.pp("error"), cfg.sigma_init, cfg.train_sigma)?;
        let preprocess = match &cfg.preprocess {
            Some(p) => Some(Preprocess::new(&mut b.pp("preprocess"), n, p.lambda)?),
            None => None,
        };
        Ok(Self {
            shape,
            latent_dim: d,
            params,
            encoder,
            decoder,
            posterior_flow,
            prior,
            error,
            preprocess,
        })
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape.numel()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn error(&self) -> &ErrorDistribution {
        &self.error
    }

    /// `z = n_post(g_m(x) + g_s(x) ⊙ noise)` together with its log-densities.
    pub fn reparameterize(&self, x: &Tensor, noise: &Tensor) -> Result<PosteriorSample> {
        let (mean, raw) = self.encoder.forward(x)?;
        let log_scale = clamp_log_scale(&raw)?;
        let y = (mean + (noise * log_scale.exp()?)?)?;
        let (z, logdet_flow) = match &self.posterior_flow {
            Some(f) => f.forward(&y)?,
            None => (y, Tensor::zeros(x.dim(0)?, DTYPE, &DEVICE)?),
        };
        ensure_finite(&z, "VAE posterior sample")?;
        let logdet = (row_sum(&log_scale)? + logdet_flow)?;
        let d = self.latent_dim as f64;
        let base = row_sum(&noise.sqr()?)?.affine(-0.5, -0.5 * d * LN_2PI)?;
        let log_q = (base - &logdet)?;
        Ok(PosteriorSample { z, logdet, log_q })
    }

    /// `log p(x | z) + log p0(z)` per row.
    fn log_joint(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let delta = (x - self.decoder.forward(z)?)?;
        Ok((self.error.log_prob(&delta)? + self.prior.log_prob(z)?)?)
    }

    /// Single-sample negative ELBO per row, with the entropy replaced by
    /// `Σ log g_s + logdet n_post + D/2 · log(2πe)`.
    pub fn elbo_loss(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let post = self.reparameterize(x, noise)?;
        let d = self.latent_dim as f64;
        let entropy = post.logdet.affine(1.0, 0.5 * d * (LN_2PI + 1.0))?;
        Ok((self.log_joint(x, &post.z)? + entropy)?.neg()?)
    }

    /// `log p(x|z) + log p0(z) − log q(z|x)` for the given noise draw.
    pub fn log_weight(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let post = self.reparameterize(x, noise)?;
        Ok((self.log_joint(x, &post.z)? - post.log_q)?)
    }

    pub fn draw_noise(&self, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
        normal_tensor(&[batch, self.latent_dim], 1.0, rng)
    }

    pub fn preprocess_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        match &self.preprocess {
            Some(p) => p.forward(x),
            None => Ok((x.clone(), Tensor::zeros(x.dim(0)?, DTYPE, &DEVICE)?)),
        }
    }

    pub fn preprocess_inverse(&self, y: &Tensor) -> Result<Tensor> {
        match &self.preprocess {
            Some(p) => Ok(p.inverse(y)?.0),
            None => Ok(y.clone()),
        }
    }

    /// Negative ELBO of data-space inputs, including the preprocessing Jacobian.
    pub fn loss(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (y, logdet) = self.preprocess_forward(x)?;
        Ok((self.elbo_loss(&y, noise)? - logdet)?)
    }

    pub fn sample_model(&self, temperature: f64, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let z = self.prior.sample(temperature, count, rng)?;
        self.decoder.forward(&z)
    }

    pub fn sample(&self, temperature: f64, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.preprocess_inverse(&self.sample_model(temperature, count, rng)?)
    }

    /// `f(n_post(g_m(x)))`, the decoded zero-noise posterior point.
    pub fn reconstruct_model(&self, x: &Tensor) -> Result<Tensor> {
        let noise = Tensor::zeros((x.dim(0)?, self.latent_dim), DTYPE, &DEVICE)?;
        let post = self.reparameterize(x, &noise)?;
        self.decoder.forward(&post.z)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (y, _) = self.preprocess_forward(x)?;
        self.preprocess_inverse(&self.reconstruct_model(&y)?)
    }

    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        let x = x.detach();
        let y = match self.preprocess.as_mut() {
            Some(p) => p.initialize(&x)?,
            None => x,
        };
        if let Some(f) = self.posterior_flow.as_mut() {
            let mean = self.encoder.mean(&y)?.detach();
            f.initialize(&mean)?;
        }
        let noise = Tensor::zeros((y.dim(0)?, self.latent_dim), DTYPE, &DEVICE)?;
        let z = self.reparameterize(&y, &noise)?.z.detach();
        self.prior.initialize(&z)
    }
}
