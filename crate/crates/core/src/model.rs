//! A single handle over every trainable model family.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aef::AefModel;
use crate::config::{ModelConfig, Variant};
use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::nets::{row_sum, Decoder, Encoder};
use crate::params::ParamStore;
use crate::vae::VaeModel;

/// Least-squares autoencoder `x -> f(g_m(x))`; has no density.
#[derive(Clone, Debug)]
pub struct DeterministicAe {
    shape: DataShape,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl DeterministicAe {
    pub fn new(cfg: &ModelConfig, shape: DataShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut b = params.builder(rng);
        let encoder = Encoder::new(&mut b.pp("encoder"), &cfg.architecture, shape, cfg.latent_dim)?;
        let decoder = Decoder::new(&mut b.pp("decoder"), &cfg.architecture, shape, cfg.latent_dim)?;
        Ok(Self {
            shape,
            params,
            encoder,
            decoder,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&self.encoder.mean(x)?)
    }

    /// Per-row squared reconstruction error.
    pub fn loss(&self, x: &Tensor) -> Result<Tensor> {
        row_sum(&(x - self.reconstruct(x)?)?.sqr()?)
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Aef(AefModel),
    Vae(VaeModel),
    Ae(DeterministicAe),
}

impl Model {
    pub fn new(cfg: &ModelConfig, shape: DataShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match cfg.variant {
            Variant::Vae => Model::Vae(VaeModel::new(cfg, shape, rng)?),
            Variant::DeterministicAe => Model::Ae(DeterministicAe::new(cfg, shape, rng)?),
            _ => Model::Aef(AefModel::new(cfg, shape, rng)?),
        })
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Aef(m) => m.params(),
            Model::Vae(m) => m.params(),
            Model::Ae(m) => m.params(),
        }
    }

    pub fn shape(&self) -> DataShape {
        match self {
            Model::Aef(m) => m.shape(),
            Model::Vae(m) => m.shape(),
            Model::Ae(m) => m.shape(),
        }
    }

    /// Per-row objective: exact NLL, single-sample negative ELBO, or squared error.
    pub fn loss_rows(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            Model::Aef(m) => m.nll(x),
            Model::Vae(m) => {
                let noise = m.draw_noise(x.dim(0)?, rng)?;
                m.loss(x, &noise)
            }
            Model::Ae(m) => m.loss(x),
        }
    }

    /// Batch-mean objective as a scalar tensor.
    pub fn loss(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        Ok(self.loss_rows(x, rng)?.mean_all()?)
    }

    /// Mean objective over `x`, evaluated in chunks without building a graph.
    pub fn evaluate_loss(&self, x: &Tensor, chunk: usize, rng: &mut impl Rng) -> Result<f64> {
        let n = x.dim(0)?;
        if n == 0 {
            return Err(Error::InvalidArgument("cannot evaluate an empty batch".into()));
        }
        let chunk = chunk.max(1);
        let mut total = 0.0;
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let rows = self.loss_rows(&x.narrow(0, start, len)?, rng)?.detach();
            total += rows.sum_all()?.to_scalar::<f64>()?;
            start += len;
        }
        Ok(total / n as f64)
    }

    pub fn sample(&self, temperature: f64, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            Model::Aef(m) => m.sample(temperature, count, rng),
            Model::Vae(m) => m.sample(temperature, count, rng),
            Model::Ae(_) => Err(Error::InvalidArgument(
                "a deterministic autoencoder has no prior to sample from".into(),
            )),
        }
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Model::Aef(m) => m.reconstruct(x),
            Model::Vae(m) => m.reconstruct(x),
            Model::Ae(m) => m.reconstruct(x),
        }
    }

    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        match self {
            Model::Aef(m) => m.data_init(x),
            Model::Vae(m) => m.data_init(x),
            Model::Ae(_) => Ok(()),
        }
    }

    /// Current residual scale, if the model has one.
    pub fn sigma(&self) -> Result<Option<f64>> {
        Ok(match self {
            Model::Aef(m) => Some(m.error().sigma()?),
            Model::Vae(m) => Some(m.error().sigma()?),
            Model::Ae(_) => None,
        })
    }
}
