use candle_core::Tensor;
use rand::Rng;

use super::{std_normal_log_prob, AutoregressiveFlow, Bijection};
use crate::config::FlowConfig;
use crate::error::Result;
use crate::params::{normal_tensor, ParamBuilder};

/// Latent prior: a standard normal, optionally pushed through an autoregressive flow.
///
/// Density evaluation uses the flow's parallel direction (`z -> u`); sampling
/// runs the sequential inverse.
#[derive(Clone, Debug)]
pub struct Prior {
    dim: usize,
    flow: Option<AutoregressiveFlow>,
}

impl Prior {
    pub fn new(b: &mut ParamBuilder, dim: usize, flow: Option<&FlowConfig>) -> Result<Self> {
        let flow = match flow {
            Some(cfg) => Some(AutoregressiveFlow::new(b, dim, cfg)?),
            None => None,
        };
        Ok(Self { dim, flow })
    }

    pub fn standard(dim: usize) -> Self {
        Self { dim, flow: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn flow(&self) -> Option<&AutoregressiveFlow> {
        self.flow.as_ref()
    }

    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        match &self.flow {
            None => std_normal_log_prob(z),
            Some(f) => {
                let (u, logdet) = f.forward(z)?;
                Ok((std_normal_log_prob(&u)? + logdet)?)
            }
        }
    }

    /// Draws `count` latents with base noise scaled by `temperature`.
    pub fn sample(&self, temperature: f64, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let u = normal_tensor(&[count, self.dim], temperature, rng)?;
        match &self.flow {
            None => Ok(u),
            Some(f) => Ok(f.inverse(&u)?.0),
        }
    }

    pub fn initialize(&mut self, z: &Tensor) -> Result<()> {
        if let Some(f) = self.flow.as_mut() {
            f.initialize(&z.detach())?;
        }
        Ok(())
    }
}
