use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::flow::{ActNorm, Bijection, LogitPreprocess};
use crate::nets::row_sum;
use crate::params::ParamBuilder;

/// Lower bound on the residual scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// `softplus(x) = max(x, 0) + ln(1 + exp(-|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Isotropic Gaussian `N(0, σ² I)` on residuals, `σ = max(softplus(s), SIGMA_FLOOR)`.
#[derive(Clone, Debug)]
pub struct ErrorDistribution {
    raw: Var,
}

impl ErrorDistribution {
    pub fn new(b: &mut ParamBuilder, sigma_init: f64, trainable: bool) -> Result<Self> {
        if !(sigma_init > SIGMA_FLOOR) {
            return Err(Error::InvalidArgument(format!(
                "initial sigma must exceed {SIGMA_FLOOR}, got {sigma_init}"
            )));
        }
        // inverse softplus, stable for large sigma
        let raw = sigma_init + (-(-sigma_init).exp_m1()).ln();
        Ok(Self {
            raw: b.constant_var("sigma_raw", &[1], raw, trainable)?,
        })
    }

    /// `σ` as a `(1,)` tensor that carries gradients.
    pub fn sigma_tensor(&self) -> Result<Tensor> {
        Ok(softplus(self.raw.as_tensor())?.maximum(SIGMA_FLOOR)?)
    }

    pub fn sigma(&self) -> Result<f64> {
        Ok(self.sigma_tensor()?.to_vec1::<f64>()?[0])
    }

    /// `log N(δ; 0, σ² I)` per row.
    pub fn log_prob(&self, delta: &Tensor) -> Result<Tensor> {
        let k = delta.dim(1)? as f64;
        let sigma = self.sigma_tensor()?;
        let var = sigma.sqr()?;
        let quad = row_sum(&delta.sqr()?)?.broadcast_div(&var.affine(2.0, 0.0)?)?;
        let norm = var.affine(2.0 * std::f64::consts::PI, 0.0)?.log()?.affine(0.5 * k, 0.0)?;
        Ok(quad.broadcast_add(&norm)?.neg()?)
    }
}

/// Learned affine features `w = h(x) = x W + b`, `W` stored as `(N, D)`.
#[derive(Clone, Debug)]
pub struct FeatureExpansion {
    weight: Tensor,
    bias: Tensor,
}

impl FeatureExpansion {
    pub fn new(b: &mut ParamBuilder, n: usize, d: usize, init_std: f64) -> Result<Self> {
        Ok(Self {
            weight: b.normal("weight", &[n, d], init_std)?,
            bias: b.constant("bias", &[d], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Logit transform followed by a data-initialized ActNorm, applied to inputs in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Preprocess {
    logit: LogitPreprocess,
    norm: ActNorm,
}

impl Preprocess {
    pub fn new(b: &mut ParamBuilder, n: usize, lambda: f64) -> Result<Self> {
        Ok(Self {
            logit: LogitPreprocess::new(n, lambda)?,
            norm: ActNorm::new(&mut b.pp("actnorm"), n)?,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.logit.lambda()
    }
}

impl Bijection for Preprocess {
    fn dim(&self) -> usize {
        self.logit.dim()
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (y, ld) = self.logit.forward(x)?;
        let (y, ld2) = self.norm.forward(&y)?;
        Ok((y, (ld + ld2)?))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (x, ld) = self.norm.inverse(y)?;
        let (x, ld2) = self.logit.inverse(&x)?;
        Ok((x, (ld + ld2)?))
    }

    fn initialize(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.logit.forward(x)?.0;
        self.norm.initialize(&y)
    }
}
