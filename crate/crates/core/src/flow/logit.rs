use candle_core::Tensor;

use super::{check_width, Bijection};
use crate::error::{Error, Result};
use crate::nets::row_sum;

/// `x = logit(λ + (1 − 2λ) z)`, mapping `(0,1)^N` onto `R^N`.
#[derive(Clone, Debug)]
pub struct LogitPreprocess {
    dim: usize,
    lambda: f64,
}

impl LogitPreprocess {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 0.5), got {lambda}"
            )));
        }
        Ok(Self { dim, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Per-row `sum_i log(1−2λ) − log u_i − log(1−u_i)`.
    fn logdet_at(&self, u: &Tensor) -> Result<Tensor> {
        let per_dim = (u.log()? + u.affine(-1.0, 1.0)?.log()?)?.affine(-1.0, (1.0 - 2.0 * self.lambda).ln())?;
        row_sum(&per_dim)
    }
}

impl Bijection for LogitPreprocess {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(z, self.dim, "logit preprocess")?;
        let vals: Vec<f64> = z.flatten_all()?.to_vec1()?;
        let lam = self.lambda;
        let bad = |v: f64| {
            let u = lam + (1.0 - 2.0 * lam) * v;
            !((0.0..=1.0).contains(&v) && u > 0.0 && u < 1.0)
        };
        if let Some(v) = vals.iter().find(|v| bad(**v)) {
            return Err(Error::Domain(format!(
                "logit argument must lie strictly inside (0, 1) (input {v}, lambda {lam}); dequantize first"
            )));
        }
        let u = z.affine(1.0 - 2.0 * self.lambda, self.lambda)?;
        let x = (u.log()? - u.affine(-1.0, 1.0)?.log()?)?;
        Ok((x, self.logdet_at(&u)?))
    }

    fn inverse(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(x, self.dim, "logit preprocess")?;
        // sigmoid(x) = 1 / (1 + exp(-x))
        let u = x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?;
        let z = u.affine(1.0 / (1.0 - 2.0 * self.lambda), -self.lambda / (1.0 - 2.0 * self.lambda))?;
        Ok((z, self.logdet_at(&u)?.neg()?))
    }
}
