use candle_core::{Tensor, Var};

use super::{check_width, Bijection};
use crate::error::{Error, Result};
use crate::params::ParamBuilder;

/// Floor applied to per-dimension variances during data-dependent init.
pub const ACTNORM_VAR_FLOOR: f64 = 1e-6;

/// Per-dimension affine layer `y' = exp(log_scale) ⊙ y + shift`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    dim: usize,
    log_scale: Var,
    shift: Var,
    initialized: Var,
}

impl ActNorm {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            log_scale: b.constant_var("log_scale", &[dim], 0.0, true)?,
            shift: b.constant_var("shift", &[dim], 0.0, true)?,
            initialized: b.buffer("initialized", &[1], 0.0)?,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
            .as_tensor()
            .to_vec1::<f64>()
            .map(|v| v[0] != 0.0)
            .unwrap_or(false)
    }

    pub fn scale(&self) -> Result<Vec<f64>> {
        Ok(self.log_scale.as_tensor().exp()?.to_vec1()?)
    }

    pub fn shift(&self) -> Result<Vec<f64>> {
        Ok(self.shift.as_tensor().to_vec1()?)
    }

    /// Sets scale and shift so that `batch` maps to zero mean and unit variance per dimension.
    ///
    /// Variances below [`ACTNORM_VAR_FLOOR`] are floored, so constant dimensions get
    /// scale `1/sqrt(floor)` instead of failing.
    pub fn actnorm_init(&mut self, batch: &Tensor) -> Result<()> {
        if self.is_initialized() {
            return Err(Error::InvalidArgument("actnorm already initialized".into()));
        }
        let b = check_width(batch, self.dim, "actnorm init")?;
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "actnorm init needs at least 2 rows, got {b}"
            )));
        }
        let batch = batch.detach();
        let mean = batch.mean(0)?;
        let var = batch.broadcast_sub(&mean)?.sqr()?.mean(0)?;
        let var = var.maximum(ACTNORM_VAR_FLOOR)?;
        let log_scale = var.log()?.affine(-0.5, 0.0)?;
        let shift = (mean * log_scale.exp()?)?.neg()?;
        self.log_scale.set(&log_scale)?;
        self.shift.set(&shift)?;
        self.initialized.set(&Tensor::ones(1, candle_core::DType::F64, batch.device())?)?;
        Ok(())
    }

    fn logdet(&self, batch: usize) -> Result<Tensor> {
        Ok(self.log_scale.as_tensor().sum_keepdim(0)?.broadcast_as(batch)?)
    }
}

impl Bijection for ActNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_width(y, self.dim, "actnorm")?;
        let out = y
            .broadcast_mul(&self.log_scale.as_tensor().exp()?)?
            .broadcast_add(self.shift.as_tensor())?;
        Ok((out, self.logdet(b)?))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_width(y, self.dim, "actnorm")?;
        let out = y
            .broadcast_sub(self.shift.as_tensor())?
            .broadcast_mul(&self.log_scale.as_tensor().neg()?.exp()?)?;
        Ok((out, self.logdet(b)?.neg()?))
    }

    fn initialize(&mut self, y: &Tensor) -> Result<Tensor> {
        if !self.is_initialized() {
            self.actnorm_init(y)?;
        }
        Ok(self.forward(y)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal_tensor, ParamStore, DEVICE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(dim: usize) -> (ParamStore, ActNorm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ActNorm::new(&mut store.builder(&mut rng), dim).unwrap();
        (store, a)
    }

    fn stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let m = t.mean(0).unwrap();
        let v = t.broadcast_sub(&m).unwrap().sqr().unwrap().mean(0).unwrap();
        (m.to_vec1().unwrap(), v.to_vec1().unwrap())
    }

    #[test]
    fn standardized_batch_gives_identity() {
        let (_s, mut a) = layer(2);
        // columns have mean 0 and population variance 1
        let y = Tensor::new(&[[1.0f64, -1.0], [-1.0, 1.0]], &DEVICE).unwrap();
        a.actnorm_init(&y).unwrap();
        for s in a.scale().unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        for m in a.shift().unwrap() {
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_dimension_uses_floor() {
        let (_s, mut a) = layer(2);
        let y = Tensor::new(&[[3.0f64, 0.0], [3.0, 2.0], [3.0, 4.0]], &DEVICE).unwrap();
        a.actnorm_init(&y).unwrap();
        let s = a.scale().unwrap();
        assert!((s[0] - 1.0 / ACTNORM_VAR_FLOOR.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn random_batch_is_standardized() {
        let (_s, mut a) = layer(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = (normal_tensor(&[64, 3], 2.5, &mut rng).unwrap() + 7.0).unwrap();
        a.actnorm_init(&y).unwrap();
        assert!(a.is_initialized());
        let (out, _) = a.forward(&y).unwrap();
        let (m, v) = stats(&out);
        for i in 0..3 {
            assert!(m[i].abs() < 1e-4, "mean {}", m[i]);
            assert!((v[i] - 1.0).abs() < 1e-4, "var {}", v[i]);
        }
        assert!(a.actnorm_init(&y).is_err());
    }

    #[test]
    fn init_needs_two_rows() {
        let (_s, mut a) = layer(2);
        let y = Tensor::new(&[[1.0f64, 2.0]], &DEVICE).unwrap();
        assert!(a.actnorm_init(&y).is_err());
    }
}
