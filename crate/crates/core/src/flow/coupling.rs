use candle_core::Tensor;

use super::{check_width, clamp_log_scale, ensure_finite, BlockSplit, Bijection};
use crate::config::Activation;
use crate::error::{Error, Result};
use crate::nets::{row_sum, Mlp};
use crate::params::ParamBuilder;

/// Produces `(raw log-scale, shift)` for the transformed block from the conditioning block.
pub trait Conditioner {
    fn scale_shift(&self, cond: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Conditioner backed by a closure.
pub struct FnConditioner<F>(pub F);

impl<F> Conditioner for FnConditioner<F>
where
    F: Fn(&Tensor) -> Result<(Tensor, Tensor)>,
{
    fn scale_shift(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        (self.0)(cond)
    }
}

/// An MLP emitting `2 * out_dim` values: shift first, then raw log-scale.
pub struct MlpConditioner {
    mlp: Mlp,
    out_dim: usize,
}

impl MlpConditioner {
    pub fn new(
        b: &mut ParamBuilder,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(b, in_dim, hidden, 2 * out_dim, activation)?,
            out_dim,
        })
    }
}

impl Conditioner for MlpConditioner {
    fn scale_shift(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.mlp.forward(cond)?;
        let shift = out.narrow(1, 0, self.out_dim)?;
        let log_scale = out.narrow(1, self.out_dim, self.out_dim)?;
        Ok((log_scale, shift))
    }
}

/// Affine coupling: block one passes through, block two becomes `s(y1) ⊙ y2 + m(y1)`.
pub struct CouplingLayer<'a> {
    split: BlockSplit,
    conditioner: Box<dyn Conditioner + 'a>,
}

impl<'a> CouplingLayer<'a> {
    /// `split.first()` is the conditioning (pass-through) block.
    pub fn new(split: BlockSplit, conditioner: Box<dyn Conditioner + 'a>) -> Self {
        Self { split, conditioner }
    }

    fn params(&self, cond: &Tensor, width: usize, check: bool) -> Result<(Tensor, Tensor)> {
        let (raw, shift) = self.conditioner.scale_shift(cond)?;
        if check {
            ensure_finite(&raw, "coupling inverse: non-invertible scale")?;
        }
        let b = cond.dim(0)?;
        if raw.dims() != [b, width] || shift.dims() != [b, width] {
            return Err(Error::Dimension(format!(
                "conditioner returned {:?}/{:?}, expected ({b}, {width})",
                raw.dims(),
                shift.dims()
            )));
        }
        Ok((clamp_log_scale(&raw)?, shift))
    }
}

impl Bijection for CouplingLayer<'_> {
    fn dim(&self) -> usize {
        self.split.n()
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(y, self.dim(), "coupling")?;
        let (y1, y2) = self.split.split(y)?;
        let (log_scale, shift) = self.params(&y1, y2.dim(1)?, false)?;
        let out = (y2 * log_scale.exp()? + shift)?;
        Ok((self.split.merge(&y1, &out)?, row_sum(&log_scale)?))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(y, self.dim(), "coupling")?;
        let (y1, y2) = self.split.split(y)?;
        let (log_scale, shift) = self.params(&y1, y2.dim(1)?, true)?;
        let out = ((y2 - shift)? * log_scale.neg()?.exp()?)?;
        Ok((self.split.merge(&y1, &out)?, row_sum(&log_scale)?.neg()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::row;
    use crate::params::{DEVICE, DTYPE};

    fn constant_coupling(log_s: [f64; 2], m: [f64; 2]) -> CouplingLayer<'static> {
        let split = BlockSplit::new(4, &[0, 1]).unwrap();
        let cond = FnConditioner(move |c: &Tensor| {
            let b = c.dim(0)?;
            let ls = Tensor::new(&log_s, &DEVICE)?.unsqueeze(0)?.repeat((b, 1))?;
            let sh = Tensor::new(&m, &DEVICE)?.unsqueeze(0)?.repeat((b, 1))?;
            Ok((ls, sh))
        });
        CouplingLayer::new(split, Box::new(cond))
    }

    #[test]
    fn identity_coupling_is_identity() {
        let c = constant_coupling([0.0, 0.0], [0.0, 0.0]);
        let y = Tensor::new(&[[0.3f64, -1.0, 2.0, 5.0]], &DEVICE).unwrap();
        let (out, ld) = c.forward(&y).unwrap();
        assert_eq!(row(&out, 0).unwrap(), row(&y, 0).unwrap());
        assert_eq!(ld.to_vec1::<f64>().unwrap(), vec![0.0]);
        let (back, ld) = c.inverse(&y).unwrap();
        assert_eq!(row(&back, 0).unwrap(), row(&y, 0).unwrap());
        assert_eq!(ld.to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn hand_evaluated_coupling() {
        // s = (2, 4), m = (1, -1), y2 = (0, 0)
        let c = constant_coupling([2f64.ln(), 4f64.ln()], [1.0, -1.0]);
        let y = Tensor::new(&[[0.7f64, -0.2, 0.0, 0.0]], &DEVICE).unwrap();
        let (out, ld) = c.forward(&y).unwrap();
        let out = row(&out, 0).unwrap();
        assert_eq!(&out[..2], &[0.7, -0.2]);
        assert!((out[2] - 1.0).abs() < 1e-15 && (out[3] + 1.0).abs() < 1e-15);
        assert!((ld.to_vec1::<f64>().unwrap()[0] - 8f64.ln()).abs() < 1e-12);

        let z = Tensor::new(&[[0.7f64, -0.2, 1.0, -1.0]], &DEVICE).unwrap();
        let (back, ld_inv) = c.inverse(&z).unwrap();
        let back = row(&back, 0).unwrap();
        assert!(back[2].abs() < 1e-15 && back[3].abs() < 1e-15);
        assert!((ld_inv.to_vec1::<f64>().unwrap()[0] + 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scale_is_clamped_positive() {
        let c = constant_coupling([-1e4, 0.0], [0.0, 0.0]);
        let y = Tensor::ones((1, 4), DTYPE, &DEVICE).unwrap();
        let (out, ld) = c.forward(&y).unwrap();
        let out = row(&out, 0).unwrap();
        assert!((out[2] - 1e-6).abs() < 1e-18);
        assert!((ld.to_vec1::<f64>().unwrap()[0] - 1e-6f64.ln()).abs() < 1e-9);
        let (back, _) = c.inverse(&Tensor::new(&[[1.0f64, 1.0, 1e-6, 1.0]], &DEVICE).unwrap()).unwrap();
        assert!((row(&back, 0).unwrap()[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nan_scale_is_rejected_on_inverse() {
        let c = constant_coupling([f64::NAN, 0.0], [0.0, 0.0]);
        let y = Tensor::ones((1, 4), DTYPE, &DEVICE).unwrap();
        assert!(c.inverse(&y).is_err());
    }
}
