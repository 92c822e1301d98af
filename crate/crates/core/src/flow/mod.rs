//! Invertible building blocks with exact log-det-Jacobian accounting.
//!
//! Every [`Bijection`] works on row batches of shape `(B, dim)` and reports
//! the log-determinant per row as a tensor of shape `(B,)`.

mod actnorm;
mod coupling;
mod logit;
mod made;
mod prior;

pub use actnorm::{ActNorm, ACTNORM_VAR_FLOOR};
pub use coupling::{Conditioner, CouplingLayer, FnConditioner, MlpConditioner};
pub use logit::LogitPreprocess;
pub use made::{build_made_masks, AutoregressiveFlow, MadeLayer, MadeMasks};
pub use prior::Prior;

use candle_core::{IndexOp, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{DEVICE, DTYPE};

/// Lower bound on every positive scale produced by a network.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `ln(max(exp(raw), SCALE_FLOOR))`, i.e. the log of the clamped exponential.
pub fn clamp_log_scale(raw: &Tensor) -> Result<Tensor> {
    Ok(raw.maximum(SCALE_FLOOR.ln())?)
}

pub trait Bijection {
    fn dim(&self) -> usize;

    /// Returns `(y', log|det dy'/dy|)`.
    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Returns `(y, log|det dy/dy'|)`.
    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Forward pass that also performs any data-dependent initialization.
    fn initialize(&mut self, y: &Tensor) -> Result<Tensor> {
        Ok(self.forward(y)?.0)
    }
}

impl<B: Bijection + ?Sized> Bijection for &B {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        (**self).forward(y)
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        (**self).inverse(y)
    }
}

pub(crate) fn check_width(y: &Tensor, dim: usize, what: &str) -> Result<usize> {
    let (b, d) = y
        .dims2()
        .map_err(|_| Error::Dimension(format!("{what}: expected a (batch, {dim}) tensor, got {:?}", y.dims())))?;
    if d != dim {
        return Err(Error::Dimension(format!(
            "{what}: expected width {dim}, got {d}"
        )));
    }
    Ok(b)
}

pub(crate) fn zeros_logdet(batch: usize) -> Result<Tensor> {
    Ok(Tensor::zeros(batch, DTYPE, &DEVICE)?)
}

/// Errors if any entry of `t` is NaN or infinite.
pub fn ensure_finite(t: &Tensor, context: &str) -> Result<()> {
    let v: Vec<f64> = t.flatten_all()?.to_vec1()?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{context} (flat index {i}, value {})", v[i]),
        });
    }
    Ok(())
}

/// `log N(z; 0, I)` per row.
pub fn std_normal_log_prob(z: &Tensor) -> Result<Tensor> {
    let d = z.dim(D::Minus1)? as f64;
    let c = -0.5 * d * (2.0 * std::f64::consts::PI).ln();
    Ok(z.sqr()?.sum(D::Minus1)?.affine(-0.5, c)?)
}

/// Negative log-likelihood of `x` under the change of variables through `map`,
/// whose forward direction sends data to the base space.
pub fn change_of_variables_nll(
    map: &dyn Bijection,
    base_log_prob: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
) -> Result<Tensor> {
    let (u, logdet) = map.forward(x)?;
    Ok((base_log_prob(&u)? + logdet)?.neg()?)
}

#[derive(Clone, Debug)]
pub struct Identity {
    dim: usize,
}

impl Identity {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Bijection for Identity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_width(y, self.dim, "identity")?;
        Ok((y.clone(), zeros_logdet(b)?))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward(y)
    }
}

/// Swaps the two directions of a bijection (IAF from MAF and vice versa).
pub struct Inverted<B>(pub B);

impl<B: Bijection> Bijection for Inverted<B> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.0.inverse(y)
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.0.forward(y)
    }
}

/// Sequential composition; forward applies layers in order, inverse in reverse order.
pub struct Composite<'a> {
    dim: usize,
    layers: Vec<Box<dyn Bijection + 'a>>,
}

impl<'a> Composite<'a> {
    pub fn new(dim: usize, layers: Vec<Box<dyn Bijection + 'a>>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(Error::Dimension(format!(
                    "layer {i} has dimension {} but the composition has {dim}",
                    l.dim()
                )));
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Bijection for Composite<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_width(y, self.dim, "composite")?;
        let mut h = y.clone();
        let mut logdet = zeros_logdet(b)?;
        for l in &self.layers {
            let (next, ld) = l.forward(&h)?;
            h = next;
            logdet = (logdet + ld)?;
        }
        Ok((h, logdet))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_width(y, self.dim, "composite")?;
        let mut h = y.clone();
        let mut logdet = zeros_logdet(b)?;
        for l in self.layers.iter().rev() {
            let (next, ld) = l.inverse(&h)?;
            h = next;
            logdet = (logdet + ld)?;
        }
        Ok((h, logdet))
    }

    fn initialize(&mut self, y: &Tensor) -> Result<Tensor> {
        let mut h = y.clone();
        for l in self.layers.iter_mut() {
            h = l.initialize(&h)?;
        }
        Ok(h)
    }
}

/// Splits coordinates `0..n` into two disjoint index blocks and merges them back exactly.
#[derive(Clone, Debug)]
pub struct BlockSplit {
    n: usize,
    first: Vec<usize>,
    second: Vec<usize>,
    first_idx: Tensor,
    second_idx: Tensor,
    first_embed: Tensor,
    second_embed: Tensor,
}

impl BlockSplit {
    /// `first` lists the indices of block one; block two is the complement, in ascending order.
    pub fn new(n: usize, first: &[usize]) -> Result<Self> {
        let mut in_first = vec![false; n];
        for &i in first {
            if i >= n {
                return Err(Error::Dimension(format!("index {i} out of range for {n}")));
            }
            if in_first[i] {
                return Err(Error::InvalidArgument(format!("duplicate index {i}")));
            }
            in_first[i] = true;
        }
        let second: Vec<usize> = (0..n).filter(|i| !in_first[*i]).collect();
        let first = first.to_vec();
        Ok(Self {
            n,
            first_idx: index_tensor(&first)?,
            second_idx: index_tensor(&second)?,
            first_embed: embedding(n, &first)?,
            second_embed: embedding(n, &second)?,
            first,
            second,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn first(&self) -> &[usize] {
        &self.first
    }

    pub fn second(&self) -> &[usize] {
        &self.second
    }

    pub fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(x, self.n, "block split")?;
        Ok((self.select_first(x)?, self.select_second(x)?))
    }

    pub fn select_first(&self, x: &Tensor) -> Result<Tensor> {
        select(x, &self.first_idx, self.first.len())
    }

    pub fn select_second(&self, x: &Tensor) -> Result<Tensor> {
        select(x, &self.second_idx, self.second.len())
    }

    /// Places `a` at the block-one indices and `b` at the block-two indices.
    pub fn merge(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut out = None;
        if !self.first.is_empty() {
            out = Some(a.matmul(&self.first_embed)?);
        }
        if !self.second.is_empty() {
            let part = b.matmul(&self.second_embed)?;
            out = Some(match out {
                Some(o) => (o + part)?,
                None => part,
            });
        }
        out.ok_or_else(|| Error::Dimension("empty block split".into()))
    }

    /// Embeds block two into `R^n` with zeros at the block-one indices.
    pub fn embed_second(&self, b: &Tensor) -> Result<Tensor> {
        Ok(b.matmul(&self.second_embed)?)
    }
}

fn select(x: &Tensor, idx: &Tensor, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Ok(Tensor::zeros((x.dim(0)?, 0), DTYPE, &DEVICE)?);
    }
    Ok(x.index_select(idx, 1)?)
}

fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &DEVICE)?)
}

/// `(k, n)` 0/1 matrix whose row `r` has a one at column `idx[r]`.
fn embedding(n: usize, idx: &[usize]) -> Result<Tensor> {
    let mut m = vec![0.0f64; idx.len() * n];
    for (r, &c) in idx.iter().enumerate() {
        m[r * n + c] = 1.0;
    }
    Ok(Tensor::from_vec(m, (idx.len(), n), &DEVICE)?)
}

/// Applies `inner` to the block-one coordinates and leaves the rest unchanged.
pub struct Blockwise<'a> {
    split: BlockSplit,
    inner: Box<dyn Bijection + 'a>,
}

impl<'a> Blockwise<'a> {
    pub fn new(split: BlockSplit, inner: Box<dyn Bijection + 'a>) -> Result<Self> {
        if inner.dim() != split.first().len() {
            return Err(Error::Dimension(format!(
                "inner bijection has dimension {} but the block has {}",
                inner.dim(),
                split.first().len()
            )));
        }
        Ok(Self { split, inner })
    }
}

impl Bijection for Blockwise<'_> {
    fn dim(&self) -> usize {
        self.split.n()
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, b) = self.split.split(y)?;
        let (a2, ld) = self.inner.forward(&a)?;
        Ok((self.split.merge(&a2, &b)?, ld))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, b) = self.split.split(y)?;
        let (a2, ld) = self.inner.inverse(&a)?;
        Ok((self.split.merge(&a2, &b)?, ld))
    }

    fn initialize(&mut self, y: &Tensor) -> Result<Tensor> {
        let (a, b) = self.split.split(y)?;
        let a2 = self.inner.initialize(&a)?;
        self.split.merge(&a2, &b)
    }
}

/// Reads row `i` of a `(B, n)` tensor as a vector.
pub fn row(t: &Tensor, i: usize) -> Result<Vec<f64>> {
    Ok(t.i(i)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_split_merge_is_exact() {
        let split = BlockSplit::new(5, &[3, 1]).unwrap();
        assert_eq!(split.second(), &[0, 2, 4]);
        let x = Tensor::new(&[[1e10f64, -3.5, 7.25, 1e-12, 2.0]], &DEVICE).unwrap();
        let (a, b) = split.split(&x).unwrap();
        assert_eq!(row(&a, 0).unwrap(), vec![1e-12, -3.5]);
        let y = split.merge(&a, &b).unwrap();
        assert_eq!(row(&y, 0).unwrap(), row(&x, 0).unwrap());
    }

    #[test]
    fn empty_composition_is_identity() {
        let c = Composite::new(3, vec![]).unwrap();
        let y = Tensor::new(&[[1.0f64, 2.0, 3.0]], &DEVICE).unwrap();
        let (out, ld) = c.forward(&y).unwrap();
        assert_eq!(row(&out, 0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(ld.to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn composition_rejects_dimension_mismatch() {
        let layers: Vec<Box<dyn Bijection>> =
            vec![Box::new(Identity::new(3)), Box::new(Identity::new(2))];
        assert!(Composite::new(3, layers).is_err());
    }

    #[test]
    fn std_normal_log_prob_at_origin() {
        let z = Tensor::zeros((1, 2), DTYPE, &DEVICE).unwrap();
        let lp = std_normal_log_prob(&z).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }
}
