//! Masked autoregressive layers (MADE conditioners with residual blocks) and their stacks.
//!
//! A [`MadeLayer`] computes `y' = y ⊙ s(y) + m(y)` where output `i` of `s` and
//! `m` only sees inputs that precede `i` in the layer's ordering. The forward
//! direction is therefore parallel and the inverse is solved one dimension per
//! pass. Used as a density (MAF) the forward direction maps data to noise; the
//! same layer read the other way round is an IAF.

use candle_core::Tensor;

use super::{check_width, clamp_log_scale, ensure_finite, ActNorm, Bijection};
use crate::config::{Activation, FlowConfig};
use crate::error::{Error, Result};
use crate::nets::{row_sum, Linear};
use crate::params::{ParamBuilder, DEVICE};

/// Connectivity masks in `(in, out)` layout, one per linear layer.
#[derive(Clone, Debug)]
pub struct MadeMasks {
    pub masks: Vec<Tensor>,
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
}

fn mask(in_deg: &[usize], out_deg: &[usize], strict: bool) -> Result<Tensor> {
    let mut m = Vec::with_capacity(in_deg.len() * out_deg.len());
    for &di in in_deg {
        for &dout in out_deg {
            let on = if strict { dout > di } else { dout >= di };
            m.push(if on { 1.0 } else { 0.0 });
        }
    }
    Ok(Tensor::from_vec(m, (in_deg.len(), out_deg.len()), &DEVICE)?)
}

/// Builds masks for `input -> hidden_sizes... -> output` so that output `i` depends only
/// on inputs strictly earlier than `i` in `ordering` (a permutation of `0..d`).
pub fn build_made_masks(d: usize, hidden_sizes: &[usize], ordering: &[usize]) -> Result<MadeMasks> {
    if d == 0 {
        return Err(Error::InvalidArgument("MADE needs d >= 1".into()));
    }
    if ordering.len() != d {
        return Err(Error::InvalidArgument(format!(
            "ordering has {} entries, expected {d}",
            ordering.len()
        )));
    }
    let mut input_degrees = vec![0usize; d];
    for (pos, &v) in ordering.iter().enumerate() {
        if v >= d || input_degrees[v] != 0 {
            return Err(Error::InvalidArgument(format!(
                "ordering {ordering:?} is not a permutation of 0..{d}"
            )));
        }
        input_degrees[v] = pos + 1;
    }
    let span = d.saturating_sub(1).max(1);
    let hidden_degrees: Vec<Vec<usize>> = hidden_sizes
        .iter()
        .map(|&h| (0..h).map(|k| k % span + 1).collect())
        .collect();
    let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
    let mut prev = &input_degrees;
    for hd in &hidden_degrees {
        masks.push(mask(prev, hd, false)?);
        prev = hd;
    }
    masks.push(mask(prev, &input_degrees, true)?);
    Ok(MadeMasks {
        masks,
        input_degrees,
        hidden_degrees,
    })
}

/// One masked autoregressive affine layer.
#[derive(Clone, Debug)]
pub struct MadeLayer {
    dim: usize,
    activation: Activation,
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
    input_mask: Tensor,
    hidden_mask: Tensor,
    output_mask: Tensor,
    ordering: Vec<usize>,
}

impl MadeLayer {
    pub fn new(
        b: &mut ParamBuilder,
        dim: usize,
        hidden: usize,
        blocks: usize,
        activation: Activation,
        ordering: Vec<usize>,
    ) -> Result<Self> {
        let sizes = vec![hidden; 1 + 2 * blocks];
        let masks = build_made_masks(dim, &sizes, &ordering)?;
        let input_mask = masks.masks[0].clone();
        let hidden_mask = if blocks > 0 {
            masks.masks[1].clone()
        } else {
            mask(&masks.hidden_degrees[0], &masks.hidden_degrees[0], false)?
        };
        let last = masks.masks.last().expect("at least one mask");
        let output_mask = Tensor::cat(&[last, last], 1)?;

        let input = Linear::new(&mut b.pp("input"), dim, hidden)?;
        let mut block_layers = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let mut bb = b.pp(&format!("block{i}"));
            let first = Linear::new(&mut bb.pp("first"), hidden, hidden)?;
            let second = Linear::with_bound(&mut bb.pp("second"), hidden, hidden, 1e-3)?;
            block_layers.push((first, second));
        }
        // near-identity start: small output weights give scale ~1 and shift ~0
        let output = Linear::with_bound(&mut b.pp("output"), hidden, 2 * dim, 1e-3)?;
        Ok(Self {
            dim,
            activation,
            input,
            blocks: block_layers,
            output,
            input_mask,
            hidden_mask,
            output_mask,
            ordering,
        })
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Returns `(shift, clamped log-scale)`; `check` rejects non-finite raw scales.
    fn params(&self, y: &Tensor, check: bool) -> Result<(Tensor, Tensor)> {
        let act = self.activation;
        let mut h = self.input.forward_masked(y, &self.input_mask)?;
        for (first, second) in &self.blocks {
            let t = first.forward_masked(&act.apply(&h)?, &self.hidden_mask)?;
            let t = second.forward_masked(&act.apply(&t)?, &self.hidden_mask)?;
            h = (h + t)?;
        }
        let out = self.output.forward_masked(&act.apply(&h)?, &self.output_mask)?;
        let shift = out.narrow(1, 0, self.dim)?;
        let raw = out.narrow(1, self.dim, self.dim)?;
        if check {
            ensure_finite(&raw, "autoregressive inverse: non-invertible scale")?;
        }
        Ok((shift, clamp_log_scale(&raw)?))
    }

    /// Raw autoregressive outputs `(shift, log-scale)` for Jacobian-structure checks.
    pub fn conditioner_outputs(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.params(y, false)
    }
}

impl Bijection for MadeLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(y, self.dim, "made")?;
        let (shift, log_scale) = self.params(y, false)?;
        let out = (y * log_scale.exp()? + shift)?;
        Ok((out, row_sum(&log_scale)?))
    }

    /// Sequential inversion: after pass `k` the first `k` dimensions in the ordering are exact.
    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(y, self.dim, "made")?;
        let mut x = y.zeros_like()?;
        let mut log_scale = None;
        for _ in 0..self.dim {
            let (shift, ls) = self.params(&x, true)?;
            x = ((y - shift)? * ls.neg()?.exp()?)?;
            log_scale = Some(ls);
        }
        let ls = log_scale.expect("dim >= 1");
        Ok((x, row_sum(&ls)?.neg()?))
    }
}

/// `layers` masked autoregressive layers with an ActNorm between consecutive ones.
/// Orderings alternate between natural and reversed.
#[derive(Clone, Debug)]
pub struct AutoregressiveFlow {
    dim: usize,
    layers: Vec<MadeLayer>,
    norms: Vec<ActNorm>,
}

impl AutoregressiveFlow {
    pub fn new(b: &mut ParamBuilder, dim: usize, cfg: &FlowConfig) -> Result<Self> {
        let orderings = (0..cfg.layers)
            .map(|i| {
                let mut o: Vec<usize> = (0..dim).collect();
                if i % 2 == 1 {
                    o.reverse();
                }
                o
            })
            .collect();
        Self::with_orderings(b, dim, cfg, orderings)
    }

    pub fn with_orderings(
        b: &mut ParamBuilder,
        dim: usize,
        cfg: &FlowConfig,
        orderings: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if orderings.is_empty() {
            return Err(Error::InvalidArgument("flow needs at least one layer".into()));
        }
        let k = orderings.len();
        let mut layers = Vec::with_capacity(k);
        let mut norms = Vec::with_capacity(k.saturating_sub(1));
        for (i, ordering) in orderings.into_iter().enumerate() {
            layers.push(MadeLayer::new(
                &mut b.pp(&format!("made{i}")),
                dim,
                cfg.hidden,
                cfg.blocks,
                cfg.activation,
                ordering,
            )?);
            if i + 1 < k {
                norms.push(ActNorm::new(&mut b.pp(&format!("actnorm{i}")), dim)?);
            }
        }
        Ok(Self { dim, layers, norms })
    }

    pub fn layers(&self) -> &[MadeLayer] {
        &self.layers
    }
}

impl Bijection for AutoregressiveFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(y, self.dim, "autoregressive flow")?;
        let (mut h, mut logdet) = self.layers[0].forward(y)?;
        for (norm, layer) in self.norms.iter().zip(&self.layers[1..]) {
            let (n, ld) = norm.forward(&h)?;
            let (m, ld2) = layer.forward(&n)?;
            h = m;
            logdet = ((logdet + ld)? + ld2)?;
        }
        Ok((h, logdet))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(y, self.dim, "autoregressive flow")?;
        let k = self.layers.len();
        let (mut h, mut logdet) = self.layers[k - 1].inverse(y)?;
        for i in (0..k - 1).rev() {
            let (n, ld) = self.norms[i].inverse(&h)?;
            let (m, ld2) = self.layers[i].inverse(&n)?;
            h = m;
            logdet = ((logdet + ld)? + ld2)?;
        }
        Ok((h, logdet))
    }

    fn initialize(&mut self, y: &Tensor) -> Result<Tensor> {
        let mut h = self.layers[0].forward(y)?.0;
        for (norm, layer) in self.norms.iter_mut().zip(&self.layers[1..]) {
            let n = norm.initialize(&h)?;
            h = layer.forward(&n)?.0;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: &Tensor) -> Vec<Vec<f64>> {
        m.to_vec2().unwrap()
    }

    #[test]
    fn single_dimension_has_no_connections() {
        let masks = build_made_masks(1, &[8, 8], &[0]).unwrap();
        let out = dense(masks.masks.last().unwrap());
        assert!(out.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn direct_mask_is_strictly_triangular() {
        let masks = build_made_masks(3, &[], &[2, 0, 1]).unwrap();
        let m = dense(&masks.masks[0]);
        // degrees: var2 -> 1, var0 -> 2, var1 -> 3; output j sees input i iff deg(j) > deg(i)
        let deg = [2, 3, 1];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j] == 1.0, deg[j] > deg[i], "({i},{j})");
            }
        }
    }

    #[test]
    fn rejects_bad_ordering() {
        assert!(build_made_masks(3, &[4], &[0, 0, 1]).is_err());
        assert!(build_made_masks(3, &[4], &[0, 1]).is_err());
        assert!(build_made_masks(0, &[4], &[]).is_err());
    }

    #[test]
    fn mask_product_never_connects_forbidden_pairs() {
        let ordering = vec![3, 1, 0, 2];
        let masks = build_made_masks(4, &[7, 7, 7], &ordering).unwrap();
        let mut reach = masks.masks[0].clone();
        for m in &masks.masks[1..] {
            reach = reach.matmul(m).unwrap();
        }
        let reach = dense(&reach);
        let deg = &masks.input_degrees;
        for i in 0..4 {
            for j in 0..4 {
                if deg[j] <= deg[i] {
                    assert_eq!(reach[i][j], 0.0, "input {i} reaches output {j}");
                }
            }
        }
    }
}
