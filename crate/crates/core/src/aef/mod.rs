//! Autoencoders within flows: an encoder/decoder pair wrapped in an exact bijection.
//!
//! Two variants share the same networks:
//!
//! * partitioned: `x` splits into core and shell coordinates; the shell drives
//!   the encoder heads, the core is mapped affinely to the latent `z`, and the
//!   shell residual `δ = shell − f(z)` completes the bijection;
//! * expanded: learned features `w = h(x)` take the role of the core and the
//!   residual `δ = x − f(z)` covers all of `x`.
//!
//! All `nll*` methods return per-row losses (shape `(B,)`) to be minimized.

mod components;
mod partition;

pub use components::{softplus, ErrorDistribution, FeatureExpansion, Preprocess, SIGMA_FLOOR};
pub use partition::{PartitionKind, PartitionScheme};

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::flow::{
    clamp_log_scale, ensure_finite, AutoregressiveFlow, Bijection, BlockSplit, Blockwise, Composite,
    CouplingLayer, FnConditioner, Prior,
};
use crate::nets::{row_sum, Decoder, Encoder};
use crate::params::{ParamStore, DEVICE, DTYPE};

/// Where the core variables come from.
#[derive(Clone, Debug)]
pub enum CoreSpace {
    Partitioned {
        scheme: PartitionScheme,
        split: BlockSplit,
    },
    Expanded(FeatureExpansion),
}

/// Output of the forward map `x -> (z, δ)`.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub z: Tensor,
    pub delta: Tensor,
    /// Per-row `log|det|` of the full map (equal to `Σ log g_s + logdet n⁻¹`).
    pub logdet: Tensor,
}

#[derive(Clone, Debug)]
pub struct AefModel {
    variant: Variant,
    shape: DataShape,
    latent_dim: usize,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    core_flow: Option<AutoregressiveFlow>,
    prior: Prior,
    error: ErrorDistribution,
    space: CoreSpace,
    preprocess: Option<Preprocess>,
}

impl AefModel {
    pub fn new(cfg: &ModelConfig, shape: DataShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let kind = match cfg.variant {
            Variant::AefCenter => Some(PartitionKind::Center),
            Variant::AefCorner => Some(PartitionKind::Corner),
            Variant::AefRandom => Some(PartitionKind::Random),
            Variant::AefLinear => None,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{} is not an AEF variant",
                    other.as_str()
                )))
            }
        };
        let n = shape.numel();
        let d = cfg.latent_dim;
        let mut params = ParamStore::new();
        let mut b = params.builder(rng);
        let space = match kind {
            Some(kind) => {
                let scheme = PartitionScheme::new(kind, shape, d, cfg.partition_seed)?;
                let split = scheme.split()?;
                CoreSpace::Partitioned { scheme, split }
            }
            None => CoreSpace::Expanded(FeatureExpansion::new(
                &mut b.pp("expansion"),
                n,
                d,
                cfg.expansion_init_std,
            )?),
        };
        let encoder = Encoder::new(&mut b.pp("encoder"), &cfg.architecture, shape, d)?;
        let decoder = Decoder::new(&mut b.pp("decoder"), &cfg.architecture, shape, d)?;
        let core_flow = if cfg.latent_flow {
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
            variant: cfg.variant,
            shape,
            latent_dim: d,
            params,
            encoder,
            decoder,
            core_flow,
            prior,
            error,
            space,
            preprocess,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
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

    pub fn space(&self) -> &CoreSpace {
        &self.space
    }

    pub fn is_partitioned(&self) -> bool {
        matches!(self.space, CoreSpace::Partitioned { .. })
    }

    pub fn preprocessing(&self) -> Option<&Preprocess> {
        self.preprocess.as_ref()
    }

    fn split(&self) -> Result<&BlockSplit> {
        match &self.space {
            CoreSpace::Partitioned { split, .. } => Ok(split),
            CoreSpace::Expanded(_) => Err(Error::InvalidArgument(
                "operation needs a partitioned AEF".into(),
            )),
        }
    }

    fn expansion(&self) -> Result<&FeatureExpansion> {
        match &self.space {
            CoreSpace::Expanded(h) => Ok(h),
            CoreSpace::Partitioned { .. } => Err(Error::InvalidArgument(
                "operation needs an expanded AEF".into(),
            )),
        }
    }

    /// `(g_m, log g_s)` from the encoder input.
    fn heads(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mean, raw) = self.encoder.forward(input)?;
        Ok((mean, clamp_log_scale(&raw)?))
    }

    /// Encoder input for a shell block: the full vector with zeros at the core positions.
    fn shell_input(&self, shell: &Tensor) -> Result<Tensor> {
        self.split()?.embed_second(shell)
    }

    fn core_inverse(&self, c: &Tensor) -> Result<(Tensor, Tensor)> {
        match &self.core_flow {
            Some(f) => f.forward(c),
            None => Ok((c.clone(), Tensor::zeros(c.dim(0)?, DTYPE, &DEVICE)?)),
        }
    }

    fn core_forward(&self, u: &Tensor) -> Result<Tensor> {
        match &self.core_flow {
            Some(f) => Ok(f.inverse(u)?.0),
            None => Ok(u.clone()),
        }
    }

    /// Decoder mean in the coordinates the residual lives in (shell or all of `x`).
    fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        let full = self.decoder.forward(z)?;
        match &self.space {
            CoreSpace::Partitioned { split, .. } => split.select_second(&full),
            CoreSpace::Expanded(_) => Ok(full),
        }
    }

    /// `z = g_m + g_s ⊙ n⁻¹(core)`; `core` is the block or feature vector in one-to-one relation with `z`.
    fn affine_latent(&self, heads_input: &Tensor, core: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mean, log_scale) = self.heads(heads_input)?;
        let (u, logdet_n) = self.core_inverse(core)?;
        let z = (mean + (u * log_scale.exp()?)?)?;
        ensure_finite(&z, "AEF encoder output")?;
        Ok((z, (logdet_n + row_sum(&log_scale)?)?))
    }

    pub fn encode_partitioned(&self, x: &Tensor) -> Result<Encoding> {
        let (core, shell) = self.split()?.split(x)?;
        let (z, logdet) = self.affine_latent(&self.shell_input(&shell)?, &core)?;
        let delta = (shell - self.decode_mean(&z)?)?;
        Ok(Encoding { z, delta, logdet })
    }

    pub fn decode_partitioned(&self, z: &Tensor, delta: &Tensor) -> Result<Tensor> {
        let split = self.split()?;
        let shell = (self.decode_mean(z)? + delta)?;
        let (mean, log_scale) = self.heads(&self.shell_input(&shell)?)?;
        let u = ((z - mean)? * log_scale.neg()?.exp()?)?;
        let core = self.core_forward(&u)?;
        split.merge(&core, &shell)
    }

    /// Forward map of the expanded space `(x, w) -> (z, δ)` at an arbitrary `w`.
    pub fn encode_joint(&self, x: &Tensor, w: &Tensor) -> Result<Encoding> {
        self.expansion()?;
        let (z, logdet) = self.affine_latent(x, w)?;
        let delta = (x - self.decode_mean(&z)?)?;
        Ok(Encoding { z, delta, logdet })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.expansion()?.forward(x)
    }

    pub fn encode_expanded(&self, x: &Tensor) -> Result<Encoding> {
        self.encode_joint(x, &self.features(x)?)
    }

    /// Inverse of [`encode_joint`](Self::encode_joint): returns `(x, w)`.
    pub fn decode_expanded(&self, z: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
        self.expansion()?;
        let x = (self.decode_mean(z)? + delta)?;
        let (mean, log_scale) = self.heads(&x)?;
        let u = ((z - mean)? * log_scale.neg()?.exp()?)?;
        Ok((x, self.core_forward(&u)?))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoding> {
        match self.space {
            CoreSpace::Partitioned { .. } => self.encode_partitioned(x),
            CoreSpace::Expanded(_) => self.encode_expanded(x),
        }
    }

    fn log_density(&self, enc: &Encoding) -> Result<Tensor> {
        let lr = self.error.log_prob(&enc.delta)?;
        let lp = self.prior.log_prob(&enc.z)?;
        Ok(((lr + lp)? + &enc.logdet)?)
    }

    /// `log p(x, w)` of the expanded-space model.
    pub fn density_joint(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.log_density(&self.encode_joint(x, w)?)
    }

    pub fn nll_partitioned(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.log_density(&self.encode_partitioned(x)?)?.neg()?)
    }

    pub fn nll_expanded(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.log_density(&self.encode_expanded(x)?)?.neg()?)
    }

    /// Per-row loss in the model space (after preprocessing, if any).
    pub fn nll_model(&self, x: &Tensor) -> Result<Tensor> {
        match self.space {
            CoreSpace::Partitioned { .. } => self.nll_partitioned(x),
            CoreSpace::Expanded(_) => self.nll_expanded(x),
        }
    }

    /// Maps data into model space, returning the per-row preprocessing log-det.
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

    /// Per-row NLL of data-space inputs, including the preprocessing Jacobian.
    pub fn nll(&self, x: &Tensor) -> Result<Tensor> {
        let (y, logdet) = self.preprocess_forward(x)?;
        Ok((self.nll_model(&y)? - logdet)?)
    }

    /// Draws latents from the temperature-scaled prior and decodes them with zero residual.
    pub fn sample_model(&self, temperature: f64, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let z = self.prior.sample(temperature, count, rng)?;
        self.decode_latent(&z)
    }

    /// Data-space samples.
    pub fn sample(&self, temperature: f64, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.preprocess_inverse(&self.sample_model(temperature, count, rng)?)
    }

    /// `x` for latent `z` with `δ = 0`.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        match self.space {
            CoreSpace::Partitioned { .. } => {
                let zeros = Tensor::zeros((z.dim(0)?, self.n() - self.latent_dim), DTYPE, &DEVICE)?;
                self.decode_partitioned(z, &zeros)
            }
            CoreSpace::Expanded(_) => self.decoder.forward(z),
        }
    }

    pub fn reconstruct_model(&self, x: &Tensor) -> Result<Tensor> {
        self.decode_latent(&self.encode(x)?.z)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (y, _) = self.preprocess_forward(x)?;
        self.preprocess_inverse(&self.reconstruct_model(&y)?)
    }

    /// Data-dependent initialization of every ActNorm from one batch of data.
    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        let x = x.detach();
        let y = match self.preprocess.as_mut() {
            Some(p) => p.initialize(&x)?,
            None => x,
        };
        let core = match &self.space {
            CoreSpace::Partitioned { split, .. } => split.select_first(&y)?,
            CoreSpace::Expanded(h) => h.forward(&y)?.detach(),
        };
        if let Some(f) = self.core_flow.as_mut() {
            f.initialize(&core)?;
        }
        let z = self.encode(&y)?.z.detach();
        self.prior.initialize(&z)
    }

    /// The model-space forward map assembled from generic flow layers.
    ///
    /// Partitioned models act on `R^N`; expanded models act on `R^(N+D)` with
    /// `x` in the first `N` coordinates and `w` in the last `D`. The output
    /// holds `z` where the core (or `w`) was and `δ` in the remaining slots.
    pub fn composite(&self) -> Result<Composite<'_>> {
        let n = self.n();
        let d = self.latent_dim;
        let (core_idx, rest_idx, total): (Vec<usize>, Vec<usize>, usize) = match &self.space {
            CoreSpace::Partitioned { scheme, .. } => (scheme.core().to_vec(), scheme.shell(), n),
            CoreSpace::Expanded(_) => ((n..n + d).collect(), (0..n).collect(), n + d),
        };
        let core_split = BlockSplit::new(total, &core_idx)?;
        let rest_split = BlockSplit::new(total, &rest_idx)?;
        let partitioned = self.is_partitioned();

        let mut layers: Vec<Box<dyn Bijection + '_>> = Vec::new();
        if let Some(f) = &self.core_flow {
            layers.push(Box::new(Blockwise::new(core_split.clone(), Box::new(f))?));
        }
        let heads = FnConditioner(move |rest: &Tensor| {
            let input = if partitioned {
                self.shell_input(rest)?
            } else {
                rest.clone()
            };
            let (mean, raw) = self.encoder.forward(&input)?;
            Ok((raw, mean))
        });
        layers.push(Box::new(CouplingLayer::new(rest_split, Box::new(heads))));
        let residual = FnConditioner(move |z: &Tensor| {
            let f = self.decode_mean(z)?;
            Ok((f.zeros_like()?, f.neg()?))
        });
        layers.push(Box::new(CouplingLayer::new(core_split, Box::new(residual))));
        Composite::new(total, layers)
    }

    /// Log-density of the composite map's output under `p0(z) r(δ)`.
    pub fn composite_base_log_prob(&self, out: &Tensor) -> Result<Tensor> {
        let (z_idx, d_idx) = match &self.space {
            CoreSpace::Partitioned { scheme, .. } => (scheme.core().to_vec(), scheme.shell()),
            CoreSpace::Expanded(_) => {
                let n = self.n();
                ((n..n + self.latent_dim).collect(), (0..n).collect())
            }
        };
        let split = BlockSplit::new(out.dim(1)?, &z_idx)?;
        debug_assert_eq!(split.second(), d_idx.as_slice());
        let (z, delta) = split.split(out)?;
        Ok((self.prior.log_prob(&z)? + self.error.log_prob(&delta)?)?)
    }
}
