//! Declarative run configuration.
//!
//! A [`RunConfig`] is a single JSON document. Its hash is computed over the
//! canonical (key-sorted) JSON form so field order in the source file does not
//! matter.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Std of Gaussian noise injected into training inputs (denoising runs).
    #[serde(default)]
    pub noise: f64,
    /// Random horizontal flips when batches are drawn. Off by default.
    #[serde(default)]
    pub hflip: bool,
}

fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic low-dimensional manifold embedded in `ambient_dim` dimensions.
    Toy {
        manifold: ManifoldKind,
        ambient_dim: usize,
        count: usize,
        test_count: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Images in IDX byte format, dequantized to `[0, 1)`.
    Idx {
        train_images: PathBuf,
        test_images: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    SineCurve,
    Circle,
    SwissRibbon,
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine-curve" => Ok(Self::SineCurve),
            "circle" => Ok(Self::Circle),
            "swiss-ribbon" => Ok(Self::SwissRibbon),
            other => Err(Error::InvalidArgument(format!(
                "unsupported manifold kind `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Hash)]
pub enum Variant {
    #[serde(rename = "aef-partitioned-center")]
    AefCenter,
    #[serde(rename = "aef-partitioned-corner")]
    AefCorner,
    #[serde(rename = "aef-partitioned-random")]
    AefRandom,
    #[serde(rename = "aef-linear")]
    AefLinear,
    #[serde(rename = "vae")]
    Vae,
    #[serde(rename = "deterministic-ae")]
    DeterministicAe,
}

impl Variant {
    pub fn is_aef(self) -> bool {
        matches!(
            self,
            Self::AefCenter | Self::AefCorner | Self::AefRandom | Self::AefLinear
        )
    }

    pub fn is_partitioned(self) -> bool {
        matches!(self, Self::AefCenter | Self::AefCorner | Self::AefRandom)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AefCenter => "aef-partitioned-center",
            Self::AefCorner => "aef-partitioned-corner",
            Self::AefRandom => "aef-partitioned-random",
            Self::AefLinear => "aef-linear",
            Self::Vae => "vae",
            Self::DeterministicAe => "deterministic-ae",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// Two strided 3x3 convolutions in the encoder, a linear layer plus two
    /// 4x4 transposed convolutions in the decoder.
    Conv {
        #[serde(default = "default_conv_channels")]
        channels: [usize; 2],
    },
}

fn default_conv_channels() -> [usize; 2] {
    [64, 128]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of stacked masked autoregressive layers.
    #[serde(default = "default_flow_layers")]
    pub layers: usize,
    #[serde(default = "default_flow_hidden")]
    pub hidden: usize,
    /// Residual blocks per autoregressive layer.
    #[serde(default = "default_flow_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_flow_layers() -> usize {
    4
}
fn default_flow_hidden() -> usize {
    256
}
fn default_flow_blocks() -> usize {
    2
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: default_flow_layers(),
            hidden: default_flow_hidden(),
            blocks: default_flow_blocks(),
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub lambda: f64,
}

/// Logit preprocessing constant for MNIST-like data.
pub const LAMBDA_MNIST: f64 = 1e-6;
/// Logit preprocessing constant for natural images.
pub const LAMBDA_NATURAL: f64 = 0.05;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub architecture: Architecture,
    /// Wrap the standard-normal base distribution in a MAF.
    #[serde(default = "yes")]
    pub prior_flow: bool,
    /// Posterior flow for VAEs, core encoder flow for AEFs.
    #[serde(default = "yes")]
    pub latent_flow: bool,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    #[serde(default = "one")]
    pub sigma_init: f64,
    #[serde(default = "yes")]
    pub train_sigma: bool,
    /// Std of the initial feature-expansion weights.
    #[serde(default = "default_expansion_init")]
    pub expansion_init_std: f64,
    /// Seed of the random core/shell partition.
    #[serde(default)]
    pub partition_seed: u64,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_expansion_init() -> f64 {
    0.01
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    /// Global gradient-norm threshold; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

pub const LR_MNIST: f64 = 1e-3;
pub const LR_DENOISING: f64 = 1e-4;
pub const BATCH_MNIST: usize = 128;
pub const CLIP_NORM: f64 = 200.0;

fn default_lr() -> f64 {
    LR_MNIST
}
fn default_batch() -> usize {
    BATCH_MNIST
}
fn default_iterations() -> usize {
    20_000
}
fn default_clip() -> Option<f64> {
    Some(CLIP_NORM)
}
fn default_patience() -> usize {
    5_000
}
fn default_eval_every() -> usize {
    100
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            max_iterations: default_iterations(),
            clip_norm: default_clip(),
            patience: default_patience(),
            eval_every: default_eval_every(),
            beta1: default_beta1(),
            beta2: default_beta2(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_is_samples")]
    pub samples_per_round: usize,
    #[serde(default = "default_is_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epsilon_grid")]
    pub epsilon_grid: Vec<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

pub const IS_SAMPLES: usize = 128;
pub const IS_ROUNDS: usize = 20;
pub const SAMPLE_TEMPERATURE: f64 = 0.85;

fn default_is_samples() -> usize {
    IS_SAMPLES
}
fn default_is_rounds() -> usize {
    IS_ROUNDS
}
fn default_temperature() -> f64 {
    SAMPLE_TEMPERATURE
}

/// 8 log-spaced values in `[1e-4, 1]`.
pub fn default_epsilon_grid() -> Vec<f64> {
    (0..8)
        .map(|i| 10f64.powf(-4.0 + 4.0 * i as f64 / 7.0))
        .collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_round: default_is_samples(),
            rounds: default_is_rounds(),
            epsilon_grid: default_epsilon_grid(),
            temperature: default_temperature(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies dotted-path overrides such as `optimizer.lr=1e-4`.
    ///
    /// Values are parsed as JSON when possible and fall back to strings.
    /// Only paths that already exist in the serialized config are accepted.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (path, raw) = ov.split_once('=').ok_or_else(|| {
                Error::config(ov, "override must have the form key=value")
            })?;
            let value = serde_json::from_str::<Value>(raw)
                .unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::config(path, "no such config field"))?;
            }
            *slot = value;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::config("<override>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be >= 1"));
        }
        if let Some(p) = &m.preprocess {
            if !(0.0..0.5).contains(&p.lambda) {
                return Err(Error::config("model.preprocess.lambda", "must lie in [0, 0.5)"));
            }
        }
        if !(m.sigma_init > 0.0) {
            return Err(Error::config("model.sigma_init", "must be positive"));
        }
        if m.flow.layers == 0 || m.flow.hidden == 0 {
            return Err(Error::config("model.flow", "layers and hidden must be >= 1"));
        }
        if let Architecture::Mlp { hidden, .. } = &m.architecture {
            if hidden.iter().any(|h| *h == 0) {
                return Err(Error::config("model.architecture.hidden", "widths must be >= 1"));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if o.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be >= 1"));
        }
        if o.eval_every == 0 {
            return Err(Error::config("optimizer.eval_every", "must be >= 1"));
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("optimizer.clip_norm", "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        let d = &self.dataset;
        if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
            return Err(Error::config("dataset.validation_fraction", "must lie in (0, 1)"));
        }
        if !(d.noise >= 0.0) {
            return Err(Error::config("dataset.noise", "must be >= 0"));
        }
        if let DataSource::Toy {
            ambient_dim,
            count,
            test_count,
            noise,
            manifold,
            ..
        } = &d.source
        {
            let intrinsic = crate::data::toy::intrinsic_dim(*manifold);
            if *ambient_dim <= intrinsic {
                return Err(Error::config(
                    "dataset.source.ambient_dim",
                    format!("must exceed the manifold dimension {intrinsic}"),
                ));
            }
            if *count < 2 || *test_count == 0 {
                return Err(Error::config("dataset.source.count", "too few samples"));
            }
            if !(*noise >= 0.0) {
                return Err(Error::config("dataset.source.noise", "must be >= 0"));
            }
        }
        let e = &self.eval;
        if e.samples_per_round == 0 || e.rounds == 0 {
            return Err(Error::config("eval.samples_per_round", "K and rounds must be >= 1"));
        }
        if e.epsilon_grid.is_empty() || e.epsilon_grid.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("eval.epsilon_grid", "must be a nonempty list of positive values"));
        }
        if !(e.temperature >= 0.0) {
            return Err(Error::config("eval.temperature", "must be >= 0"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut canonical = String::new();
        write_canonical(&value, &mut canonical);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// JSON with object keys sorted at every level.
fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_json() -> &'static str {
        r#"{
            "name": "toy",
            "seed": 3,
            "dataset": {
                "source": {"kind": "toy", "manifold": "sine-curve", "ambient_dim": 10,
                           "count": 200, "test_count": 50, "noise": 0.05}
            },
            "model": {
                "variant": "aef-linear",
                "latent_dim": 1,
                "architecture": {"kind": "mlp", "hidden": [16], "activation": "tanh"}
            }
        }"#
    }

    #[test]
    fn defaults_follow_published_recipe() {
        let cfg = RunConfig::from_json(toy_json()).unwrap();
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.optimizer.batch_size, 128);
        assert_eq!(cfg.optimizer.clip_norm, Some(200.0));
        assert_eq!(cfg.eval.samples_per_round, 128);
        assert_eq!(cfg.eval.rounds, 20);
        assert_eq!(cfg.eval.temperature, 0.85);
        assert_eq!(cfg.model.flow.layers, 4);
        assert_eq!(cfg.model.flow.hidden, 256);
        assert_eq!(cfg.dataset.validation_fraction, 0.1);
        let grid = default_epsilon_grid();
        assert_eq!(grid.len(), 8);
        assert!((grid[0] - 1e-4).abs() < 1e-18);
        assert!((grid[7] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn override_takes_effect_and_unknown_path_is_rejected() {
        let cfg = RunConfig::from_json(toy_json()).unwrap();
        let o = cfg.with_overrides(&["optimizer.lr=1e-4"]).unwrap();
        assert_eq!(o.optimizer.lr, 1e-4);
        assert_ne!(o.hash(), cfg.hash());
        assert!(cfg.with_overrides(&["optimizer.learning_rate=1"]).is_err());
        assert!(cfg.with_overrides(&["optimizer.lr"]).is_err());
        let err = cfg.with_overrides(&["optimizer.lr=-1"]).unwrap_err();
        assert!(err.to_string().contains("optimizer.lr"));
    }

    #[test]
    fn hash_ignores_field_order() {
        let a = RunConfig::from_json(toy_json()).unwrap();
        let reordered = r#"{
            "model": {
                "architecture": {"activation": "tanh", "hidden": [16], "kind": "mlp"},
                "latent_dim": 1,
                "variant": "aef-linear"
            },
            "dataset": {
                "source": {"noise": 0.05, "test_count": 50, "count": 200,
                           "ambient_dim": 10, "manifold": "sine-curve", "kind": "toy"}
            },
            "seed": 3,
            "name": "toy"
        }"#;
        let b = RunConfig::from_json(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = toy_json().replace("\"latent_dim\": 1", "\"latent_dim\": 0");
        let err = RunConfig::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("model.latent_dim"), "{err}");
        let bad = toy_json().replace("\"ambient_dim\": 10", "\"ambient_dim\": 1");
        assert!(RunConfig::from_json(&bad).is_err());
    }
}
