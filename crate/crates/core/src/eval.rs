//! Marginal-likelihood estimation, bits per dimension and reconstruction metrics.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aef::AefModel;
use crate::error::{Error, Result};
use crate::params::normal_tensor;
use crate::vae::VaeModel;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Upper bound on rows pushed through a model at once during estimation.
const MAX_ROWS: usize = 8192;

/// `log(mean(exp(v)))`, shifted by the maximum so large magnitudes do not overflow.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (s / values.len() as f64).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    /// Proposal samples per round.
    pub samples: usize,
    pub rounds: usize,
    /// Proposal standard deviation.
    pub epsilon: f64,
}

impl ImportanceConfig {
    pub fn new(samples: usize, rounds: usize, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            samples,
            rounds,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.rounds == 0 {
            return Err(Error::InvalidArgument(
                "importance sampling needs at least one sample and one round".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "proposal scale must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Runs `f` on row groups of `x` sized so that `group * k <= MAX_ROWS`, concatenating the
/// per-row results.
fn chunked(x: &Tensor, k: usize, mut f: impl FnMut(&Tensor) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let b = x.dim(0)?;
    let group = (MAX_ROWS / k.max(1)).max(1);
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    while start < b {
        let len = group.min(b - start);
        out.extend(f(&x.narrow(0, start, len)?)?);
        start += len;
    }
    Ok(out)
}

/// `(B, N) -> (B*K, N)` with every row repeated `k` times consecutively.
fn repeat_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, n) = x.dims2()?;
    Ok(x.unsqueeze(1)?.broadcast_as((b, k, n))?.reshape((b * k, n))?)
}

fn reduce_rounds(weights: &[f64], b: usize, k: usize, acc: &mut [f64]) {
    for i in 0..b {
        acc[i] += log_mean_exp(&weights[i * k..(i + 1) * k]);
    }
}

/// Importance-sampling estimate of `log p(x)` per row for an expanded AEF.
///
/// Proposals are `w_k ~ N(h(x), ε² I)`; each round's log-mean-exp of
/// `log p(x, w_k) − log q(w_k)` is averaged over rounds. Inputs are in data
/// space; the preprocessing Jacobian is included.
pub fn importance_log_marginal(
    model: &AefModel,
    x: &Tensor,
    cfg: &ImportanceConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.is_partitioned() {
        return Err(Error::InvalidArgument(
            "importance sampling applies to expanded AEFs; partitioned models have an exact NLL".into(),
        ));
    }
    let (k, d, eps) = (cfg.samples, model.latent_dim(), cfg.epsilon);
    let log_q_const = -0.5 * d as f64 * LN_2PI - d as f64 * eps.ln();
    chunked(x, k, |xb| {
        let b = xb.dim(0)?;
        let (y, logdet_pre) = model.preprocess_forward(xb)?;
        let y = y.detach();
        let yk = repeat_rows(&y, k)?;
        let hk = repeat_rows(&model.features(&y)?.detach(), k)?;
        let mut acc = vec![0.0; b];
        for _ in 0..cfg.rounds {
            let noise = normal_tensor(&[b * k, d], 1.0, rng)?;
            let w = (&hk + noise.affine(eps, 0.0)?)?;
            let log_q = noise.sqr()?.sum(1)?.affine(-0.5, log_q_const)?;
            let lw: Vec<f64> = (model.density_joint(&yk, &w)? - log_q)?.detach().to_vec1()?;
            reduce_rounds(&lw, b, k, &mut acc);
        }
        let pre: Vec<f64> = logdet_pre.to_vec1()?;
        Ok(acc
            .into_iter()
            .zip(pre)
            .map(|(a, p)| a / cfg.rounds as f64 + p)
            .collect())
    })
}

/// Importance-weighted estimate of `log p(x)` per row for a VAE, using the posterior as proposal.
pub fn importance_log_marginal_vae(
    model: &VaeModel,
    x: &Tensor,
    samples: usize,
    rounds: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if samples == 0 || rounds == 0 {
        return Err(Error::InvalidArgument(
            "importance sampling needs at least one sample and one round".into(),
        ));
    }
    let k = samples;
    chunked(x, k, |xb| {
        let b = xb.dim(0)?;
        let (y, logdet_pre) = model.preprocess_forward(xb)?;
        let yk = repeat_rows(&y.detach(), k)?;
        let mut acc = vec![0.0; b];
        for _ in 0..rounds {
            let noise = model.draw_noise(b * k, rng)?;
            let lw: Vec<f64> = model.log_weight(&yk, &noise)?.detach().to_vec1()?;
            reduce_rounds(&lw, b, k, &mut acc);
        }
        let pre: Vec<f64> = logdet_pre.to_vec1()?;
        Ok(acc
            .into_iter()
            .zip(pre)
            .map(|(a, p)| a / rounds as f64 + p)
            .collect())
    })
}

/// Per-candidate mean estimate from [`tune_epsilon`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonScore {
    pub epsilon: f64,
    pub mean_log_likelihood: f64,
}

/// Picks the grid value with the highest mean IS estimate on `validation`.
pub fn tune_epsilon(
    model: &AefModel,
    validation: &Tensor,
    grid: &[f64],
    samples: usize,
    rounds: usize,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<EpsilonScore>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("epsilon grid is empty".into()));
    }
    if validation.dim(0)? == 0 {
        return Err(Error::InvalidArgument("validation batch is empty".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &eps in grid {
        let cfg = ImportanceConfig::new(samples, rounds, eps)?;
        let est = importance_log_marginal(model, validation, &cfg, rng)?;
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        scores.push(EpsilonScore {
            epsilon: eps,
            mean_log_likelihood: mean,
        });
    }
    let best = scores
        .iter()
        .filter(|s| s.mean_log_likelihood.is_finite())
        .max_by(|a, b| a.mean_log_likelihood.total_cmp(&b.mean_log_likelihood))
        .map(|s| s.epsilon)
        .ok_or_else(|| Error::NonFinite {
            context: "every epsilon candidate gave a non-finite estimate".into(),
        })?;
    Ok((best, scores))
}

/// `nll / (N ln 2)`, plus 8 bits when the data were dequantized from 8-bit values.
pub fn bits_per_dim(nll_nats: f64, n: usize, dequantized: bool) -> f64 {
    let bpd = nll_nats / (n as f64 * std::f64::consts::LN_2);
    if dequantized {
        bpd + 8.0
    } else {
        bpd
    }
}

/// Per-row mean squared error.
pub fn reconstruction_mse_rows(clean: &Tensor, reconstructed: &Tensor) -> Result<Vec<f64>> {
    if clean.dims() != reconstructed.dims() {
        return Err(Error::Dimension(format!(
            "cannot compare batches of shape {:?} and {:?}",
            clean.dims(),
            reconstructed.dims()
        )));
    }
    Ok((clean - reconstructed)?.sqr()?.mean(1)?.detach().to_vec1()?)
}

/// Mean over batch and dimensions of the squared error.
pub fn reconstruction_mse(clean: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    let rows = reconstruction_mse_rows(clean, reconstructed)?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RowEval {
    pub index: usize,
    pub log_likelihood: f64,
    pub bpd: f64,
    pub reconstruction_mse: f64,
}

/// Per-datapoint evaluation plus a summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub variant: String,
    pub config_hash: String,
    /// How `log_likelihood` was obtained, e.g. `importance sampling` or `exact, no IS`.
    pub method: String,
    pub epsilon: Option<f64>,
    pub samples_per_round: Option<usize>,
    pub rounds: Option<usize>,
    pub dequantized: bool,
    pub epsilon_scores: Vec<EpsilonScore>,
    pub rows: Vec<RowEval>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model_id: String,
    pub variant: String,
    pub config_hash: String,
    pub method: String,
    pub epsilon: Option<f64>,
    pub samples_per_round: Option<usize>,
    pub rounds: Option<usize>,
    pub count: usize,
    pub mean_nll: f64,
    pub mean_bpd: f64,
    pub mean_reconstruction_mse: f64,
    pub epsilon_scores: Vec<EpsilonScore>,
}

impl EvalReport {
    /// Builds rows from per-datapoint log-likelihoods and reconstruction errors.
    pub fn rows_from(log_likelihood: &[f64], mse: &[f64], n: usize, dequantized: bool) -> Vec<RowEval> {
        log_likelihood
            .iter()
            .zip(mse)
            .enumerate()
            .map(|(index, (&ll, &m))| RowEval {
                index,
                log_likelihood: ll,
                bpd: bits_per_dim(-ll, n, dequantized),
                reconstruction_mse: m,
            })
            .collect()
    }

    pub fn summary(&self) -> EvalSummary {
        let count = self.rows.len();
        let mean = |f: &dyn Fn(&RowEval) -> f64| {
            if count == 0 {
                f64::NAN
            } else {
                self.rows.iter().map(f).sum::<f64>() / count as f64
            }
        };
        EvalSummary {
            model_id: self.model_id.clone(),
            variant: self.variant.clone(),
            config_hash: self.config_hash.clone(),
            method: self.method.clone(),
            epsilon: self.epsilon,
            samples_per_round: self.samples_per_round,
            rounds: self.rounds,
            count,
            mean_nll: mean(&|r| -r.log_likelihood),
            mean_bpd: mean(&|r| r.bpd),
            mean_reconstruction_mse: mean(&|r| r.reconstruction_mse),
            epsilon_scores: self.epsilon_scores.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,log_likelihood,bpd,reconstruction_mse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.index, r.log_likelihood, r.bpd, r.reconstruction_mse
            ));
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(&self.summary())?)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
