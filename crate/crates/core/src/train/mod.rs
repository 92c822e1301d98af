//! Training loop with gradient clipping, early stopping, checkpointing and exact resume.

mod ablation;
mod adam;
pub mod checkpoint;

pub use ablation::{ablation_matrix, ablation_suite, AblationSetting};
pub use adam::{clip_global_norm, collect_grads, global_norm, Adam, NamedGrads};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{add_noise, array_to_tensor, random_hflip, Dataset, NoiseSpec, RunData};
use crate::error::{Error, Result};
use crate::model::Model;

use checkpoint::Manifest;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
const METRICS_HEADER: &str = "iteration,train_loss,val_loss,sigma,val_seed,wall_time\n";
/// Rows used for data-dependent initialization.
const INIT_ROWS: usize = 1024;
/// Rows per chunk when evaluating losses without gradients.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many completed iterations and save the latest checkpoint (for resume).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub variant: String,
    pub config_hash: String,
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub best_validation_loss: Option<f64>,
    /// Objective on the test set at the best-validation parameters.
    pub test_loss: Option<f64>,
    pub stopped_early: bool,
    pub final_sigma: Option<f64>,
    pub config: RunConfig,
}

pub struct Trainer {
    config: RunConfig,
    data: RunData,
    model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
    best_val: Option<f64>,
    best_iter: Option<usize>,
    since_best: usize,
    run_dir: PathBuf,
    started: Instant,
}

fn model_rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

/// Seed of the fresh validation draw at `iteration`.
pub fn validation_seed(cfg: &RunConfig, iteration: usize) -> u64 {
    cfg.seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(iteration as u64)
        .rotate_left(17)
}

/// `ds` as a tensor, with seeded noise when the run injects noise.
pub fn noisy_tensor(ds: &Dataset, noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if noise > 0.0 {
        array_to_tensor(&add_noise(&ds.samples, NoiseSpec::for_shape(ds.shape, noise)?, rng)?)
    } else {
        ds.to_tensor()
    }
}

impl Trainer {
    /// Fresh model with data-dependent initialization on the first training rows.
    pub fn new(config: RunConfig, data: RunData, run_dir: &Path) -> Result<Self> {
        let mut model = Model::new(&config.model, data.train.shape, &mut model_rng(&config))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let rows = data.train.len().min(INIT_ROWS);
        let init = Dataset::new("init", data.train.shape, data.train.head(rows))?;
        model.data_init(&noisy_tensor(&init, config.dataset.noise, &mut rng)?)?;
        let o = &config.optimizer;
        let adam = Adam::new(o.lr, o.beta1, o.beta2);
        Ok(Self {
            config,
            data,
            model,
            adam,
            rng,
            iteration: 0,
            best_val: None,
            best_iter: None,
            since_best: 0,
            run_dir: run_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    /// Restores the latest checkpoint under `run_dir`; the config hash must match.
    pub fn resume(config: RunConfig, data: RunData, run_dir: &Path) -> Result<Self> {
        let dir = checkpoint::latest_dir(run_dir);
        let manifest = checkpoint::read_manifest(&dir)?;
        let hash = config.hash();
        if manifest.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "config hash {hash} does not match checkpoint hash {}",
                manifest.config_hash
            )));
        }
        let model = Model::new(&config.model, manifest.shape, &mut model_rng(&config))?;
        checkpoint::load_params(&dir, model.params())?;
        let o = &config.optimizer;
        let mut adam = Adam::new(o.lr, o.beta1, o.beta2);
        checkpoint::load_optimizer(&dir, &manifest, &mut adam)?;
        Ok(Self {
            config,
            data,
            model,
            adam,
            rng: manifest.rng,
            iteration: manifest.iteration,
            best_val: manifest.best_validation_loss,
            best_iter: manifest.best_iteration,
            since_best: manifest.since_best,
            run_dir: run_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &RunData {
        &self.data
    }

    fn next_batch(&mut self) -> Result<Tensor> {
        let n = self.data.train.len();
        let b = self.config.optimizer.batch_size.min(n);
        let idx = rand::seq::index::sample(&mut self.rng, n, b).into_vec();
        let mut batch = self.data.train.select(&idx);
        if self.config.dataset.hflip {
            random_hflip(&mut batch, self.data.train.shape, &mut self.rng);
        }
        if self.config.dataset.noise > 0.0 {
            let spec = NoiseSpec::for_shape(self.data.train.shape, self.config.dataset.noise)?;
            batch = add_noise(&batch, spec, &mut self.rng)?;
        }
        array_to_tensor(&batch)
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let x = self.next_batch()?;
        let loss = self.model.loss(&x, &mut self.rng)?;
        let value = loss.to_scalar::<f64>()?;
        let iteration = self.iteration + 1;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let mut grads = collect_grads(self.model.params(), &loss.backward()?);
        let norm = match self.config.optimizer.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c)?,
            None => global_norm(&grads)?,
        };
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        self.adam.step(self.model.params(), &grads)?;
        self.iteration = iteration;
        Ok(value)
    }

    /// Mean objective on the validation set with a fresh seeded draw; returns `(loss, seed)`.
    pub fn validation_loss(&self) -> Result<(f64, u64)> {
        let seed = validation_seed(&self.config, self.iteration);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = noisy_tensor(&self.data.validation, self.config.dataset.noise, &mut rng)?;
        Ok((self.model.evaluate_loss(&x, EVAL_CHUNK, &mut rng)?, seed))
    }

    fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            shape: self.data.train.shape,
            iteration: self.iteration,
            best_validation_loss: self.best_val,
            best_iteration: self.best_iter,
            since_best: self.since_best,
            adam_steps: self.adam.steps(),
            rng: self.rng.clone(),
        })
    }

    pub fn save_latest(&self) -> Result<()> {
        checkpoint::save(
            &checkpoint::latest_dir(&self.run_dir),
            &self.manifest()?,
            self.model.params(),
            &self.adam,
        )
    }

    fn append_metrics(&self, train_loss: Option<f64>, val: f64, seed: u64) -> Result<()> {
        let path = self.run_dir.join(METRICS_FILE);
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let sigma = self.model.sigma()?.map(|s| s.to_string()).unwrap_or_default();
        let train = train_loss.map(|t| t.to_string()).unwrap_or_default();
        let mut line = String::new();
        if fresh {
            line.push_str(METRICS_HEADER);
        }
        line.push_str(&format!(
            "{},{train},{val},{sigma},{seed},{:.3}\n",
            self.iteration,
            self.started.elapsed().as_secs_f64()
        ));
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Validates, logs, and checkpoints on improvement. Returns true when patience ran out.
    fn evaluate(&mut self, train_loss: Option<f64>, elapsed: usize) -> Result<bool> {
        let (val, seed) = self.validation_loss()?;
        self.append_metrics(train_loss, val, seed)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        if self.best_val.is_none_or(|b| val < b) {
            self.best_val = Some(val);
            self.best_iter = Some(self.iteration);
            self.since_best = 0;
            checkpoint::save(
                &checkpoint::best_dir(&self.run_dir),
                &self.manifest()?,
                self.model.params(),
                &self.adam,
            )?;
        } else {
            self.since_best += elapsed;
        }
        Ok(self.since_best >= self.config.optimizer.patience)
    }

    /// Trains until `max_iterations`, early stopping, or `opts.stop_after`.
    pub fn run(&mut self, opts: &TrainOptions) -> Result<TrainSummary> {
        std::fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let o = self.config.optimizer.clone();
        let eval_every = o.eval_every.max(1);
        if self.iteration == 0 && self.best_val.is_none() {
            self.evaluate(None, 0)?;
        }
        let mut stopped_early = false;
        let mut window = (0.0, 0usize);
        while self.iteration < o.max_iterations {
            if opts.stop_after.is_some_and(|k| self.iteration >= k) {
                self.save_latest()?;
                return self.summary(false, None);
            }
            let loss = self.step()?;
            window = (window.0 + loss, window.1 + 1);
            if self.iteration % eval_every == 0 || self.iteration == o.max_iterations {
                let train = window.0 / window.1 as f64;
                window = (0.0, 0);
                let elapsed = self.iteration - (self.iteration - 1) / eval_every * eval_every;
                if self.evaluate(Some(train), elapsed)? {
                    stopped_early = true;
                    break;
                }
            }
        }
        self.save_latest()?;
        let test_loss = self.test_loss_at_best()?;
        let summary = self.summary(stopped_early, test_loss)?;
        crate::eval::write_atomic(
            &self.run_dir.join(SUMMARY_FILE),
            &serde_json::to_vec_pretty(&summary)?,
        )?;
        Ok(summary)
    }

    /// Loads the best checkpoint into the model and evaluates the objective on the test set.
    fn test_loss_at_best(&mut self) -> Result<Option<f64>> {
        let dir = checkpoint::best_dir(&self.run_dir);
        if !dir.exists() || self.data.test.is_empty() {
            return Ok(None);
        }
        checkpoint::load_params(&dir, self.model.params())?;
        let seed = validation_seed(&self.config, usize::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = noisy_tensor(&self.data.test, self.config.dataset.noise, &mut rng)?;
        Ok(Some(self.model.evaluate_loss(&x, EVAL_CHUNK, &mut rng)?))
    }

    fn summary(&self, stopped_early: bool, test_loss: Option<f64>) -> Result<TrainSummary> {
        Ok(TrainSummary {
            name: self.config.name.clone(),
            variant: self.config.model.variant.as_str().to_string(),
            config_hash: self.config.hash(),
            iterations: self.iteration,
            best_iteration: self.best_iter,
            best_validation_loss: self.best_val,
            test_loss,
            stopped_early,
            final_sigma: self.model.sigma()?,
            config: self.config.clone(),
        })
    }
}

/// Rebuilds a model from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = checkpoint::read_manifest(dir)?;
    let model = Model::new(
        &manifest.config.model,
        manifest.shape,
        &mut model_rng(&manifest.config),
    )?;
    checkpoint::load_params(dir, model.params())?;
    Ok((model, manifest))
}
