use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aef_core::config::RunConfig;
use aef_core::data::{add_noise, array_to_tensor, load_run_data, NoiseSpec, RunData};
use aef_core::eval::{
    importance_log_marginal, importance_log_marginal_vae, reconstruction_mse_rows, tune_epsilon,
    write_atomic, EvalReport, ImportanceConfig,
};
use aef_core::model::Model;
use aef_core::train::checkpoint::{self, Manifest};
use aef_core::train::{ablation_matrix, ablation_suite, load_model, TrainOptions, Trainer};
use anyhow::{anyhow, Context};
use candle_core::Tensor;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::images::{write_bands, write_grid};
use crate::{ConfigArgs, EXIT_INVALID, EXIT_RUNTIME};

pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn invalid(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for std::result::Result<T, E> {
    fn invalid(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_INVALID,
            error: e.into(),
        })
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
    }
}

fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_INVALID,
        error: anyhow!("{msg}"),
    }
}

/// Rows per forward pass when scoring whole datasets.
const CHUNK: usize = 512;

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))
        .invalid()?;
    cfg.with_overrides(&args.overrides).invalid()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value).runtime()?);
    Ok(())
}

pub fn train(args: &ConfigArgs, out: Option<PathBuf>, resume: bool, stop_after: Option<usize>) -> CliResult<()> {
    let cfg = load_config(args)?;
    let run_dir = out.unwrap_or_else(|| args.output_root.join(&cfg.name));
    // Data first: a missing dataset must not leave a half-created run directory behind.
    let data = load_run_data(&cfg.dataset, cfg.seed)
        .context("loading dataset")
        .invalid()?;
    let mut trainer = if resume {
        Trainer::resume(cfg.clone(), data, &run_dir).invalid()?
    } else {
        if run_dir.join("checkpoints").exists() {
            return Err(invalid(format!(
                "{} already holds a run; pass --resume or choose another --out",
                run_dir.display()
            )));
        }
        Trainer::new(cfg.clone(), data, &run_dir).runtime()?
    };
    create_dir(&run_dir)?;
    write_atomic(&run_dir.join("config.json"), &serde_json::to_vec_pretty(&cfg).runtime()?).runtime()?;
    log::info!("training `{}` in {}", cfg.name, run_dir.display());
    let summary = trainer.run(&TrainOptions { stop_after }).runtime()?;
    print_json(&summary)
}

/// A run directory or a checkpoint directory, resolved to `(checkpoint, run)` directories.
fn resolve_checkpoint(path: &Path) -> CliResult<(PathBuf, PathBuf)> {
    if path.join(checkpoint::MANIFEST).exists() {
        let parent = path.parent().filter(|p| p.ends_with("checkpoints"));
        let run = parent.and_then(Path::parent).unwrap_or(path).to_path_buf();
        return Ok((path.to_path_buf(), run));
    }
    let best = checkpoint::best_dir(path);
    if best.join(checkpoint::MANIFEST).exists() {
        return Ok((best, path.to_path_buf()));
    }
    Err(invalid(format!("no checkpoint found at {}", path.display())))
}

struct Loaded {
    model: Model,
    manifest: Manifest,
    data: RunData,
    run_dir: PathBuf,
}

fn load(path: &Path) -> CliResult<Loaded> {
    let (dir, run_dir) = resolve_checkpoint(path)?;
    let (model, manifest) = load_model(&dir).invalid()?;
    let data = load_run_data(&manifest.config.dataset, manifest.config.seed)
        .context("loading dataset")
        .invalid()?;
    Ok(Loaded {
        model,
        manifest,
        data,
        run_dir,
    })
}

fn head(a: &Array2<f64>, rows: Option<usize>) -> Array2<f64> {
    let n = rows.map_or(a.nrows(), |r| r.min(a.nrows()));
    a.slice(s![..n, ..]).to_owned()
}

fn rows_of(t: &Tensor) -> CliResult<Vec<Vec<f64>>> {
    t.to_vec2::<f64>().runtime()
}

/// Applies `f` to consecutive row chunks of `x` and concatenates the per-row outputs.
fn per_row(x: &Tensor, mut f: impl FnMut(&Tensor) -> aef_core::Result<Vec<f64>>) -> CliResult<Vec<f64>> {
    let n = x.dim(0).runtime()?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        out.extend(f(&x.narrow(0, start, len).runtime()?).runtime()?);
        start += len;
    }
    Ok(out)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
    pub rounds: Option<usize>,
    pub limit: Option<usize>,
    pub tune_rows: usize,
    pub seed: Option<u64>,
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let Loaded {
        model,
        manifest,
        data,
        run_dir,
    } = load(&args.checkpoint)?;
    let cfg = &manifest.config;
    let k = args.samples.unwrap_or(cfg.eval.samples_per_round);
    let rounds = args.rounds.unwrap_or(cfg.eval.rounds);
    if k == 0 || rounds == 0 {
        return Err(invalid("--samples and --rounds must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(cfg.eval.seed));
    let test = head(&data.test.samples, args.limit);
    if test.nrows() == 0 {
        return Err(invalid("test set is empty"));
    }
    let x = array_to_tensor(&test).runtime()?;
    let n = data.test.dim();

    let mut epsilon = None;
    let mut scores = Vec::new();
    let (ll, method, is_used) = match &model {
        Model::Ae(_) => {
            return Err(invalid(
                "a deterministic autoencoder defines no density; nothing to evaluate",
            ))
        }
        Model::Aef(m) if m.is_partitioned() => {
            let ll = per_row(&x, |b| Ok(m.nll(b)?.detach().affine(-1.0, 0.0)?.to_vec1()?))?;
            (ll, "exact, no IS", false)
        }
        Model::Aef(m) => {
            let val = head(&data.validation.samples, Some(args.tune_rows.max(1)));
            let val = array_to_tensor(&val).runtime()?;
            let (eps, s) = tune_epsilon(m, &val, &cfg.eval.epsilon_grid, k, 1, &mut rng).runtime()?;
            log::info!("proposal scale {eps}");
            epsilon = Some(eps);
            scores = s;
            let is = ImportanceConfig::new(k, rounds, eps).invalid()?;
            (importance_log_marginal(m, &x, &is, &mut rng).runtime()?, "importance sampling", true)
        }
        Model::Vae(m) => (
            importance_log_marginal_vae(m, &x, k, rounds, &mut rng).runtime()?,
            "importance sampling, posterior proposal",
            true,
        ),
    };
    let mse = per_row(&x, |b| reconstruction_mse_rows(b, &model.reconstruct(b)?))?;
    let report = EvalReport {
        model_id: cfg.name.clone(),
        variant: cfg.model.variant.as_str().to_string(),
        config_hash: manifest.config_hash.clone(),
        method: method.to_string(),
        epsilon,
        samples_per_round: is_used.then_some(k),
        rounds: is_used.then_some(rounds),
        dequantized: data.dequantized,
        epsilon_scores: scores,
        rows: EvalReport::rows_from(&ll, &mse, n, data.dequantized),
    };
    let out = args.out.unwrap_or_else(|| run_dir.join("eval"));
    create_dir(&out)?;
    report.write_csv(&out.join("eval.csv")).runtime()?;
    report.write_json(&out.join("eval.json")).runtime()?;
    print_json(&report.summary())
}

pub fn sample(
    path: &Path,
    count: usize,
    temperature: Option<f64>,
    output: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult<()> {
    let Loaded {
        model,
        manifest,
        run_dir,
        ..
    } = load(path)?;
    if matches!(model, Model::Ae(_)) {
        return Err(invalid("a deterministic autoencoder has no prior to sample from"));
    }
    let t = temperature.unwrap_or(manifest.config.eval.temperature);
    if !(t >= 0.0) {
        return Err(invalid("temperature must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(manifest.config.eval.seed));
    let samples = rows_of(&model.sample(t, count, &mut rng).runtime()?)?;
    let png = output.unwrap_or_else(|| run_dir.join("samples.png"));
    if let Some(parent) = png.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_grid(&png, &samples, model.shape()).runtime()?;
    write_csv(&png.with_extension("csv"), &samples)?;
    print_json(&json!({ "count": count, "temperature": t, "grid": png }))
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(text, "{}", line.join(","));
    }
    write_atomic(path, text.as_bytes()).runtime()
}

pub fn reconstruct(path: &Path, count: usize, out: Option<PathBuf>) -> CliResult<()> {
    let Loaded {
        model,
        data,
        run_dir,
        ..
    } = load(path)?;
    let x = array_to_tensor(&head(&data.test.samples, Some(count))).runtime()?;
    let recon = model.reconstruct(&x).runtime()?;
    let mse = reconstruction_mse_rows(&x, &recon).runtime()?;
    let out = out.unwrap_or_else(|| run_dir.join("reconstruct"));
    create_dir(&out)?;
    let (orig, rec) = (rows_of(&x)?, rows_of(&recon)?);
    write_bands(&out.join("reconstruct.png"), &[&orig, &rec], model.shape()).runtime()?;
    let mut csv = String::from("index,mse\n");
    for (i, m) in mse.iter().enumerate() {
        let _ = writeln!(csv, "{i},{m}");
    }
    write_atomic(&out.join("reconstruct.csv"), csv.as_bytes()).runtime()?;
    let mean = mse.iter().sum::<f64>() / mse.len().max(1) as f64;
    print_json(&json!({ "count": mse.len(), "mean_mse": mean }))
}

pub fn denoise(
    path: &Path,
    noise: f64,
    count: usize,
    limit: Option<usize>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult<()> {
    let Loaded {
        model,
        manifest,
        data,
        run_dir,
    } = load(path)?;
    let spec = NoiseSpec::for_shape(data.test.shape, noise).invalid()?;
    let known = NoiseSpec::MNIST_LEVELS
        .iter()
        .chain(NoiseSpec::NATURAL_LEVELS.iter())
        .any(|l| (l - noise).abs() < 1e-12);
    if !known && noise != 0.0 {
        log::info!("noise level {noise} is outside the usual benchmark levels");
    }
    let inputs = head(&data.test.samples, limit);
    // Toy data come with their noise-free manifold points; otherwise the test inputs are the reference.
    let clean = match &data.toy {
        Some((_, clean)) => head(clean, Some(inputs.nrows())),
        None => inputs.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(manifest.config.eval.seed));
    let noisy = add_noise(&inputs, spec, &mut rng).runtime()?;
    let (noisy, clean) = (array_to_tensor(&noisy).runtime()?, array_to_tensor(&clean).runtime()?);
    let recon = model.reconstruct(&noisy).runtime()?;
    let mse_noisy = reconstruction_mse_rows(&clean, &noisy).runtime()?;
    let mse_recon = reconstruction_mse_rows(&clean, &recon).runtime()?;

    let out = out.unwrap_or_else(|| run_dir.join(format!("denoise-{noise}")));
    create_dir(&out)?;
    let shown = count.min(mse_recon.len());
    let band = |t: &Tensor| -> CliResult<Vec<Vec<f64>>> { rows_of(&t.narrow(0, 0, shown).runtime()?) };
    let (bn, br, bc) = (band(&noisy)?, band(&recon)?, band(&clean)?);
    write_bands(&out.join("triptych.png"), &[&bn, &br, &bc], model.shape()).runtime()?;
    let mut csv = String::from("index,mse_noisy,mse_reconstruction\n");
    for (i, (a, b)) in mse_noisy.iter().zip(&mse_recon).enumerate() {
        let _ = writeln!(csv, "{i},{a},{b}");
    }
    write_atomic(&out.join("denoise.csv"), csv.as_bytes()).runtime()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let summary = json!({
        "noise": noise,
        "count": mse_recon.len(),
        "mean_mse_noisy": mean(&mse_noisy),
        "mean_mse_reconstruction": mean(&mse_recon),
        "reference": if data.toy.is_some() { "manifold" } else { "test inputs" },
    });
    write_atomic(&out.join("denoise.json"), &serde_json::to_vec_pretty(&summary).runtime()?).runtime()?;
    print_json(&summary)
}

pub fn ablate(args: &ConfigArgs, out: Option<PathBuf>, single_family: bool) -> CliResult<()> {
    let base = load_config(args)?;
    let runs = if single_family {
        ablation_matrix(&base)
    } else {
        ablation_suite(&base)
    };
    let data = load_run_data(&base.dataset, base.seed)
        .context("loading dataset")
        .invalid()?;
    let root = out.unwrap_or_else(|| args.output_root.join(format!("{}-ablation", base.name)));
    create_dir(&root)?;
    let mut csv = String::from(
        "name,variant,setting,latent_flow,prior_flow,iterations,best_validation_loss,test_loss\n",
    );
    let mut results = Vec::new();
    for (setting, cfg) in runs {
        log::info!("ablation run `{}`", cfg.name);
        let dir = root.join(&cfg.name);
        let mut trainer = Trainer::new(cfg.clone(), data.clone(), &dir).runtime()?;
        let s = trainer.run(&TrainOptions::default()).runtime()?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            cfg.name,
            cfg.model.variant.as_str(),
            setting.label(cfg.model.variant),
            cfg.model.latent_flow,
            cfg.model.prior_flow,
            s.iterations,
            opt(s.best_validation_loss),
            opt(s.test_loss)
        );
        results.push(s);
    }
    write_atomic(&root.join("ablation.csv"), csv.as_bytes()).runtime()?;
    print_json(&results)
}
