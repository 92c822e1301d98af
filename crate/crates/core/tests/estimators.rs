//! Statistical properties of the likelihood estimators.

mod common;

use aef_core::aef::AefModel;
use aef_core::config::Variant;
use aef_core::data::DataShape;
use aef_core::eval::{importance_log_marginal, importance_log_marginal_vae, tune_epsilon, ImportanceConfig};
use aef_core::vae::VaeModel;
use common::*;

/// Expanded AEF with `f ≡ 0`, `g_m ≡ 0`, `g_s ≡ 1`, no flows and constant features `h ≡ offset`,
/// so `log p(x, w) = log N(w; 0, 1) + log N(x; 0, σ² I)`.
fn factorized(n: usize, sigma: f64, offset: f64) -> AefModel {
    let m = AefModel::new(&linear_config(Variant::AefLinear, sigma, true), DataShape::vector(n), &mut rng(0)).unwrap();
    let p = m.params();
    for name in ["decoder.layer0.weight", "decoder.layer0.bias", "encoder.mean.weight", "encoder.mean.bias",
        "encoder.log_scale.weight", "encoder.log_scale.bias", "expansion.weight"] {
        p.fill(name, 0.0).unwrap();
    }
    p.set("expansion.bias", &[offset]).unwrap();
    m
}

fn factorized_log_p(x: &[f64], sigma: f64) -> f64 {
    x.iter().map(|v| -0.5 * (v / sigma).powi(2) - sigma.ln() - 0.5 * LN_2PI).sum()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
}

#[test]
fn factorized_toy_density_is_closed_form() {
    let m = factorized(2, 0.7, 0.0);
    let xs = vec![vec![0.3, -1.2], vec![0.0, 0.0], vec![-0.3, 1.2]];
    let w = from_rows(&[vec![0.4], vec![-1.0], vec![0.4]]);
    let lp = to_vec(&m.density_joint(&from_rows(&xs), &w).unwrap());
    for ((x, w), l) in xs.iter().zip([0.4f64, -1.0, 0.4]).zip(&lp) {
        let expect = factorized_log_p(x, 0.7) - 0.5 * w * w - 0.5 * LN_2PI;
        assert!((l - expect).abs() < 1e-12);
    }
    // Symmetric under x -> -x.
    assert!((lp[0] - lp[2]).abs() < 1e-12);
}

#[test]
fn exact_proposal_has_zero_variance_even_at_k_1() {
    let m = factorized(2, 0.7, 0.0);
    let xs = sample_rows(20, 2, 0.7, 1);
    let truth: Vec<f64> = xs.iter().map(|x| factorized_log_p(x, 0.7)).collect();
    let cfg = ImportanceConfig::new(1, 1, 1.0).unwrap();
    for seed in 0..5 {
        let est = importance_log_marginal(&m, &from_rows(&xs), &cfg, &mut rng(seed)).unwrap();
        for (e, t) in est.iter().zip(&truth) {
            assert!((e - t).abs() < 1e-12);
        }
    }
}

fn sample_rows(rows: usize, cols: usize, std: f64, seed: u64) -> Vec<Vec<f64>> {
    to_rows(&randn(rows, cols, std, seed))
}

/// Errors of `reps` single-round estimates at one point, each with `k` samples.
fn repeated(m: &AefModel, x: &[f64], truth: f64, k: usize, eps: f64, reps: usize, seed: u64) -> Vec<f64> {
    let batch = from_rows(&vec![x.to_vec(); reps]);
    let est = importance_log_marginal(m, &batch, &ImportanceConfig::new(k, 1, eps).unwrap(), &mut rng(seed)).unwrap();
    est.iter().map(|e| e - truth).collect()
}

#[test]
fn estimates_are_lower_bounds_in_expectation_and_grow_with_k() {
    let m = factorized(2, 0.7, 0.8);
    let x = [0.4, -0.5];
    let truth = factorized_log_p(&x, 0.7);
    let mut prev: Option<(f64, f64)> = None;
    for (i, k) in [1usize, 4, 16, 64].into_iter().enumerate() {
        let err = repeated(&m, &x, truth, k, 1.5, 4000, 10 + i as u64);
        let (mu, se) = (mean(&err), std_err(&err));
        assert!(mu <= 3.0 * se, "K={k}: mean error {mu} above zero by more than 3σ ({se})");
        if let Some((pm, ps)) = prev {
            assert!(mu >= pm - 3.0 * (se * se + ps * ps).sqrt(), "K={k}: estimate fell from {pm} to {mu}");
        }
        prev = Some((mu, se));
    }
}

#[test]
fn tuned_epsilon_is_within_one_grid_step_of_the_optimum() {
    // With h equal to the posterior mean, the posterior N(0, 1) is the optimal proposal.
    let m = factorized(3, 0.5, 0.0);
    let grid: Vec<f64> = (0..9).map(|i| 10f64.powf(-2.0 + 0.5 * i as f64)).collect();
    let val = from_rows(&sample_rows(64, 3, 0.5, 2));
    let (eps, scores) = tune_epsilon(&m, &val, &grid, 16, 1, &mut rng(3)).unwrap();
    let pos = grid.iter().position(|g| *g == eps).unwrap();
    let optimum = grid.iter().position(|g| (*g - 1.0).abs() < 1e-12).unwrap();
    assert!(pos.abs_diff(optimum) <= 1, "picked ε = {eps}, scores {scores:?}");
}

/// VAE on the linear-Gaussian oracle with a deliberately imperfect posterior.
fn linear_vae() -> VaeModel {
    let lg = oracle();
    let m = VaeModel::new(&linear_config(Variant::Vae, lg.sigma, true), DataShape::vector(3), &mut rng(5)).unwrap();
    set_linear_decoder(m.params(), &lg);
    let k = lg.posterior_gain();
    let (_, tau) = lg.posterior(&lg.b);
    set_linear_encoder(m.params(), &k, 0.2, (1.5 * tau).ln());
    m
}

#[test]
fn single_sample_elbo_bounds_the_is_estimate() {
    let m = linear_vae();
    let xs = oracle().sample(200, 6);
    let x = from_rows(&xs);
    let mut r = rng(7);
    let reps = 50;
    let elbo: Vec<f64> = (0..reps)
        .flat_map(|_| {
            let noise = m.draw_noise(xs.len(), &mut r).unwrap();
            to_vec(&m.log_weight(&x, &noise).unwrap())
        })
        .collect();
    let ll = importance_log_marginal_vae(&m, &x, 256, 2, &mut r).unwrap();
    let gap: Vec<f64> = ll.iter().cycle().zip(&elbo).map(|(l, e)| l - e).collect();
    assert!(mean(&gap) > 3.0 * std_err(&gap), "ELBO is not below the IS estimate");
}

#[test]
fn vae_log_weight_matches_closed_form_elbo_in_expectation() {
    let m = linear_vae();
    let lg = oracle();
    let x = vec![0.9, -0.4, 0.2];
    let (k, (_, tau)) = (lg.posterior_gain(), lg.posterior(&lg.b));
    let mu: f64 = k.iter().zip(&x).map(|(k, x)| k * x).sum::<f64>() + 0.2;
    let s = 1.5 * tau;
    // E_q[log p(x|z) + log p(z) − log q(z|x)] for Gaussian q = N(mu, s²).
    let s2 = lg.sigma * lg.sigma;
    let recon: f64 = x
        .iter()
        .zip(lg.c.iter().zip(&lg.b))
        .map(|(xi, (c, b))| -0.5 * ((xi - c * mu - b).powi(2) + c * c * s * s) / s2 - 0.5 * (LN_2PI + s2.ln()))
        .sum();
    let prior = -0.5 * (mu * mu + s * s) - 0.5 * LN_2PI;
    let entropy = 0.5 * (LN_2PI + 1.0) + s.ln();
    let closed = recon + prior + entropy;
    let n = 20000;
    let noise = randn(n, 1, 1.0, 8);
    let xb = from_rows(&vec![x.clone(); n]);
    let lw = to_vec(&m.log_weight(&xb, &noise).unwrap());
    let (mu_hat, se) = (mean(&lw), std_err(&lw));
    assert!((mu_hat - closed).abs() < 4.0 * se, "{mu_hat} ± {se} vs {closed}");
}
