//! Browser bindings for the demo page: stick-breaking weights, a small
//! simulate-and-fit loop, and the per-token component posterior.
//!
//! Every export is a thin wrapper over a plain Rust function so the logic
//! can be tested natively.

use admix_core::align::component_usage;
use admix_core::genmodel::{self, HyperPrior, Hyperparams, SimShape};
use admix_core::oracle::recovery_score;
use admix_core::pipeline;
use admix_core::seeding::{stream_rng, Stream};
use admix_core::vinfer::FitConfig;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// GEM(γ) weights truncated at `t` components.
pub fn gem_weights(gamma: f64, t: usize, seed: u64) -> Result<Vec<f64>, String> {
    if !(gamma > 0.0) || t == 0 {
        return Err("need gamma > 0 and at least one component".into());
    }
    let mut rng = stream_rng(seed, Stream::Init);
    let sticks = genmodel::sample_gem_sticks(&mut rng, gamma, t);
    genmodel::stick_breaking(&sticks).map_err(|e| e.to_string())
}

/// `P(z = t | θ, φ) ∝ θ_t φ_t` for one token.
pub fn posterior(theta: &[f64], phi: &[f64]) -> Result<Vec<f64>, String> {
    if theta.len() != phi.len() || theta.is_empty() {
        return Err("theta and phi must have the same nonzero length".into());
    }
    let w: Vec<f64> = theta.iter().zip(phi).map(|(a, b)| a.max(0.0) * b.max(0.0)).collect();
    let z: f64 = w.iter().sum();
    if !(z > 1e-300) {
        return Err("product has no mass".into());
    }
    Ok(w.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct DemoSpec {
    pub languages: usize,
    pub environments: usize,
    pub tokens: usize,
    pub true_components: usize,
    pub delta: f64,
    pub truncation: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// Simulate a corpus, fit it with one run, and describe both as JSON.
pub fn simulate_and_fit(spec: DemoSpec) -> Result<String, String> {
    let truth_hp = Hyperparams {
        alpha: 1e-4,
        delta: HyperPrior::Fixed(spec.delta),
        gamma: HyperPrior::Fixed(1.0),
        truncation: spec.true_components,
    };
    let shape = SimShape {
        languages: spec.languages,
        environments: spec.environments,
        outcomes_per_env: 10,
        tokens_per_language: spec.tokens,
    };
    let (corpus, truth) =
        genmodel::simulate(&truth_hp, &shape, spec.seed).map_err(|e| e.to_string())?;
    let hp = Hyperparams {
        truncation: spec.truncation,
        ..Hyperparams::default()
    };
    let config = FitConfig {
        iterations: spec.iterations,
        runs: 1,
        mc_samples: 4,
        posterior_draws: 20,
        seed: spec.seed,
        checkpoint_every: (spec.iterations / 50).max(1),
        smoothing_window: 1,
        ..FitConfig::default()
    };
    let out = pipeline::fit_pipeline(&corpus, &hp, &config, 1).map_err(|e| e.to_string())?;
    let shares = corpus.language_shares();
    let score = recovery_score(
        &truth.labels,
        &truth.params.theta,
        &out.consensus,
        &out.report.posteriors,
        &shares,
    )
    .map_err(|e| e.to_string())?;
    let truth_usage = component_usage(&truth.params.theta, &shares);
    Ok(json!({
        "languages": corpus.table().languages,
        "truth": { "theta": truth.params.theta, "usage": truth_usage },
        "fit": { "theta": out.consensus.theta, "usage": out.consensus.usage },
        "matching": score.matching,
        "accuracy": score.accuracy,
        "elbo": out.runs[0].elbo_trace.iter().map(|c| [c.step as f64, c.block_mean]).collect::<Vec<_>>(),
    })
    .to_string())
}

#[wasm_bindgen(js_name = gemWeights)]
pub fn gem_weights_js(gamma: f64, t: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    gem_weights(gamma, t, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = stickBreaking)]
pub fn stick_breaking_js(fractions: Vec<f64>) -> Result<Vec<f64>, JsError> {
    genmodel::stick_breaking(&fractions).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = tokenPosterior)]
pub fn token_posterior_js(theta: Vec<f64>, phi: Vec<f64>) -> Result<Vec<f64>, JsError> {
    posterior(&theta, &phi).map_err(|e| JsError::new(&e))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = simulateAndFit)]
pub fn simulate_and_fit_js(
    languages: usize,
    environments: usize,
    tokens: usize,
    true_components: usize,
    delta: f64,
    truncation: usize,
    iterations: usize,
    seed: u32,
) -> Result<String, JsError> {
    simulate_and_fit(DemoSpec {
        languages,
        environments,
        tokens,
        true_components,
        delta,
        truncation,
        iterations,
        seed: seed as u64,
    })
    .map_err(|e| JsError::new(&e))
}
