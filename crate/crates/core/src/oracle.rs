//! Independent checks on the inference stack: exact posterior moments by
//! dense-grid integration for tiny models, conjugate closed forms, and a
//! recovery score against simulated ground truth.

use serde::{Deserialize, Serialize};

use crate::align::{component_usage, hungarian, ConsensusEstimate};
use crate::analytics::{token_posteriors, TokenPosterior};
use crate::corpus::{Corpus, SoundChangeInstance};
use crate::error::{ModelError, Result};
use crate::genmodel::{
    log_joint, simulate, stick_breaking, HyperPrior, Hyperparams, ModelParams, ModelShape, SimShape,
};
use crate::math::{argmax, entropy};
use crate::pipeline::fit_pipeline;
use crate::vinfer::FitConfig;

pub const MAX_GRID_CELLS: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points_per_dim: usize,
    pub delta: f64,
    pub gamma: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_dim: 50,
            delta: 1.0,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMoments {
    pub beta_raw: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<Vec<f64>>>,
    pub cells: usize,
}

/// Stick fractions `z ∈ (0,1)^{K−1}` to a simplex; returns the log-Jacobian
/// `Σ ln(rest_k)` of the map.
fn sticks_to_simplex(z: &[f64], out: &mut Vec<f64>) -> f64 {
    out.clear();
    let mut rest = 1.0_f64;
    let mut jac = 0.0;
    for &f in z {
        jac += rest.ln();
        out.push(rest * f);
        rest *= 1.0 - f;
    }
    out.push(rest);
    jac
}

/// Posterior means of β′, θ and φ by midpoint integration over the stick
/// coordinates of every free block, with δ and γ held at `spec`'s values.
pub fn grid_posterior_moments(corpus: &Corpus, hp: &Hyperparams, spec: &GridSpec) -> Result<GridMoments> {
    let t = hp.truncation;
    let shape = ModelShape::of(corpus, t);
    if t > 2 || shape.languages > 2 || shape.environments() > 2 {
        return Err(ModelError::Config(format!(
            "grid oracle needs T <= 2, L <= 2, S <= 2; got T={t}, L={}, S={}",
            shape.languages,
            shape.environments()
        )));
    }
    let n = spec.points_per_dim.max(1);
    let theta_dims = t - 1;
    let phi_dims: Vec<usize> = shape.outcomes.iter().map(|k| k - 1).collect();
    let dims = (t - 1) + shape.languages * theta_dims + t * phi_dims.iter().sum::<usize>();
    let cells = (n as f64).powi(dims as i32);
    if cells > MAX_GRID_CELLS {
        return Err(ModelError::GridTooLarge {
            cells,
            limit: MAX_GRID_CELLS,
        });
    }
    let cells = n.pow(dims as u32);
    let fixed = Hyperparams {
        delta: HyperPrior::Fixed(spec.delta),
        gamma: HyperPrior::Fixed(spec.gamma),
        ..*hp
    };
    let template = ModelParams {
        beta_raw: vec![0.5; t - 1],
        beta: vec![1.0 / t as f64; t],
        theta: vec![vec![0.0; t]; shape.languages],
        phi: vec![shape.outcomes.iter().map(|&k| vec![0.0; k]).collect(); t],
        delta: spec.delta,
        gamma: spec.gamma,
    };

    let eval_chunk = |chunk: usize| -> Result<Accumulator> {
        let per_chunk = cells / n.max(1);
        let mut acc = Accumulator::new(&template);
        let mut params = template.clone();
        let mut coords = vec![0.0; dims];
        let mut buf = Vec::new();
        for local in 0..per_chunk.max(if dims == 0 { 1 } else { 0 }) {
            let mut idx = chunk * per_chunk + local;
            for c in coords.iter_mut().rev() {
                *c = ((idx % n) as f64 + 0.5) / n as f64;
                idx /= n;
            }
            let mut pos = 0;
            params.beta_raw.copy_from_slice(&coords[..t - 1]);
            params.beta = stick_breaking(&params.beta_raw)?;
            pos += t - 1;
            let mut log_jac = 0.0;
            for row in params.theta.iter_mut() {
                log_jac += sticks_to_simplex(&coords[pos..pos + theta_dims], &mut buf);
                row.copy_from_slice(&buf);
                pos += theta_dims;
            }
            for comp in params.phi.iter_mut() {
                for (row, &k) in comp.iter_mut().zip(&phi_dims) {
                    log_jac += sticks_to_simplex(&coords[pos..pos + k], &mut buf);
                    row.copy_from_slice(&buf);
                    pos += k;
                }
            }
            let ld = log_joint(&params, corpus, &fixed)? + log_jac;
            acc.add(ld, &params);
        }
        Ok(acc)
    };

    let chunks = if dims == 0 { 1 } else { n };
    let parts = map_chunks(chunks, eval_chunk)?;
    let mut total = Accumulator::new(&template);
    for p in parts {
        total.merge(p);
    }
    let mut m = total.finish();
    m.cells = cells;
    Ok(m)
}

#[cfg(feature = "parallel")]
fn map_chunks<F>(chunks: usize, f: F) -> Result<Vec<Accumulator>>
where
    F: Fn(usize) -> Result<Accumulator> + Sync + Send,
{
    use rayon::prelude::*;
    (0..chunks).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_chunks<F>(chunks: usize, f: F) -> Result<Vec<Accumulator>>
where
    F: Fn(usize) -> Result<Accumulator>,
{
    (0..chunks).map(f).collect()
}

/// Weighted sums relative to a running maximum log weight.
struct Accumulator {
    max_log: f64,
    weight: f64,
    sums: ModelParams,
}

impl Accumulator {
    fn new(template: &ModelParams) -> Self {
        let mut sums = template.clone();
        zero(&mut sums);
        Self {
            max_log: f64::NEG_INFINITY,
            weight: 0.0,
            sums,
        }
    }

    fn rescale(&mut self, new_max: f64) {
        if self.max_log == f64::NEG_INFINITY {
            self.max_log = new_max;
            return;
        }
        let f = (self.max_log - new_max).exp();
        self.weight *= f;
        for_each_value(&mut self.sums, |x| *x *= f);
        self.max_log = new_max;
    }

    fn add(&mut self, log_w: f64, p: &ModelParams) {
        if log_w > self.max_log {
            self.rescale(log_w);
        }
        let w = (log_w - self.max_log).exp();
        self.weight += w;
        axpy(&mut self.sums, w, p);
    }

    fn merge(&mut self, mut other: Accumulator) {
        if other.max_log == f64::NEG_INFINITY {
            return;
        }
        if other.max_log > self.max_log {
            self.rescale(other.max_log);
        } else {
            other.rescale(self.max_log);
        }
        self.weight += other.weight;
        axpy(&mut self.sums, 1.0, &other.sums);
    }

    fn finish(mut self) -> GridMoments {
        let w = self.weight;
        for_each_value(&mut self.sums, |x| *x /= w);
        GridMoments {
            beta_raw: self.sums.beta_raw,
            theta: self.sums.theta,
            phi: self.sums.phi,
            cells: 0,
        }
    }
}

fn for_each_value(p: &mut ModelParams, mut f: impl FnMut(&mut f64)) {
    p.beta_raw.iter_mut().for_each(&mut f);
    p.theta.iter_mut().flatten().for_each(&mut f);
    p.phi.iter_mut().flatten().flatten().for_each(&mut f);
}

fn zero(p: &mut ModelParams) {
    for_each_value(p, |x| *x = 0.0);
}

fn axpy(acc: &mut ModelParams, w: f64, p: &ModelParams) {
    acc.beta_raw.iter_mut().zip(&p.beta_raw).for_each(|(a, b)| *a += w * b);
    acc.theta
        .iter_mut()
        .flatten()
        .zip(p.theta.iter().flatten())
        .for_each(|(a, b)| *a += w * b);
    acc.phi
        .iter_mut()
        .flatten()
        .flatten()
        .zip(p.phi.iter().flatten().flatten())
        .for_each(|(a, b)| *a += w * b);
}

/// Dirichlet-categorical posterior mean `(α + n_o) / (Kα + N)`.
pub fn conjugate_dirichlet_mean(alpha: f64, counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let denom = counts.len() as f64 * alpha + total as f64;
    counts.iter().map(|&c| (alpha + c as f64) / denom).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub tokens: usize,
    /// Token-assignment accuracy under the best truth→inferred matching.
    pub accuracy: f64,
    /// `matching[k]`: inferred component matched to true component k.
    pub matching: Vec<usize>,
    pub components_above_5pct: usize,
    pub theta_mae: f64,
}

/// Score inferred token posteriors against simulated labels.
pub fn recovery_score(
    truth_labels: &[usize],
    truth_theta: &[Vec<f64>],
    consensus: &ConsensusEstimate,
    posteriors: &[TokenPosterior],
    language_shares: &[f64],
) -> Result<RecoveryReport> {
    if truth_labels.len() != posteriors.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} labels, {} posteriors",
            truth_labels.len(),
            posteriors.len()
        )));
    }
    let k_true = truth_theta.first().map_or(0, Vec::len);
    let t = consensus.truncation();
    let n = k_true.max(t);
    let mut confusion = vec![vec![0.0; n]; n];
    for (&z, post) in truth_labels.iter().zip(posteriors) {
        confusion[z][argmax(&post.probs)] += 1.0;
    }
    let cost: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| row.iter().map(|c| -c).collect())
        .collect();
    let assign = hungarian(&cost);
    let hits: f64 = (0..n).map(|k| confusion[k][assign[k]]).sum();
    let tokens = truth_labels.len();
    let matching: Vec<usize> = assign[..k_true].to_vec();

    let mut abs_err = 0.0;
    let mut count = 0usize;
    for (truth_row, inferred_row) in truth_theta.iter().zip(&consensus.theta) {
        for (k, &v) in truth_row.iter().enumerate() {
            let inferred = inferred_row.get(matching[k]).copied().unwrap_or(0.0);
            abs_err += (v - inferred).abs();
            count += 1;
        }
    }
    let usage = if consensus.usage.len() == t {
        consensus.usage.clone()
    } else {
        component_usage(&consensus.theta, language_shares)
    };
    Ok(RecoveryReport {
        tokens,
        accuracy: if tokens == 0 { 0.0 } else { hits / tokens as f64 },
        matching,
        components_above_5pct: usage.iter().filter(|&&u| u > 0.05).count(),
        theta_mae: if count == 0 { 0.0 } else { abs_err / count as f64 },
    })
}

/// One environment with alphabet {A, B}, three observed A's, `T = 1` and a
/// flat sound-change prior; the posterior of φ is Beta(4, 1) in closed form.
pub fn conjugate_case() -> (Corpus, Hyperparams) {
    let rows = vec![SoundChangeInstance::new("L", "e", "s", "A"); 3];
    let key = rows[0].env_key();
    let corpus = Corpus::with_declared_outcomes(rows, vec![], vec![(key, "B".into())]);
    let hp = Hyperparams {
        alpha: 1.0,
        delta: HyperPrior::Fixed(1.0),
        gamma: HyperPrior::Fixed(1.0),
        truncation: 1,
    };
    (corpus, hp)
}

/// Two components, one language, one environment with outcomes {A, B}:
/// three A's and one B, δ = γ = 1 fixed.
pub fn grid_case() -> (Corpus, Hyperparams) {
    let mut rows = vec![SoundChangeInstance::new("L", "e", "s", "A"); 3];
    rows.push(SoundChangeInstance::new("L", "e", "s", "B"));
    let hp = Hyperparams {
        alpha: 1.0,
        delta: HyperPrior::Fixed(1.0),
        gamma: HyperPrior::Fixed(1.0),
        truncation: 2,
    };
    (Corpus::from_instances(rows), hp)
}

/// A simulated corpus from three well-separated components and the fit
/// configuration used to recover them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySetup {
    pub truth: Hyperparams,
    pub shape: SimShape,
    pub simulation_seed: u64,
    pub fit: Hyperparams,
    pub config: FitConfig,
}

impl RecoverySetup {
    /// 20 languages, 40 environments with 10 outcomes each, 30 rows per
    /// language. Small δ keeps each language close to one component, and
    /// the seed gives every true component at least a fifth of the tokens.
    pub fn standard(iterations: usize, seed: u64) -> Self {
        Self {
            truth: Hyperparams {
                alpha: 1e-4,
                delta: HyperPrior::Fixed(0.1),
                gamma: HyperPrior::Fixed(1.0),
                truncation: 3,
            },
            shape: SimShape {
                languages: 20,
                environments: 40,
                outcomes_per_env: 10,
                tokens_per_language: 30,
            },
            simulation_seed: 20,
            fit: Hyperparams::default(),
            config: FitConfig {
                iterations,
                mc_samples: 4,
                seed,
                ..FitConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub report: RecoveryReport,
    pub truth_usage: Vec<f64>,
    /// Components above 5% usage in each run's variational-mean θ.
    pub run_components: Vec<usize>,
    pub run_accuracy: Vec<f64>,
    /// Mean entropy of the consensus φ rows.
    pub phi_entropy: f64,
}

pub fn run_recovery(setup: &RecoverySetup, parallel_runs: usize) -> Result<RecoveryOutcome> {
    let (corpus, truth) = simulate(&setup.truth, &setup.shape, setup.simulation_seed)?;
    let shares = corpus.language_shares();
    let outputs = fit_pipeline(&corpus, &setup.fit, &setup.config, parallel_runs)?;
    let report = recovery_score(
        &truth.labels,
        &truth.params.theta,
        &outputs.consensus,
        &outputs.report.posteriors,
        &shares,
    )?;
    let mut run_components = Vec::new();
    let mut run_accuracy = Vec::new();
    for run in &outputs.runs {
        let single = ConsensusEstimate::from_params(&run.map_point, &shares);
        let posts = token_posteriors(&single, &corpus)?;
        let r = recovery_score(&truth.labels, &truth.params.theta, &single, &posts, &shares)?;
        run_components.push(r.components_above_5pct);
        run_accuracy.push(r.accuracy);
    }
    let rows: Vec<&Vec<f64>> = outputs.consensus.phi.iter().flatten().collect();
    let phi_entropy = rows.iter().map(|r| entropy(r)).sum::<f64>() / rows.len().max(1) as f64;
    Ok(RecoveryOutcome {
        report,
        truth_usage: component_usage(&truth.params.theta, &shares),
        run_components,
        run_accuracy,
        phi_entropy,
    })
}
