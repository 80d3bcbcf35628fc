//! Mean-field Gaussian stochastic variational inference.
//!
//! The variational family is `q(u) = Π_d Normal(μ_d, σ_d)` over the
//! unconstrained vector of [`crate::transforms`]. The objective is
//!
//! ```text
//! ELBO = E_q[ log p(T(u)) + log|J_T(u)| ] + Σ_d ln σ_d + D/2 · ln(2πe)
//! ```
//!
//! estimated with reparameterized draws `u = μ + σ ⊙ η`, and maximized with
//! Adam over `(μ, ln σ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{ModelError, Result};
use crate::genmodel::{Hyperparams, ModelParams, ModelShape};
use crate::math::{self, digamma, ln_gamma, logsumexp};
use crate::seeding::{self, Stream};
use crate::transforms::{self, Cotangent, Layout};

/// Log density of the model pushed forward to unconstrained space.
#[derive(Debug, Clone)]
pub struct Model {
    layout: Layout,
    hp: Hyperparams,
    /// Distinct `(language, env, outcome)` triples with multiplicities.
    triples: Vec<(usize, usize, usize, f64)>,
    /// `ln Γ(Kα) − K ln Γ(α)` per environment.
    phi_norm: Vec<f64>,
}

impl Model {
    pub fn new(corpus: &Corpus, hp: &Hyperparams) -> Result<Self> {
        hp.validate()?;
        let layout = Layout::new(ModelShape::of(corpus, hp.truncation), hp);
        let mut counts = std::collections::BTreeMap::new();
        for tok in corpus.tokens() {
            *counts.entry((tok.language, tok.env, tok.outcome)).or_insert(0usize) += 1;
        }
        let triples = counts
            .into_iter()
            .map(|((l, s, o), c)| (l, s, o, c as f64))
            .collect();
        let phi_norm = layout
            .shape()
            .outcomes
            .iter()
            .map(|&k| ln_gamma(k as f64 * hp.alpha) - k as f64 * ln_gamma(hp.alpha))
            .collect();
        Ok(Self {
            layout,
            hp: *hp,
            triples,
            phi_norm,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        self.evaluate(u, false).map(|(v, _)| v)
    }

    /// `log p(T(u)) + log|J(u)|` and its gradient.
    pub fn log_density_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.evaluate(u, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn evaluate(&self, u: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let lay = &self.layout;
        let hp = &self.hp;
        let up = transforms::unpack(lay, u)?;
        let t = lay.truncation();
        let n_lang = lay.languages();
        let (delta, gamma) = (up.delta, up.gamma);
        let mut cot = Cotangent::zeros(lay);

        // hyperpriors
        let mut lp = hp.delta.ln_pdf(delta) + hp.gamma.ln_pdf(gamma);
        cot.delta += hp.delta.d_ln_pdf(delta);
        cot.gamma += hp.gamma.d_ln_pdf(gamma);

        // β′ ~ Beta(1, γ)
        let ln_gamma_param = gamma.ln();
        for (k, &l1z) in up.log1m_beta_raw.iter().enumerate() {
            lp += ln_gamma_param + (gamma - 1.0) * l1z;
            cot.log1m_beta_raw[k] = gamma - 1.0;
            cot.gamma += 1.0 / gamma + l1z;
        }

        // θ_ℓ ~ Dirichlet(δβ)
        if n_lang > 0 {
            let nl = n_lang as f64;
            let conc: Vec<f64> = up.beta.iter().map(|b| (delta * b).max(1e-300)).collect();
            let mut sum_log_theta = vec![0.0; t];
            for row in up.log_theta.chunks(t) {
                for (acc, &lt) in sum_log_theta.iter_mut().zip(row) {
                    *acc += lt;
                }
            }
            lp += nl * ln_gamma(delta);
            cot.delta += nl * digamma(delta);
            for k in 0..t {
                let psi = digamma(conc[k]);
                lp += -nl * ln_gamma(conc[k]) + (conc[k] - 1.0) * sum_log_theta[k];
                let d_conc = sum_log_theta[k] - nl * psi;
                cot.log_beta[k] += up.beta[k] * delta * d_conc;
                cot.delta += up.beta[k] * d_conc;
            }
            for row in cot.log_theta.chunks_mut(t) {
                for (g, c) in row.iter_mut().zip(&conc) {
                    *g += c - 1.0;
                }
            }
        }

        // φ_t,s ~ Dirichlet(α)
        for c in 0..t {
            for s in 0..lay.environments() {
                let off = lay.phi_value_offset(c, s);
                let k = lay.shape().outcomes[s];
                lp += self.phi_norm[s]
                    + (hp.alpha - 1.0) * up.log_phi[off..off + k].iter().sum::<f64>();
                for g in &mut cot.log_phi[off..off + k] {
                    *g += hp.alpha - 1.0;
                }
            }
        }

        // marginal likelihood, z summed out
        let mut terms = vec![0.0; t];
        for &(l, s, o, count) in &self.triples {
            for (c, term) in terms.iter_mut().enumerate() {
                *term = up.log_theta[l * t + c] + up.log_phi[lay.phi_value_offset(c, s) + o];
            }
            let lse = logsumexp(&terms);
            lp += count * lse;
            if want_grad {
                for (c, &term) in terms.iter().enumerate() {
                    let r = count * (term - lse).exp();
                    cot.log_theta[l * t + c] += r;
                    cot.log_phi[lay.phi_value_offset(c, s) + o] += r;
                }
            }
        }

        lp += up.jacobian.total();
        if !lp.is_finite() {
            return Err(ModelError::NonFiniteDensity(format!(
                "log density {lp} (delta {delta}, gamma {gamma})"
            )));
        }
        if !want_grad {
            return Ok((lp, None));
        }
        let grad = transforms::pullback(lay, &up, &cot, true);
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteGradient { index });
        }
        Ok((lp, Some(grad)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
}

impl VariationalState {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Self {
        let d = mu.len();
        assert_eq!(d, log_sigma.len(), "mu and log_sigma dimensions differ");
        Self {
            mu,
            log_sigma,
            adam_m: vec![0.0; 2 * d],
            adam_v: vec![0.0; 2 * d],
            step: 0,
        }
    }

    /// `μ ~ Normal(0, 0.1)`, `ln σ = −1`.
    pub fn initialize<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mu = (0..dim).map(|_| 0.1 * math::standard_normal(rng)).collect();
        Self::new(mu, vec![-1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Closed-form entropy of the Gaussian.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        self.log_sigma.iter().sum::<f64>()
            + 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln())
    }

    pub fn reparameterize(&self, eta: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eta)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect()
    }

    pub fn sample_eta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|_| math::standard_normal(rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: usize,
    pub relative_tol: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            window: 1000,
            relative_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub runs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub mc_samples: usize,
    pub posterior_draws: usize,
    pub seed: u64,
    pub convergence: Option<Convergence>,
    /// Steps between ELBO checkpoints.
    pub checkpoint_every: usize,
    /// Checkpoints averaged by the smoothed trace.
    pub smoothing_window: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            runs: 4,
            learning_rate: 0.01,
            adam_beta1: 0.8,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            mc_samples: 1,
            posterior_draws: 500,
            seed: 1,
            convergence: None,
            checkpoint_every: 100,
            smoothing_window: 100,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if self.runs < 1 {
            return bad("runs must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.mc_samples < 1 || self.checkpoint_every < 1 || self.smoothing_window < 1 {
            return bad("mc_samples, checkpoint_every and smoothing_window must be >= 1");
        }
        if let Some(c) = self.convergence {
            if c.window < 1 || !(c.relative_tol > 0.0) {
                return bad("convergence window must be >= 1 and tolerance > 0");
            }
        }
        Ok(())
    }
}

/// Content hash of a resolved configuration.
pub fn config_digest(config: &FitConfig, hp: &Hyperparams) -> String {
    let canonical = serde_json::to_string(&(config, hp)).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboCheckpoint {
    pub step: usize,
    /// Mean per-step ELBO estimate over the preceding block of steps.
    pub block_mean: f64,
    /// Running mean of the most recent block means.
    pub smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub run: usize,
    pub seed: u64,
    pub state: VariationalState,
    pub elbo_trace: Vec<ElboCheckpoint>,
    pub draws: Vec<ModelParams>,
    /// Constrained parameters at the variational mean.
    pub map_point: ModelParams,
    pub config_digest: String,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Per-draw values of `log p(T(u)) + log|J|` for `n` reparameterized draws.
pub fn log_density_samples(
    state: &VariationalState,
    model: &Model,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seeding::stream_rng(seed, Stream::Estimate);
    (0..n)
        .map(|_| {
            let eta = state.sample_eta(&mut rng);
            model.log_density(&state.reparameterize(&eta))
        })
        .collect()
}

/// Monte-Carlo ELBO with `n` draws; deterministic in `seed`.
pub fn elbo_estimate(state: &VariationalState, model: &Model, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(ModelError::Config("need at least one draw".into()));
    }
    let values = log_density_samples(state, model, n, seed)?;
    Ok(values.iter().sum::<f64>() / n as f64 + state.entropy())
}

/// ELBO and its gradient for explicit noise vectors. The gradient is laid
/// out as `[∂/∂μ (D), ∂/∂ln σ (D)]`.
pub fn elbo_with_noise(
    state: &VariationalState,
    model: &Model,
    etas: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let d = state.dim();
    if etas.is_empty() {
        return Err(ModelError::Config("need at least one draw".into()));
    }
    let mut grad = vec![0.0; 2 * d];
    let mut value = 0.0;
    let scale = 1.0 / etas.len() as f64;
    for eta in etas {
        let u = state.reparameterize(eta);
        let (v, g) = model.log_density_grad(&u)?;
        value += scale * v;
        for i in 0..d {
            grad[i] += scale * g[i];
            grad[d + i] += scale * g[i] * state.log_sigma[i].exp() * eta[i];
        }
    }
    for g in &mut grad[d..] {
        *g += 1.0;
    }
    Ok((value + state.entropy(), grad))
}

/// Reparameterization gradient of the `n`-draw ELBO estimate.
pub fn grad_elbo(state: &VariationalState, model: &Model, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seeding::stream_rng(seed, Stream::Estimate);
    let etas: Vec<Vec<f64>> = (0..n.max(1)).map(|_| state.sample_eta(&mut rng)).collect();
    elbo_with_noise(state, model, &etas).map(|(_, g)| g)
}

/// Ascent step of Adam on `(μ, ln σ)`.
pub fn adam_step(state: &mut VariationalState, grad: &[f64], config: &FitConfig) {
    let d = state.dim();
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, &g) in grad.iter().enumerate() {
        let m = &mut state.adam_m[i];
        let v = &mut state.adam_v[i];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let delta = config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.adam_epsilon);
        if i < d {
            state.mu[i] += delta;
        } else {
            state.log_sigma[i - d] += delta;
        }
    }
}

/// `n` constrained draws from `q`.
pub fn draw_posterior(
    state: &VariationalState,
    layout: &Layout,
    n: usize,
    seed: u64,
) -> Result<Vec<ModelParams>> {
    let mut rng = seeding::stream_rng(seed, Stream::Draws);
    (0..n)
        .map(|_| {
            let eta = state.sample_eta(&mut rng);
            transforms::to_constrained(layout, &state.reparameterize(&eta)).map(|(p, _)| p)
        })
        .collect()
}

/// Elementwise mean of constrained draws.
pub fn mean_params(draws: &[ModelParams]) -> Option<ModelParams> {
    let first = draws.first()?;
    let mut acc = first.clone();
    for d in &draws[1..] {
        add_assign(&mut acc, d);
    }
    let n = draws.len() as f64;
    scale(&mut acc, 1.0 / n);
    Some(acc)
}

fn add_assign(acc: &mut ModelParams, p: &ModelParams) {
    let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    add(&mut acc.beta_raw, &p.beta_raw);
    add(&mut acc.beta, &p.beta);
    for (a, b) in acc.theta.iter_mut().zip(&p.theta) {
        add(a, b);
    }
    for (ca, cb) in acc.phi.iter_mut().zip(&p.phi) {
        for (a, b) in ca.iter_mut().zip(cb) {
            add(a, b);
        }
    }
    acc.delta += p.delta;
    acc.gamma += p.gamma;
}

fn scale(p: &mut ModelParams, f: f64) {
    let sc = |a: &mut [f64]| a.iter_mut().for_each(|x| *x *= f);
    sc(&mut p.beta_raw);
    sc(&mut p.beta);
    p.theta.iter_mut().for_each(|r| sc(r));
    p.phi.iter_mut().flatten().for_each(|r| sc(r));
    p.delta *= f;
    p.gamma *= f;
}

/// Run one optimization from its own seed.
pub fn fit_run(model: &Model, config: &FitConfig, run: usize) -> Result<FitResult> {
    config.validate()?;
    let seed = seeding::run_seed(config.seed, run);
    let in_run = |step: usize| move |e: ModelError| ModelError::InRun {
        run,
        step,
        source: Box::new(e),
    };
    let mut state = VariationalState::initialize(model.dim(), &mut seeding::stream_rng(seed, Stream::Init));
    let mut noise = seeding::stream_rng(seed, Stream::Gradient);

    let mut trace: Vec<ElboCheckpoint> = Vec::new();
    let mut block_sum = 0.0;
    let mut block_len = 0usize;
    let mut window_sum = 0.0;
    let mut window_len = 0usize;
    let mut last_window: Option<f64> = None;
    let mut converged = false;
    let mut steps = 0;

    for step in 1..=config.iterations {
        let etas: Vec<Vec<f64>> = (0..config.mc_samples)
            .map(|_| state.sample_eta(&mut noise))
            .collect();
        let (elbo, grad) = elbo_with_noise(&state, model, &etas).map_err(in_run(step))?;
        adam_step(&mut state, &grad, config);
        steps = step;

        block_sum += elbo;
        block_len += 1;
        if block_len == config.checkpoint_every || step == config.iterations {
            let block_mean = block_sum / block_len as f64;
            let start = trace.len().saturating_sub(config.smoothing_window - 1);
            let recent = &trace[start..];
            let smoothed = (recent.iter().map(|c| c.block_mean).sum::<f64>() + block_mean)
                / (recent.len() + 1) as f64;
            trace.push(ElboCheckpoint {
                step,
                block_mean,
                smoothed,
            });
            block_sum = 0.0;
            block_len = 0;
        }

        if let Some(conv) = config.convergence {
            window_sum += elbo;
            window_len += 1;
            if window_len == conv.window {
                let mean = window_sum / window_len as f64;
                if let Some(prev) = last_window {
                    if ((mean - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < conv.relative_tol
                    {
                        converged = true;
                    }
                }
                last_window = Some(mean);
                window_sum = 0.0;
                window_len = 0;
                if converged {
                    break;
                }
            }
        }
    }
    if block_len > 0 {
        // convergence stop between checkpoints
        let block_mean = block_sum / block_len as f64;
        let start = trace.len().saturating_sub(config.smoothing_window - 1);
        let recent = &trace[start..];
        let smoothed = (recent.iter().map(|c| c.block_mean).sum::<f64>() + block_mean)
            / (recent.len() + 1) as f64;
        trace.push(ElboCheckpoint {
            step: steps,
            block_mean,
            smoothed,
        });
    }

    let layout = model.layout();
    let (map_point, _) = transforms::to_constrained(layout, &state.mu).map_err(in_run(steps))?;
    let draws = draw_posterior(&state, layout, config.posterior_draws, seed).map_err(in_run(steps))?;
    Ok(FitResult {
        run,
        seed,
        state,
        elbo_trace: trace,
        draws,
        map_point,
        config_digest: config_digest(config, model.hyperparams()),
        iterations_run: steps,
        converged,
    })
}

/// Fit `config.runs` independent initializations. Up to `parallel_runs` run
/// concurrently; results are identical to a sequential fit.
pub fn fit(
    corpus: &Corpus,
    hp: &Hyperparams,
    config: &FitConfig,
    parallel_runs: usize,
) -> Result<Vec<FitResult>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::Config("cannot fit an empty corpus".into()));
    }
    let model = Model::new(corpus, hp)?;
    run_all(&model, config, parallel_runs)
}

#[cfg(feature = "parallel")]
fn run_all(model: &Model, config: &FitConfig, parallel_runs: usize) -> Result<Vec<FitResult>> {
    use rayon::prelude::*;
    if parallel_runs <= 1 {
        return (0..config.runs).map(|r| fit_run(model, config, r)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel_runs)
        .build()
        .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..config.runs)
            .into_par_iter()
            .map(|r| fit_run(model, config, r))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn run_all(model: &Model, config: &FitConfig, _parallel_runs: usize) -> Result<Vec<FitResult>> {
    (0..config.runs).map(|r| fit_run(model, config, r)).collect()
}
