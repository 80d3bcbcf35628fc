//! The truncated stick-breaking HDP over categorical sound changes.
//!
//! ```text
//! β′_t ~ Beta(1, γ)                   t < T
//! β     = stick_breaking(β′)
//! θ_ℓ   ~ Dirichlet(δ β)              per language
//! φ_t,s ~ Dirichlet(α · 1)            per component and environment
//! z_i   ~ Categorical(θ_ℓi)
//! y_i   ~ Categorical(φ_zi,xi)
//! ```
//!
//! `δ` and `γ` carry Gamma priors (default Gamma(1, 1)) or are held fixed;
//! `α` is always fixed. The component label `z` is summed out of the joint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SoundChangeInstance};
use crate::error::{ModelError, Result};
use crate::math::{self, clamped_ln, ln_gamma};

/// Prior on a positive hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperPrior {
    Gamma { shape: f64, rate: f64 },
    Fixed(f64),
}

impl HyperPrior {
    pub fn is_free(&self) -> bool {
        matches!(self, HyperPrior::Gamma { .. })
    }

    /// Log density at `x`; zero for a fixed value.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            HyperPrior::Gamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
            HyperPrior::Fixed(_) => 0.0,
        }
    }

    /// d/dx of `ln_pdf`.
    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        match *self {
            HyperPrior::Gamma { shape, rate } => (shape - 1.0) / x - rate,
            HyperPrior::Fixed(_) => 0.0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            HyperPrior::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            HyperPrior::Fixed(v) => v > 0.0 && v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("invalid prior for {name}: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Symmetric Dirichlet concentration of every φ row.
    pub alpha: f64,
    pub delta: HyperPrior,
    pub gamma: HyperPrior,
    /// Truncation level: the maximum number of components.
    pub truncation: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            delta: HyperPrior::Gamma {
                shape: 1.0,
                rate: 1.0,
            },
            gamma: HyperPrior::Gamma {
                shape: 1.0,
                rate: 1.0,
            },
            truncation: 10,
        }
    }
}

impl Hyperparams {
    /// A truncation of 1 is accepted: it collapses the model to a single
    /// component, which is what the conjugate checks use.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.truncation == 0 {
            return Err(ModelError::Config("truncation must be >= 1".into()));
        }
        self.delta.validate("delta")?;
        self.gamma.validate("gamma")
    }
}

/// Dimensions of a model bound to a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub truncation: usize,
    pub languages: usize,
    pub outcomes: Vec<usize>,
}

impl ModelShape {
    pub fn new(truncation: usize, languages: usize, outcomes: Vec<usize>) -> Self {
        Self {
            truncation,
            languages,
            outcomes,
        }
    }

    pub fn of(corpus: &Corpus, truncation: usize) -> Self {
        Self::new(
            truncation,
            corpus.table().num_languages(),
            corpus.table().outcome_counts(),
        )
    }

    pub fn environments(&self) -> usize {
        self.outcomes.len()
    }
}

/// One point in constrained parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Stick fractions β′, length T − 1.
    pub beta_raw: Vec<f64>,
    /// Global component weights β, length T.
    pub beta: Vec<f64>,
    /// `theta[ℓ][t]`: language ℓ's distribution over components.
    pub theta: Vec<Vec<f64>>,
    /// `phi[t][s][o]`: component t's outcome distribution in environment s.
    pub phi: Vec<Vec<Vec<f64>>>,
    pub delta: f64,
    pub gamma: f64,
}

impl ModelParams {
    pub fn truncation(&self) -> usize {
        self.beta.len()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape::new(
            self.beta.len(),
            self.theta.len(),
            self.phi
                .first()
                .map(|rows| rows.iter().map(Vec::len).collect())
                .unwrap_or_default(),
        )
    }

    /// Check the simplex, interval and positivity invariants at `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let t = self.beta.len();
        if t == 0 || self.beta_raw.len() + 1 != t {
            return Err(ModelError::DimensionMismatch(format!(
                "beta has {} entries, beta_raw {}",
                t,
                self.beta_raw.len()
            )));
        }
        if self.beta_raw.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(ModelError::Domain("beta_raw outside [0, 1]".into()));
        }
        check_simplex(&self.beta, tol, "beta")?;
        for (l, row) in self.theta.iter().enumerate() {
            if row.len() != t {
                return Err(ModelError::DimensionMismatch(format!("theta[{l}] length")));
            }
            check_simplex(row, tol, "theta")?;
        }
        if self.phi.len() != t {
            return Err(ModelError::DimensionMismatch("phi component count".into()));
        }
        for comp in &self.phi {
            if comp.len() != self.phi[0].len() {
                return Err(ModelError::DimensionMismatch("phi environment count".into()));
            }
            for (s, row) in comp.iter().enumerate() {
                if row.len() != self.phi[0][s].len() {
                    return Err(ModelError::DimensionMismatch("phi outcome count".into()));
                }
                check_simplex(row, tol, "phi")?;
            }
        }
        if !(self.delta > 0.0 && self.gamma > 0.0) {
            return Err(ModelError::Domain("delta and gamma must be positive".into()));
        }
        Ok(())
    }
}

fn check_simplex(p: &[f64], tol: f64, what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(ModelError::Domain(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(ModelError::Domain(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// GEM stick-breaking: `β_t = β′_t Π_{i<t}(1 − β′_i)`, last stick takes the rest.
pub fn stick_breaking(beta_raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(b) = beta_raw.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
        return Err(ModelError::Domain(format!("stick fraction {b} not in (0, 1)")));
    }
    let mut beta = Vec::with_capacity(beta_raw.len() + 1);
    let mut rest = 1.0;
    for &b in beta_raw {
        beta.push(b * rest);
        rest *= 1.0 - b;
    }
    beta.push(rest);
    Ok(beta)
}

/// Log density of a Dirichlet at `x` with entries floored before the log.
pub fn ln_dirichlet(x: &[f64], concentration: &[f64]) -> f64 {
    let total: f64 = concentration.iter().sum();
    let mut lp = ln_gamma(total);
    for (&xi, &a) in x.iter().zip(concentration) {
        lp += (a - 1.0) * clamped_ln(xi) - ln_gamma(a);
    }
    lp
}

/// Log prior plus marginal log likelihood, in constrained space.
///
/// Hyperparameters held fixed contribute no prior term; a free δ or γ is read
/// from `params`, a fixed one from `hp`.
pub fn log_joint(params: &ModelParams, corpus: &Corpus, hp: &Hyperparams) -> Result<f64> {
    let t = hp.truncation;
    if params.truncation() != t {
        return Err(ModelError::DimensionMismatch(format!(
            "params have {} components, hyperparameters {t}",
            params.truncation()
        )));
    }
    let in_bounds = |tok: &crate::corpus::Token| {
        params.theta.get(tok.language).is_some()
            && params.phi[0]
                .get(tok.env)
                .is_some_and(|row| tok.outcome < row.len())
    };
    if let Some(tok) = corpus.tokens().iter().find(|tok| !in_bounds(tok)) {
        return Err(ModelError::DimensionMismatch(format!(
            "token {tok:?} outside parameter dimensions"
        )));
    }
    let delta = resolved(hp.delta, params.delta);
    let gamma = resolved(hp.gamma, params.gamma);
    let mut lp = hp.delta.ln_pdf(delta) + hp.gamma.ln_pdf(gamma);
    let ln_gamma_param = gamma.ln();
    for &b in &params.beta_raw {
        lp += ln_gamma_param + (gamma - 1.0) * (1.0 - b).max(math::SIMPLEX_FLOOR).ln();
    }
    let conc: Vec<f64> = params.beta.iter().map(|b| delta * b.max(math::SIMPLEX_FLOOR)).collect();
    for row in &params.theta {
        lp += ln_dirichlet(row, &conc);
    }
    for comp in &params.phi {
        for row in comp {
            lp += ln_dirichlet(row, &vec![hp.alpha; row.len()]);
        }
    }
    for tok in corpus.tokens() {
        let lik: f64 = (0..t)
            .map(|k| params.theta[tok.language][k] * params.phi[k][tok.env][tok.outcome])
            .sum();
        lp += clamped_ln(lik);
    }
    if !lp.is_finite() {
        return Err(ModelError::NonFiniteDensity(format!("log joint = {lp}")));
    }
    Ok(lp)
}

fn resolved(prior: HyperPrior, free_value: f64) -> f64 {
    match prior {
        HyperPrior::Fixed(v) => v,
        HyperPrior::Gamma { .. } => free_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimShape {
    pub languages: usize,
    pub environments: usize,
    pub outcomes_per_env: usize,
    pub tokens_per_language: usize,
}

/// Every latent draw behind a simulated corpus. `params.phi` is indexed by
/// the simulator's full outcome alphabet `o0, o1, …`, which can be larger
/// than the alphabet observed in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: ModelParams,
    /// Component label of each corpus row, in row order.
    pub labels: Vec<usize>,
}

pub fn language_name(l: usize) -> String {
    format!("L{l:03}")
}

pub fn etymon_name(s: usize) -> String {
    format!("e{s:04}")
}

pub fn outcome_name(o: usize) -> String {
    format!("o{o}")
}

/// `t − 1` stick fractions β′ ~ Beta(1, γ), drawn by inversion
/// `1 − U^(1/γ)` and kept inside (0, 1).
pub fn sample_gem_sticks<R: rand::Rng + ?Sized>(rng: &mut R, gamma: f64, t: usize) -> Vec<f64> {
    (0..t.saturating_sub(1))
        .map(|_| {
            let u: f64 = rng.random();
            (1.0 - u.powf(1.0 / gamma)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
        })
        .collect()
}

/// Draw one corpus forward through the generative process.
pub fn simulate(hp: &Hyperparams, shape: &SimShape, seed: u64) -> Result<(Corpus, GroundTruth)> {
    hp.validate()?;
    if shape.languages == 0
        || shape.environments == 0
        || shape.outcomes_per_env == 0
        || shape.tokens_per_language == 0
    {
        return Err(ModelError::Config("simulation shape fields must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = hp.truncation;
    let draw_hyper = |prior: HyperPrior, rng: &mut ChaCha8Rng| match prior {
        HyperPrior::Fixed(v) => v,
        HyperPrior::Gamma { shape, rate } => math::sample_log_gamma(rng, shape).exp() / rate,
    };
    let delta = draw_hyper(hp.delta, &mut rng);
    let gamma = draw_hyper(hp.gamma, &mut rng);

    let beta_raw = sample_gem_sticks(&mut rng, gamma, t);
    let beta = stick_breaking(&beta_raw)?;
    let conc: Vec<f64> = beta.iter().map(|b| (delta * b).max(f64::MIN_POSITIVE)).collect();
    let theta: Vec<Vec<f64>> = (0..shape.languages)
        .map(|_| math::sample_dirichlet(&mut rng, &conc))
        .collect();
    let phi_conc = vec![hp.alpha; shape.outcomes_per_env];
    let phi: Vec<Vec<Vec<f64>>> = (0..t)
        .map(|_| {
            (0..shape.environments)
                .map(|_| math::sample_dirichlet(&mut rng, &phi_conc))
                .collect()
        })
        .collect();

    let mut instances = Vec::with_capacity(shape.languages * shape.tokens_per_language);
    let mut labels = Vec::with_capacity(instances.capacity());
    for (l, theta_l) in theta.iter().enumerate() {
        for _ in 0..shape.tokens_per_language {
            let s = rand::Rng::random_range(&mut rng, 0..shape.environments);
            let z = math::sample_categorical(&mut rng, theta_l);
            let y = math::sample_categorical(&mut rng, &phi[z][s]);
            instances.push(SoundChangeInstance::new(
                &language_name(l),
                &etymon_name(s),
                "s",
                &outcome_name(y),
            ));
            labels.push(z);
        }
    }
    let languages = (0..shape.languages).map(language_name).collect();
    let corpus = Corpus::with_languages(instances, languages);
    let params = ModelParams {
        beta_raw,
        beta,
        theta,
        phi,
        delta,
        gamma,
    };
    Ok((corpus, GroundTruth { params, labels }))
}
