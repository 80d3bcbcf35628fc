//! Scalar numerics shared by the model and the transforms.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Floor applied to simplex entries before taking logs.
pub const SIMPLEX_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 − σ(x))`.
pub fn log1m_sigmoid(x: f64) -> f64 {
    -softplus(x)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn clamped_ln(x: f64) -> f64 {
    x.max(SIMPLEX_FLOOR).ln()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

pub fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|x| *x /= s);
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Log of a Gamma(shape, 1) variate. Small shapes use
/// `G(a) = G(a + 1) · U^(1/a)` so the result stays finite when the variate
/// itself would underflow.
pub fn sample_log_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        return g.ln();
    }
    let g: f64 = Gamma::new(shape + 1.0, 1.0)
        .expect("positive shape")
        .sample(rng);
    let u: f64 = rng.random::<f64>();
    // u == 0 has probability 2^-53; nudge away
    g.ln() + u.max(f64::MIN_POSITIVE).ln() / shape
}

/// Dirichlet draw computed in log space, so concentrations far below one
/// (near-corner draws) do not collapse to NaN.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| sample_log_gamma(rng, a))
        .collect();
    let lse = logsumexp(&logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // rounding: land on the last non-zero entry
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}
