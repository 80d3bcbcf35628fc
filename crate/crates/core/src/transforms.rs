//! Bijection between constrained [`ModelParams`] and `R^D`.
//!
//! Coordinate layout, in order:
//!
//! | block      | length                 | map                               |
//! |------------|------------------------|-----------------------------------|
//! | `beta_raw` | T − 1                  | logit                             |
//! | `theta`    | L · (T − 1)            | stick-breaking simplex, per ℓ     |
//! | `phi`      | T · Σ_s (K_s − 1)      | stick-breaking simplex, t-major   |
//! | `delta`    | 1 if free              | log                               |
//! | `gamma`    | 1 if free              | log                               |
//!
//! The simplex map sends `y ∈ R^{K−1}` to `x` via
//! `z_k = σ(y_k − ln(K − 1 − k))`, `x_k = z_k · (1 − Σ_{j<k} x_j)`, with the
//! last entry taking the remainder; `y = 0` is the uniform simplex. All
//! forward quantities are carried in log space so that near-corner simplices
//! keep full relative precision.

use serde::{Deserialize, Serialize};

use crate::corpus::EnvironmentTable;
use crate::error::{ModelError, Result};
use crate::genmodel::{HyperPrior, Hyperparams, ModelParams, ModelShape};
use crate::math::{self, log1m_sigmoid, log_sigmoid, sigmoid};

/// Fixed coordinate map for one model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    shape: ModelShape,
    fixed_delta: Option<f64>,
    fixed_gamma: Option<f64>,
    theta_start: usize,
    phi_start: usize,
    /// Unconstrained offset of environment s inside one component's φ block.
    phi_coord_offsets: Vec<usize>,
    phi_coord_stride: usize,
    /// Value offset of environment s inside one component's φ values.
    phi_value_offsets: Vec<usize>,
    phi_value_stride: usize,
    delta_index: Option<usize>,
    gamma_index: Option<usize>,
    dim: usize,
}

fn fixed_value(prior: HyperPrior) -> Option<f64> {
    match prior {
        HyperPrior::Fixed(v) => Some(v),
        HyperPrior::Gamma { .. } => None,
    }
}

impl Layout {
    pub fn new(shape: ModelShape, hp: &Hyperparams) -> Self {
        let t = shape.truncation;
        let mut phi_coord_offsets = Vec::with_capacity(shape.environments());
        let mut phi_value_offsets = Vec::with_capacity(shape.environments());
        let (mut coords, mut values) = (0, 0);
        for &k in &shape.outcomes {
            phi_coord_offsets.push(coords);
            phi_value_offsets.push(values);
            coords += k.saturating_sub(1);
            values += k;
        }
        let theta_start = t - 1;
        let phi_start = theta_start + shape.languages * (t - 1);
        let mut dim = phi_start + t * coords;
        let fixed_delta = fixed_value(hp.delta);
        let fixed_gamma = fixed_value(hp.gamma);
        let mut next = || {
            dim += 1;
            dim - 1
        };
        let delta_index = fixed_delta.is_none().then(&mut next);
        let gamma_index = fixed_gamma.is_none().then(&mut next);
        Self {
            shape,
            fixed_delta,
            fixed_gamma,
            theta_start,
            phi_start,
            phi_coord_offsets,
            phi_coord_stride: coords,
            phi_value_offsets,
            phi_value_stride: values,
            delta_index,
            gamma_index,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn truncation(&self) -> usize {
        self.shape.truncation
    }

    pub fn languages(&self) -> usize {
        self.shape.languages
    }

    pub fn environments(&self) -> usize {
        self.shape.environments()
    }

    pub fn delta_index(&self) -> Option<usize> {
        self.delta_index
    }

    pub fn gamma_index(&self) -> Option<usize> {
        self.gamma_index
    }

    pub fn theta_range(&self, language: usize) -> std::ops::Range<usize> {
        let start = self.theta_start + language * (self.shape.truncation - 1);
        start..start + self.shape.truncation - 1
    }

    pub fn phi_range(&self, component: usize, env: usize) -> std::ops::Range<usize> {
        let start =
            self.phi_start + component * self.phi_coord_stride + self.phi_coord_offsets[env];
        start..start + self.shape.outcomes[env] - 1
    }

    /// Offset of `log φ[t][s][0]` in the flat value buffer of [`Unpacked`].
    pub fn phi_value_offset(&self, component: usize, env: usize) -> usize {
        component * self.phi_value_stride + self.phi_value_offsets[env]
    }

    pub fn phi_value_len(&self) -> usize {
        self.shape.truncation * self.phi_value_stride
    }

    /// Block manifest for debugging. Names use `table` when given.
    pub fn manifest(&self, table: Option<&EnvironmentTable>) -> LayoutManifest {
        let mut blocks = Vec::new();
        let t = self.shape.truncation;
        let mut push = |name: String, range: std::ops::Range<usize>, map: &str| {
            blocks.push(LayoutBlock {
                name,
                offset: range.start,
                len: range.len(),
                map: map.to_string(),
            })
        };
        push("beta_raw".into(), 0..t - 1, "logit");
        for l in 0..self.shape.languages {
            let name = table
                .and_then(|tb| tb.languages.get(l).cloned())
                .unwrap_or_else(|| l.to_string());
            push(format!("theta[{name}]"), self.theta_range(l), "stick_simplex");
        }
        for c in 0..t {
            for s in 0..self.environments() {
                let name = table
                    .and_then(|tb| tb.environments.get(s).map(|k| k.to_string()))
                    .unwrap_or_else(|| s.to_string());
                push(
                    format!("phi[{}][{name}]", c + 1),
                    self.phi_range(c, s),
                    "stick_simplex",
                );
            }
        }
        if let Some(i) = self.delta_index {
            push("delta".into(), i..i + 1, "log");
        }
        if let Some(i) = self.gamma_index {
            push("gamma".into(), i..i + 1, "log");
        }
        LayoutManifest {
            dim: self.dim,
            truncation: t,
            languages: self.shape.languages,
            outcomes: self.shape.outcomes.clone(),
            blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub map: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutManifest {
    pub dim: usize,
    pub truncation: usize,
    pub languages: usize,
    pub outcomes: Vec<usize>,
    pub blocks: Vec<LayoutBlock>,
}

/// Per-block log-absolute-determinant terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JacobianTerms {
    pub beta_raw: f64,
    pub theta: f64,
    pub phi: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl JacobianTerms {
    pub fn total(&self) -> f64 {
        self.beta_raw + self.theta + self.phi + self.delta + self.gamma
    }
}

/// Forward pass of the transform, in log space.
#[derive(Debug, Clone)]
pub struct Unpacked {
    /// Shifted logistic argument of every stick coordinate (same indexing as
    /// `u`; unused at the δ/γ slots).
    pub stick_arg: Vec<f64>,
    pub beta_raw: Vec<f64>,
    pub log1m_beta_raw: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub beta: Vec<f64>,
    /// `log θ[ℓ][t]` at `ℓ · T + t`.
    pub log_theta: Vec<f64>,
    /// `log φ[t][s][o]` at `layout.phi_value_offset(t, s) + o`.
    pub log_phi: Vec<f64>,
    pub delta: f64,
    pub gamma: f64,
    pub jacobian: JacobianTerms,
}

/// Forward stick-breaking over `args` (already shifted). Writes K = len + 1
/// log-entries and returns the log-Jacobian of the simplex map when
/// `remainder_jacobian` is set, or of the bare logistic coordinates otherwise.
fn stick_forward(args: &[f64], log_x: &mut [f64], remainder_jacobian: bool) -> f64 {
    let mut log_rest = 0.0;
    let mut jac = 0.0;
    for (k, &a) in args.iter().enumerate() {
        let lz = log_sigmoid(a);
        let l1z = log1m_sigmoid(a);
        log_x[k] = log_rest + lz;
        jac += lz + l1z;
        if remainder_jacobian {
            jac += log_rest;
        }
        log_rest += l1z;
    }
    log_x[args.len()] = log_rest;
    jac
}

fn simplex_shift(k: usize, len: usize) -> f64 {
    // len = K − 1 coordinates; shift for coordinate k is ln(K − 1 − k)
    ((len - k) as f64).ln()
}

pub fn unpack(layout: &Layout, u: &[f64]) -> Result<Unpacked> {
    if u.len() != layout.dim {
        return Err(ModelError::DimensionMismatch(format!(
            "vector has {} coordinates, layout {}",
            u.len(),
            layout.dim
        )));
    }
    let t = layout.truncation();
    let n_lang = layout.languages();
    let mut stick_arg = u.to_vec();

    let mut log_beta = vec![0.0; t];
    let jac_beta = stick_forward(&u[..t - 1], &mut log_beta, false);
    let beta_raw: Vec<f64> = u[..t - 1].iter().map(|&a| sigmoid(a)).collect();
    let log1m_beta_raw: Vec<f64> = u[..t - 1].iter().map(|&a| log1m_sigmoid(a)).collect();
    let beta: Vec<f64> = log_beta.iter().map(|l| l.exp()).collect();

    let mut log_theta = vec![0.0; n_lang * t];
    let mut jac_theta = 0.0;
    for l in 0..n_lang {
        let r = layout.theta_range(l);
        for (k, i) in r.clone().enumerate() {
            stick_arg[i] = u[i] - simplex_shift(k, t - 1);
        }
        jac_theta += stick_forward(&stick_arg[r], &mut log_theta[l * t..(l + 1) * t], true);
    }

    let mut log_phi = vec![0.0; layout.phi_value_len()];
    let mut jac_phi = 0.0;
    for c in 0..t {
        for s in 0..layout.environments() {
            let r = layout.phi_range(c, s);
            let len = r.len();
            for (k, i) in r.clone().enumerate() {
                stick_arg[i] = u[i] - simplex_shift(k, len);
            }
            let off = layout.phi_value_offset(c, s);
            jac_phi += stick_forward(&stick_arg[r], &mut log_phi[off..off + len + 1], true);
        }
    }

    let (delta, jac_delta) = match layout.delta_index {
        Some(i) => (u[i].exp(), u[i]),
        None => (layout.fixed_delta.expect("fixed delta"), 0.0),
    };
    let (gamma, jac_gamma) = match layout.gamma_index {
        Some(i) => (u[i].exp(), u[i]),
        None => (layout.fixed_gamma.expect("fixed gamma"), 0.0),
    };
    Ok(Unpacked {
        stick_arg,
        beta_raw,
        log1m_beta_raw,
        log_beta,
        beta,
        log_theta,
        log_phi,
        delta,
        gamma,
        jacobian: JacobianTerms {
            beta_raw: jac_beta,
            theta: jac_theta,
            phi: jac_phi,
            delta: jac_delta,
            gamma: jac_gamma,
        },
    })
}

impl Unpacked {
    pub fn to_params(&self, layout: &Layout) -> ModelParams {
        let t = layout.truncation();
        let theta = self
            .log_theta
            .chunks(t)
            .map(|row| row.iter().map(|l| l.exp()).collect())
            .collect();
        let phi = (0..t)
            .map(|c| {
                (0..layout.environments())
                    .map(|s| {
                        let off = layout.phi_value_offset(c, s);
                        self.log_phi[off..off + layout.shape.outcomes[s]]
                            .iter()
                            .map(|l| l.exp())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        ModelParams {
            beta_raw: self.beta_raw.clone(),
            beta: self.beta.clone(),
            theta,
            phi,
            delta: self.delta,
            gamma: self.gamma,
        }
    }
}

/// Map `u` to constrained parameters and the summed log-absolute-determinant.
pub fn to_constrained(layout: &Layout, u: &[f64]) -> Result<(ModelParams, f64)> {
    let up = unpack(layout, u)?;
    Ok((up.to_params(layout), up.jacobian.total()))
}

/// Write the stick coordinates for simplex `x` into `out` (len K − 1).
fn simplex_inverse(x: &[f64], out: &mut [f64], shifted: bool) -> Result<()> {
    let logs: Vec<f64> = x.iter().map(|&v| checked_ln(v)).collect::<Result<_>>()?;
    // suffix sums of the floored entries, from the back for precision
    let mut suffix = vec![0.0; x.len() + 1];
    for k in (0..x.len()).rev() {
        suffix[k] = suffix[k + 1] + x[k].max(math::SIMPLEX_FLOOR);
    }
    let len = out.len();
    for k in 0..len {
        let a = logs[k] - suffix[k + 1].ln();
        out[k] = if shifted { a + simplex_shift(k, len) } else { a };
    }
    Ok(())
}

fn checked_ln(v: f64) -> Result<f64> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(ModelError::Domain(format!("simplex entry {v} is not a probability")));
    }
    Ok(v.max(math::SIMPLEX_FLOOR).ln())
}

pub fn to_unconstrained(layout: &Layout, params: &ModelParams) -> Result<Vec<f64>> {
    if params.shape() != layout.shape {
        return Err(ModelError::DimensionMismatch(format!(
            "params shaped {:?}, layout {:?}",
            params.shape(),
            layout.shape
        )));
    }
    let mut u = vec![0.0; layout.dim];
    for (k, &b) in params.beta_raw.iter().enumerate() {
        let b = b.clamp(math::SIMPLEX_FLOOR, 1.0 - math::SIMPLEX_FLOOR);
        if !b.is_finite() {
            return Err(ModelError::Domain("stick fraction is not finite".into()));
        }
        u[k] = b.ln() - (1.0 - b).ln();
    }
    for (l, row) in params.theta.iter().enumerate() {
        let r = layout.theta_range(l);
        simplex_inverse(row, &mut u[r], true)?;
    }
    for (c, comp) in params.phi.iter().enumerate() {
        for (s, row) in comp.iter().enumerate() {
            let r = layout.phi_range(c, s);
            simplex_inverse(row, &mut u[r], true)?;
        }
    }
    for (index, value) in [
        (layout.delta_index, params.delta),
        (layout.gamma_index, params.gamma),
    ] {
        if let Some(i) = index {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::Domain(format!("{value} is not positive")));
            }
            u[i] = value.ln();
        }
    }
    Ok(u)
}

/// Gradient of a scalar objective with respect to the log-space quantities
/// of [`Unpacked`].
#[derive(Debug, Clone)]
pub struct Cotangent {
    pub log_beta: Vec<f64>,
    pub log1m_beta_raw: Vec<f64>,
    pub log_theta: Vec<f64>,
    pub log_phi: Vec<f64>,
    pub delta: f64,
    pub gamma: f64,
}

impl Cotangent {
    pub fn zeros(layout: &Layout) -> Self {
        let t = layout.truncation();
        Self {
            log_beta: vec![0.0; t],
            log1m_beta_raw: vec![0.0; t - 1],
            log_theta: vec![0.0; layout.languages() * t],
            log_phi: vec![0.0; layout.phi_value_len()],
            delta: 0.0,
            gamma: 0.0,
        }
    }
}

/// Backward stick-breaking. `g` holds ∂f/∂log x_k (K entries); `extra_l1z`
/// adds direct ∂f/∂log(1 − z_k). Accumulates ∂f/∂arg into `out`.
fn stick_backward(
    args: &[f64],
    g: &[f64],
    extra_l1z: Option<&[f64]>,
    jacobian: Option<bool>,
    out: &mut [f64],
) {
    let len = args.len();
    let mut suffix = g[len];
    for k in (0..len).rev() {
        let mut gz = g[k];
        let mut g1z = suffix;
        if let Some(extra) = extra_l1z {
            g1z += extra[k];
        }
        match jacobian {
            // simplex map: log z_k + log(1 − z_k) + log rest_k
            Some(true) => {
                gz += 1.0;
                g1z += (len - k) as f64;
            }
            // bare logistic coordinates
            Some(false) => {
                gz += 1.0;
                g1z += 1.0;
            }
            None => {}
        }
        let a = args[k];
        out[k] += gz * sigmoid(-a) - g1z * sigmoid(a);
        suffix += g[k];
    }
}

/// Pull a cotangent back to `u`. With `include_jacobian` the gradient of the
/// log-Jacobian is added, giving ∂(f + log|J|)/∂u.
pub fn pullback(
    layout: &Layout,
    up: &Unpacked,
    cot: &Cotangent,
    include_jacobian: bool,
) -> Vec<f64> {
    let t = layout.truncation();
    let mut grad = vec![0.0; layout.dim];
    stick_backward(
        &up.stick_arg[..t - 1],
        &cot.log_beta,
        Some(&cot.log1m_beta_raw),
        include_jacobian.then_some(false),
        &mut grad[..t - 1],
    );
    let simplex_jac = include_jacobian.then_some(true);
    for l in 0..layout.languages() {
        let r = layout.theta_range(l);
        stick_backward(
            &up.stick_arg[r.clone()],
            &cot.log_theta[l * t..(l + 1) * t],
            None,
            simplex_jac,
            &mut grad[r],
        );
    }
    for c in 0..t {
        for s in 0..layout.environments() {
            let r = layout.phi_range(c, s);
            let off = layout.phi_value_offset(c, s);
            stick_backward(
                &up.stick_arg[r.clone()],
                &cot.log_phi[off..off + r.len() + 1],
                None,
                simplex_jac,
                &mut grad[r],
            );
        }
    }
    let jac = if include_jacobian { 1.0 } else { 0.0 };
    if let Some(i) = layout.delta_index {
        grad[i] = cot.delta * up.delta + jac;
    }
    if let Some(i) = layout.gamma_index {
        grad[i] = cot.gamma * up.gamma + jac;
    }
    grad
}
