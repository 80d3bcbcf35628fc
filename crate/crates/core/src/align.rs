//! Label-switching resolution across runs.
//!
//! The KL divergence from the reference run's (θ, φ) to a relabeled run's
//! parameters splits into a sum over reference components `a` of a cost that
//! depends only on the component `b = σ(a)` it is matched with. Minimizing
//! over permutations is therefore a linear assignment problem, solved exactly
//! by the Hungarian method.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::genmodel::ModelParams;
use crate::math::clamped_ln;
use crate::vinfer::FitResult;

/// `sigma[a]` is the label in the other run matched to reference label `a`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentPermutation {
    pub sigma: Vec<usize>,
}

impl ComponentPermutation {
    pub fn identity(t: usize) -> Self {
        Self {
            sigma: (0..t).collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.sigma.len()];
        self.sigma.iter().all(|&b| {
            b < seen.len() && !std::mem::replace(&mut seen[b], true)
        })
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.sigma.len()];
        for (a, &b) in self.sigma.iter().enumerate() {
            inv[b] = a;
        }
        Self { sigma: inv }
    }

    /// Relabel `params` so that its component `sigma[a]` becomes `a`.
    pub fn apply(&self, params: &ModelParams) -> ModelParams {
        let mut out = params.clone();
        for (row_out, row) in out.theta.iter_mut().zip(&params.theta) {
            for (a, &b) in self.sigma.iter().enumerate() {
                row_out[a] = row[b];
            }
        }
        for (a, &b) in self.sigma.iter().enumerate() {
            out.phi[a] = params.phi[b].clone();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEstimate {
    /// `theta[ℓ][t]`.
    pub theta: Vec<Vec<f64>>,
    /// `phi[t][s][o]`.
    pub phi: Vec<Vec<Vec<f64>>>,
    /// Token-share-weighted component proportions.
    pub usage: Vec<f64>,
}

impl ConsensusEstimate {
    pub fn truncation(&self) -> usize {
        self.phi.len()
    }

    pub fn from_params(params: &ModelParams, language_shares: &[f64]) -> Self {
        Self {
            theta: params.theta.clone(),
            phi: params.phi.clone(),
            usage: component_usage(&params.theta, language_shares),
        }
    }
}

/// `usage_t = Σ_ℓ w_ℓ θ_ℓ,t`.
pub fn component_usage(theta: &[Vec<f64>], language_shares: &[f64]) -> Vec<f64> {
    let t = theta.first().map_or(0, Vec::len);
    let mut usage = vec![0.0; t];
    for (row, &w) in theta.iter().zip(language_shares) {
        for (u, &x) in usage.iter_mut().zip(row) {
            *u += w * x;
        }
    }
    usage
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (clamped_ln(pi) - clamped_ln(qi)))
        .sum()
}

/// `C[a][b]`: KL contribution of matching reference component `a` with
/// component `b` of `other`, over θ columns and φ blocks with equal weight.
pub fn kl_cost_params(reference: &ModelParams, other: &ModelParams) -> Result<Vec<Vec<f64>>> {
    if reference.shape() != other.shape() {
        return Err(ModelError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            reference.shape(),
            other.shape()
        )));
    }
    let t = reference.truncation();
    let mut cost = vec![vec![0.0; t]; t];
    for (a, row) in cost.iter_mut().enumerate() {
        for (b, c) in row.iter_mut().enumerate() {
            let theta_part: f64 = reference
                .theta
                .iter()
                .zip(&other.theta)
                .map(|(r, o)| {
                    let p = r[a];
                    p * (clamped_ln(p) - clamped_ln(o[b]))
                })
                .sum();
            let phi_part: f64 = reference.phi[a]
                .iter()
                .zip(&other.phi[b])
                .map(|(p, q)| kl_row(p, q))
                .sum();
            *c = theta_part + phi_part;
        }
    }
    Ok(cost)
}

pub fn kl_cost_matrix(reference: &FitResult, other: &FitResult) -> Result<Vec<Vec<f64>>> {
    kl_cost_params(&reference.map_point, &other.map_point)
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian method with
/// potentials, O(n³)). Returns `assign[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

pub fn assignment_cost(cost: &[Vec<f64>], assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(a, &b)| cost[a][b]).sum()
}

/// Permutations aligning every run to the first.
pub fn align_params(runs: &[ModelParams]) -> Result<Vec<ComponentPermutation>> {
    let Some(reference) = runs.first() else {
        return Ok(Vec::new());
    };
    let mut perms = vec![ComponentPermutation::identity(reference.truncation())];
    for other in &runs[1..] {
        let cost = kl_cost_params(reference, other)?;
        perms.push(ComponentPermutation {
            sigma: hungarian(&cost),
        });
    }
    Ok(perms)
}

pub fn align(runs: &[FitResult]) -> Result<Vec<ComponentPermutation>> {
    let points: Vec<ModelParams> = runs.iter().map(|r| r.map_point.clone()).collect();
    align_params(&points)
}

/// Average the aligned runs and renormalize every row.
pub fn merge_params(
    runs: &[ModelParams],
    perms: &[ComponentPermutation],
    language_shares: &[f64],
) -> Result<ConsensusEstimate> {
    if runs.is_empty() || runs.len() != perms.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} runs, {} permutations",
            runs.len(),
            perms.len()
        )));
    }
    let aligned: Vec<ModelParams> = runs.iter().zip(perms).map(|(r, p)| p.apply(r)).collect();
    let n = aligned.len() as f64;
    let mut theta = aligned[0].theta.clone();
    let mut phi = aligned[0].phi.clone();
    for p in &aligned[1..] {
        for (acc, row) in theta.iter_mut().zip(&p.theta) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        for (acc, row) in phi.iter_mut().flatten().zip(p.phi.iter().flatten()) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    for row in theta.iter_mut().chain(phi.iter_mut().flatten()) {
        row.iter_mut().for_each(|x| *x /= n);
        renormalize(row);
    }
    let usage = component_usage(&theta, language_shares);
    Ok(ConsensusEstimate { theta, phi, usage })
}

pub fn merge(
    runs: &[FitResult],
    perms: &[ComponentPermutation],
    language_shares: &[f64],
) -> Result<ConsensusEstimate> {
    let points: Vec<ModelParams> = runs.iter().map(|r| r.map_point.clone()).collect();
    merge_params(&points, perms, language_shares)
}

fn renormalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|x| *x /= s);
    }
}
