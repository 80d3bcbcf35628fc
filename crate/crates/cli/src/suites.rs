//! The checks behind `admix oracle`.

use std::fmt::Write as _;

use admix_core::error::ModelError;
use admix_core::oracle::{self, GridSpec, RecoveryReport, RecoverySetup};
use admix_core::vinfer::{self, FitConfig};

use crate::CliResult;

#[derive(Debug, Default)]
pub struct Ledger {
    rows: Vec<(String, f64, f64, f64, bool)>,
}

impl Ledger {
    pub fn check(&mut self, name: &str, value: f64, target: f64, tol: f64) -> bool {
        let pass = (value - target).abs() <= tol;
        self.rows.push((name.to_string(), value, target, tol, pass));
        pass
    }

    pub fn at_least(&mut self, name: &str, value: f64, floor: f64) -> bool {
        let pass = value >= floor;
        self.rows.push((name.to_string(), value, floor, f64::NAN, pass));
        pass
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.4).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, value, target, tol, pass) in &self.rows {
            let verdict = if *pass { "PASS" } else { "FAIL" };
            if tol.is_nan() {
                let _ = writeln!(out, "{verdict}  {name}: {value:.6} (need >= {target})");
            } else {
                let _ = writeln!(out, "{verdict}  {name}: {value:.6} (target {target:.6} ± {tol:e})");
            }
        }
        out
    }
}

fn vi_config(iterations: usize, seed: u64) -> FitConfig {
    FitConfig {
        iterations,
        runs: 1,
        seed,
        ..FitConfig::default()
    }
}

pub fn conjugate(ledger: &mut Ledger, points: usize, iterations: usize, seed: u64) -> CliResult {
    let (corpus, hp) = oracle::conjugate_case();
    let exact = oracle::conjugate_dirichlet_mean(hp.alpha, &[3, 0])[0];
    println!("conjugate: exact E[phi_A] = {exact}");
    let spec = GridSpec {
        points_per_dim: points,
        ..GridSpec::default()
    };
    let grid = oracle::grid_posterior_moments(&corpus, &hp, &spec)?;
    ledger.check("conjugate grid E[phi_A]", grid.phi[0][0][0], exact, 2e-3);
    let run = vinfer::fit(&corpus, &hp, &vi_config(iterations, seed), 1)?.remove(0);
    let mean = vinfer::mean_params(&run.draws)
        .ok_or_else(|| ModelError::Config("--draws must be >= 1".into()))?;
    ledger.check("conjugate VI E[phi_A]", mean.phi[0][0][0], exact, 0.05);
    Ok(())
}

pub fn grid(ledger: &mut Ledger, spec: &GridSpec, iterations: usize, seed: u64) -> CliResult {
    let (corpus, hp) = oracle::grid_case();
    let grid = oracle::grid_posterior_moments(&corpus, &hp, spec)?;
    let run = vinfer::fit(&corpus, &hp, &vi_config(iterations, seed), 1)?.remove(0);
    let mean = vinfer::mean_params(&run.draws)
        .ok_or_else(|| ModelError::Config("--draws must be >= 1".into()))?;
    for t in 0..2 {
        ledger.check(&format!("grid theta[{t}]"), mean.theta[0][t], grid.theta[0][t], 0.1);
        for o in 0..2 {
            ledger.check(
                &format!("grid phi[{t}][{o}]"),
                mean.phi[t][0][o],
                grid.phi[t][0][o],
                0.1,
            );
        }
    }
    Ok(())
}

/// Returns the report and whether token accuracy met `threshold`.
pub fn recovery(
    ledger: &mut Ledger,
    iterations: usize,
    seed: u64,
    parallel_runs: usize,
    threshold: f64,
) -> CliResult<(RecoveryReport, bool)> {
    let setup = RecoverySetup::standard(iterations, seed);
    let outcome = oracle::run_recovery(&setup, parallel_runs)?;
    let three = outcome.run_components.iter().filter(|&&c| c == 3).count();
    ledger.at_least("recovery runs with 3 components > 5%", three as f64, 3.0);
    let pass = ledger.at_least("recovery token accuracy", outcome.report.accuracy, threshold);
    Ok((outcome.report, pass))
}
