//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

use std::time::{Duration, Instant};

use admix_core::align::{
    align_params, assignment_cost, hungarian, kl_cost_params, ComponentPermutation,
    ConsensusEstimate,
};
use admix_core::analytics::{language_profiles, token_component_posterior, token_posteriors, type_average};
use admix_core::corpus::Token;
use admix_core::genmodel::{simulate, HyperPrior, Hyperparams, ModelParams, ModelShape, SimShape};
use admix_core::io::{self, ResolvedConfig};
use admix_core::math::sample_dirichlet;
use admix_core::oracle::{self, GridSpec, RecoveryOutcome, RecoverySetup};
use admix_core::pipeline;
use admix_core::transforms::{to_constrained, to_unconstrained, Layout};
use admix_core::vinfer::{self, elbo_with_noise, FitConfig, Model, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within_budget(start: Instant, budget: Duration) -> (bool, String) {
    let took = start.elapsed();
    (took < budget, format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs()))
}

fn vi_mean(corpus: &admix_core::corpus::Corpus, hp: &Hyperparams, seed: u64) -> ModelParams {
    let config = FitConfig {
        iterations: 20_000,
        runs: 1,
        seed,
        ..FitConfig::default()
    };
    let run = vinfer::fit(corpus, hp, &config, 1).unwrap().remove(0);
    vinfer::mean_params(&run.draws).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (corpus, hp) = oracle::conjugate_case();
    let exact = oracle::conjugate_dirichlet_mean(hp.alpha, &[3, 0])[0];
    let grid = oracle::grid_posterior_moments(
        &corpus,
        &hp,
        &GridSpec {
            points_per_dim: 200,
            ..GridSpec::default()
        },
    )
    .unwrap();
    let g = grid.phi[0][0][0];
    let v = vi_mean(&corpus, &hp, 1).phi[0][0][0];
    let (fast, took) = within_budget(start, Duration::from_secs(60));
    outcome(
        exact == 0.8 && (g - exact).abs() < 2e-3 && (v - exact).abs() < 0.05 && fast,
        format!("exact {exact}, grid {g:.5}, VI {v:.4}, {took}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (corpus, hp) = oracle::grid_case();
    let grid = oracle::grid_posterior_moments(&corpus, &hp, &GridSpec::default()).unwrap();
    let vi = vi_mean(&corpus, &hp, 1);
    let mut worst: f64 = 0.0;
    for t in 0..2 {
        worst = worst.max((vi.theta[0][t] - grid.theta[0][t]).abs());
        for o in 0..2 {
            worst = worst.max((vi.phi[t][0][o] - grid.phi[t][0][o]).abs());
        }
    }
    let (fast, took) = within_budget(start, Duration::from_secs(600));
    outcome(
        worst < 0.1 && fast,
        format!("max |VI - grid| = {worst:.4} over θ and φ ({} cells), {took}", grid.cells),
    )
}

/// T = 4 over 4 languages and 5 environments; unobserved outcomes drop out
/// of the alphabet, so D lands a little under 57.
fn gradient_model() -> Model {
    let truth = Hyperparams {
        alpha: 0.5,
        delta: HyperPrior::Fixed(1.0),
        gamma: HyperPrior::Fixed(1.0),
        truncation: 3,
    };
    let shape = SimShape {
        languages: 4,
        environments: 5,
        outcomes_per_env: 3,
        tokens_per_language: 25,
    };
    let (corpus, _) = simulate(&truth, &shape, 11).unwrap();
    let hp = Hyperparams {
        alpha: 0.5,
        truncation: 4,
        ..Hyperparams::default()
    };
    Model::new(&corpus, &hp).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let model = gradient_model();
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..100 {
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
        let state = VariationalState::new(mu, ls);
        let etas = vec![state.sample_eta(&mut rng)];
        let (_, grad) = elbo_with_noise(&state, &model, &etas).unwrap();
        let f = |s: &VariationalState| elbo_with_noise(s, &model, &etas).unwrap().0;
        for i in 0..2 * d {
            let mut plus = state.clone();
            let mut minus = state.clone();
            if i < d {
                plus.mu[i] += h;
                minus.mu[i] -= h;
            } else {
                plus.log_sigma[i - d] += h;
                minus.log_sigma[i - d] -= h;
            }
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    let (fast, took) = within_budget(start, Duration::from_secs(60));
    outcome(
        d >= 50 && worst < 1e-4 && fast,
        format!("D = {d}, max relative error {worst:.2e} over 100 points, {took}"),
    )
}

fn criterion_4() -> Outcome {
    let hp = Hyperparams::default();
    let shape = ModelShape::new(4, 3, vec![2, 3, 5]);
    let layout = Layout::new(shape.clone(), &hp);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let corner = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        // one entry at 1e-9, the rest a random simplex scaled to fill
        let mut x = sample_dirichlet(rng, &vec![1.0; k]);
        let j = rng.random_range(0..k);
        let rest: f64 = 1.0 - 1e-9;
        let others: f64 = x.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, v)| v).sum();
        for (i, v) in x.iter_mut().enumerate() {
            *v = if i == j { 1e-9 } else { *v / others * rest };
        }
        x
    };
    for n in 0..1000 {
        let u: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-6.0..6.0)).collect();
        let (p, _) = to_constrained(&layout, &u).unwrap();
        let back = to_unconstrained(&layout, &p).unwrap();
        let (p2, _) = to_constrained(&layout, &back).unwrap();
        worst = worst.max(max_param_diff(&p, &p2));

        let near = n % 2 == 0;
        let simplex = |rng: &mut ChaCha8Rng, k: usize| {
            if near && k > 1 {
                corner(rng, k)
            } else {
                sample_dirichlet(rng, &vec![1.0; k])
            }
        };
        let beta_raw: Vec<f64> = (0..3).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let params = ModelParams {
            beta: admix_core::genmodel::stick_breaking(&beta_raw).unwrap(),
            beta_raw,
            theta: (0..3).map(|_| simplex(&mut rng, 4)).collect(),
            phi: (0..4)
                .map(|_| shape.outcomes.iter().map(|&k| simplex(&mut rng, k)).collect())
                .collect(),
            delta: rng.random_range(0.01..50.0),
            gamma: rng.random_range(0.01..50.0),
        };
        let u = to_unconstrained(&layout, &params).unwrap();
        let (again, _) = to_constrained(&layout, &u).unwrap();
        worst = worst.max(max_param_diff(&params, &again));
    }
    outcome(
        worst < 1e-10,
        format!("max round-trip error {worst:.2e} over 1000 points each way"),
    )
}

fn max_param_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    let mut worst: f64 = 0.0;
    let mut cmp = |x: &[f64], y: &[f64]| {
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    };
    cmp(&a.beta_raw, &b.beta_raw);
    cmp(&a.beta, &b.beta);
    for (x, y) in a.theta.iter().zip(&b.theta) {
        cmp(x, y);
    }
    for (x, y) in a.phi.iter().flatten().zip(b.phi.iter().flatten()) {
        cmp(x, y);
    }
    cmp(&[a.delta, a.gamma], &[b.delta, b.gamma]);
    worst
}

fn recovery() -> (RecoveryOutcome, Duration) {
    let start = Instant::now();
    let out = oracle::run_recovery(&RecoverySetup::standard(20_000, 1), 1).unwrap();
    (out, start.elapsed())
}

fn criterion_5(rec: &RecoveryOutcome, took: Duration) -> Outcome {
    let balanced = rec.truth_usage.iter().all(|&u| u > 0.2);
    let three = rec.run_components.iter().filter(|&&c| c == 3).count();
    outcome(
        balanced && three >= 3 && rec.report.accuracy >= 0.8 && took < Duration::from_secs(1800),
        format!(
            "components > 5% per run {:?}, token accuracy {:.3}, {:.0}s",
            rec.run_components,
            rec.report.accuracy,
            took.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let truth = Hyperparams {
        alpha: 0.3,
        delta: HyperPrior::Fixed(1.0),
        gamma: HyperPrior::Fixed(3.0),
        truncation: 10,
    };
    let shape = SimShape {
        languages: 8,
        environments: 12,
        outcomes_per_env: 4,
        tokens_per_language: 1,
    };
    let (_, gt) = simulate(&truth, &shape, 6).unwrap();
    let reference = gt.params;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    let mut optimal = 0;
    for _ in 0..100 {
        let mut sigma: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            sigma.swap(i, rng.random_range(0..=i));
        }
        // copy whose component b is the reference's component sigma_inv[b]
        let relabel = ComponentPermutation { sigma: sigma.clone() }.inverse();
        let copy = relabel.apply(&reference);
        let perms = align_params(&[reference.clone(), copy.clone()]).unwrap();
        if perms[1].apply(&copy) == reference {
            exact += 1;
        }
        let other = ModelParams {
            theta: reference
                .theta
                .iter()
                .map(|_| sample_dirichlet(&mut rng, &[0.5; 10]))
                .collect(),
            ..copy
        };
        let cost = kl_cost_params(&reference, &other).unwrap();
        let assign = hungarian(&cost);
        let identity: Vec<usize> = (0..10).collect();
        if assignment_cost(&cost, &assign) <= assignment_cost(&cost, &identity) + 1e-12 {
            optimal += 1;
        }
    }
    outcome(
        exact == 100 && optimal == 100,
        format!("{exact}/100 permutations recovered, {optimal}/100 Hungarian ≤ identity"),
    )
}

fn criterion_7() -> Outcome {
    let hp = Hyperparams::default();
    let cfg = FitConfig::default();
    let snapshot = serde_json::json!({
        "truncation": hp.truncation,
        "alpha": hp.alpha,
        "delta": hp.delta,
        "gamma": hp.gamma,
        "learning_rate": cfg.learning_rate,
        "adam_beta1": cfg.adam_beta1,
        "runs": cfg.runs,
        "iterations": cfg.iterations,
        "posterior_draws": cfg.posterior_draws,
    });
    let expected = serde_json::json!({
        "truncation": 10,
        "alpha": 1e-4,
        "delta": {"gamma": {"shape": 1.0, "rate": 1.0}},
        "gamma": {"gamma": {"shape": 1.0, "rate": 1.0}},
        "learning_rate": 0.01,
        "adam_beta1": 0.8,
        "runs": 4,
        "iterations": 100000,
        "posterior_draws": 500,
    });
    outcome(snapshot == expected, snapshot.to_string())
}

fn criterion_8(sparse: &RecoveryOutcome) -> Outcome {
    let mut setup = RecoverySetup::standard(20_000, 1);
    setup.fit.alpha = 1.0;
    let flat = oracle::run_recovery(&setup, 1).unwrap();
    outcome(
        sparse.phi_entropy < flat.phi_entropy,
        format!(
            "mean φ-row entropy {:.4} (α = 1e-4) vs {:.4} (α = 1)",
            sparse.phi_entropy, flat.phi_entropy
        ),
    )
}

fn is_simplex(p: &[f64]) -> bool {
    p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-10
}

fn criterion_9() -> Outcome {
    let setup = RecoverySetup::standard(2_000, 1);
    let (corpus, _) = simulate(&setup.truth, &setup.shape, setup.simulation_seed).unwrap();
    let cfg = FitConfig {
        runs: 2,
        posterior_draws: 10,
        ..setup.config.clone()
    };
    let out = pipeline::fit_pipeline(&corpus, &setup.fit, &cfg, 1).unwrap();
    let r = &out.report;
    let mut emitted = 0;
    let mut bad = 0;
    let mut tally = |p: &[f64]| {
        emitted += 1;
        if !is_simplex(p) {
            bad += 1;
        }
    };
    r.posteriors.iter().for_each(|p| tally(&p.probs));
    r.types.iter().for_each(|t| tally(&t.probs));
    for prof in &r.profiles {
        tally(&prof.theta);
        if let Some(e) = &prof.empirical {
            tally(e);
        }
    }
    let again = type_average(&token_posteriors(&out.consensus, &corpus).unwrap(), &corpus);
    let profiles = language_profiles(&out.consensus, &r.posteriors, &corpus);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = 10;
    let outcomes = vec![4, 2, 7];
    let mut max_err: f64 = 0.0;
    for _ in 0..10_000 {
        let consensus = ConsensusEstimate {
            theta: (0..3).map(|_| sample_dirichlet(&mut rng, &[0.3; 10])).collect(),
            phi: (0..t)
                .map(|_| outcomes.iter().map(|&k| sample_dirichlet(&mut rng, &vec![0.5; k])).collect())
                .collect(),
            usage: vec![0.1; t],
        };
        let env = rng.random_range(0..3);
        let token = Token {
            language: rng.random_range(0..3),
            env,
            outcome: rng.random_range(0..outcomes[env]),
        };
        let got = match token_component_posterior(&consensus, token) {
            Ok(p) => p,
            Err(_) => continue,
        };
        // direct: elementwise product, then divide by its sum
        let prod: Vec<f64> = (0..t)
            .map(|k| consensus.theta[token.language][k] * consensus.phi[k][env][token.outcome])
            .collect();
        let z: f64 = prod.iter().sum();
        for (g, p) in got.iter().zip(&prod) {
            max_err = max_err.max((g - p / z).abs());
        }
    }
    outcome(
        bad == 0 && again == r.types && profiles == r.profiles && max_err < 1e-12,
        format!("{emitted} distributions, {bad} off-simplex; 10000 posterior checks max error {max_err:.1e}"),
    )
}

fn criterion_10() -> Outcome {
    let setup = RecoverySetup::standard(1_000, 5);
    let (corpus, _) = simulate(&setup.truth, &setup.shape, setup.simulation_seed).unwrap();
    let cfg = FitConfig {
        runs: 2,
        posterior_draws: 20,
        ..setup.config.clone()
    };
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, parallel: usize| {
        let out = pipeline::fit_pipeline(&corpus, &setup.fit, &cfg, parallel).unwrap();
        let path = dir.path().join(name);
        pipeline::write_fit_outputs(&path, &corpus, &out, &ResolvedConfig::new(cfg.clone(), setup.fit))
            .unwrap();
        path
    };
    let a = write("a", 1);
    let b = write("b", 2);
    let files = [
        format!("run_0/{}", io::PARAMS_MEAN),
        format!("run_1/{}", io::PARAMS_MEAN),
        io::LANGUAGE_PROFILES.to_string(),
        io::TYPE_POSTERIORS.to_string(),
        io::TOKEN_POSTERIORS.to_string(),
        io::PLOT_DATA.to_string(),
        io::CONSENSUS.to_string(),
    ];
    let same = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
        .count();
    outcome(
        same == files.len(),
        format!("{same}/{} artifacts byte-identical across two invocations", files.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    let (rec, took) = recovery();
    report(5, criterion_5(&rec, took));
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8(&rec));
    report(9, criterion_9());
    report(10, criterion_10());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
