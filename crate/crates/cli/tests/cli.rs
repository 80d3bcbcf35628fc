use std::path::Path;
use std::process::{Command, Output};

fn admix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_admix"))
        .args(args)
        .env_remove("ADMIX_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--out", out];
    args.extend_from_slice(extra);
    admix(&args)
}

#[test]
fn simulate_writes_one_row_per_token() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    let out = simulate(&dir, &["--L", "20", "--S", "40", "--tokens", "30", "--T", "3", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = std::fs::read_to_string(dir.join("corpus.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 600 + 1);
    assert!(dir.join("truth.json").exists());
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&simulate(&a, &["--seed", "7"])), 0);
    assert_eq!(code(&simulate(&b, &["--seed", "7"])), 0);
    for f in ["corpus.tsv", "truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&admix(&["simulate", "--L", "0"])), 1);
    assert_eq!(code(&admix(&["fit", "--data", "x.tsv", "--iters", "0"])), 1);
    assert_eq!(code(&admix(&["fit"])), 1);
    assert_eq!(code(&admix(&["nonsense"])), 1);
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_admix"))
        .args(["oracle", "--suite", "conjugate", "--out"])
        .arg(tempfile::tempdir().unwrap().path())
        .env("ADMIX_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad_threads), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&admix(&["--help"])), 0);
    assert_eq!(code(&admix(&["--version"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.tsv");
    assert_eq!(code(&admix(&["fit", "--data", missing.to_str().unwrap()])), 2);
    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "language\tetymon\treflex\nA\tx\ty\n").unwrap();
    let out = admix(&["fit", "--data", bad.to_str().unwrap(), "--iters", "5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sound"));
}

#[test]
fn fit_help_lists_defaults() {
    let out = admix(&["fit", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "--T <TRUNCATION>",
        "[default: 10]",
        "[default: 0.0001]",
        "[default: gamma:1,1]",
        "[default: 100000]",
        "[default: 4]",
        "[default: 0.01]",
        "[default: 0.8]",
        "[default: 500]",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
    for cmd in ["simulate", "align", "report", "oracle", "layout"] {
        assert_eq!(code(&admix(&[cmd, "--help"])), 0, "{cmd}");
    }
}

fn small_fit(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--iters",
        "200",
        "--runs",
        "2",
        "--draws",
        "10",
        "--T",
        "4",
    ];
    args.extend_from_slice(extra);
    admix(&args)
}

#[test]
fn fit_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &["--L", "5", "--S", "6", "--tokens", "8", "--seed", "2"]);
    let data = sim.join("corpus.tsv");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&small_fit(&data, &a, &[])), 0);
    assert_eq!(code(&small_fit(&data, &b, &["--parallel-runs", "2"])), 0);
    for f in [
        "run_0/params_mean.json",
        "run_1/params_mean.json",
        "run_0/draws.ndjson",
        "run_0/elbo_trace.tsv",
        "config.json",
        "consensus.json",
        "permutations.json",
        "language_profiles.tsv",
        "type_posteriors.tsv",
        "token_posteriors.tsv",
        "profiles_plotdata.json",
    ] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["input_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    let al = tmp.path().join("al");
    let out = admix(&[
        "align",
        "--fit",
        a.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        al.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(al.join("consensus.json")).unwrap(),
        std::fs::read(a.join("consensus.json")).unwrap()
    );

    let rep = tmp.path().join("rep");
    let out = admix(&[
        "report",
        "--data",
        data.to_str().unwrap(),
        "--consensus",
        a.join("consensus.json").to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(rep.join("type_posteriors.tsv")).unwrap(),
        std::fs::read(a.join("type_posteriors.tsv")).unwrap()
    );
    let per_run = admix(&[
        "report",
        "--data",
        data.to_str().unwrap(),
        "--fit",
        a.to_str().unwrap(),
        "--run",
        "1",
        "--out",
        tmp.path().join("rep1").to_str().unwrap(),
    ]);
    assert_eq!(code(&per_run), 0);
    assert_eq!(code(&admix(&["report", "--data", data.to_str().unwrap()])), 1);
}

#[test]
fn flags_override_config_file_over_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &["--L", "3", "--S", "4", "--tokens", "5"]);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iters": 50, "runs": 3, "lr": 0.05, "delta_prior": "fixed:2"}"#).unwrap();
    let out = tmp.path().join("o");
    let res = small_fit(&sim.join("corpus.tsv"), &out, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    // --iters and --runs were given on the command line
    assert_eq!(resolved["fit"]["iterations"], 200);
    assert_eq!(resolved["fit"]["runs"], 2);
    assert_eq!(resolved["fit"]["learning_rate"], 0.05);
    assert_eq!(resolved["fit"]["adam_beta1"], 0.8);
    assert_eq!(resolved["hyperparams"]["delta"], serde_json::json!({"fixed": 2.0}));

    std::fs::write(&cfg, r#"{"iterz": 5}"#).unwrap();
    let res = small_fit(&sim.join("corpus.tsv"), &out, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&res), 1);
}

#[test]
fn layout_dump_reports_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.tsv");
    std::fs::write(
        &data,
        "language\tetymon\tsound\treflex\nA\tx\ts\ta\nA\tx\ts\tb\nB\ty\ts\tc\nB\ty\ts\td\nB\ty\ts\te\n",
    )
    .unwrap();
    let out = admix(&["layout", "dump", "--data", data.to_str().unwrap(), "--T", "3"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // (T-1) + L(T-1) + T*Σ(K_s-1) + δ + γ = 2 + 4 + 3*(1+2) + 2
    assert_eq!(v["dim"], 17);
    assert_eq!(v["blocks"][0]["name"], "beta_raw");
}

#[test]
fn oracle_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let ok = admix(&["oracle", "--suite", "conjugate", "--out", dir]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("0.8") && text.contains("PASS"), "{text}");

    let big = admix(&["oracle", "--suite", "grid", "--grid-points", "200", "--out", dir]);
    assert_eq!(code(&big), 3);
    assert!(String::from_utf8_lossy(&big.stderr).contains("grid too large"));

    let weak = admix(&["oracle", "--suite", "recovery", "--iters", "5", "--out", dir]);
    assert_eq!(code(&weak), 4);
    let err = String::from_utf8_lossy(&weak.stderr);
    assert!(err.contains("recovery.json"), "{err}");
    assert!(tmp.path().join("recovery.json").exists());
}

#[test]
fn fits_the_shipped_fixture() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/west_iranian_fixture.tsv");
    let tmp = tempfile::tempdir().unwrap();
    let out = small_fit(&data, tmp.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let profiles = std::fs::read_to_string(tmp.path().join("language_profiles.tsv")).unwrap();
    // header plus one row per language
    assert_eq!(profiles.lines().count(), 7);
    let types = std::fs::read_to_string(tmp.path().join("type_posteriors.tsv")).unwrap();
    assert!(types.lines().any(|l| l.starts_with("*sp̥źan-\t*r̥ź\t")));
}
