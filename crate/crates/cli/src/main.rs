use std::path::{Path, PathBuf};
use std::process::ExitCode;

use admix_core::align::ConsensusEstimate;
use admix_core::corpus::{self, Corpus, ParseOptions};
use admix_core::error::{DataError, ModelError};
use admix_core::genmodel::{self, HyperPrior, Hyperparams, SimShape};
use admix_core::io::{self, Report, ResolvedConfig, RunManifest};
use admix_core::oracle::GridSpec;
use admix_core::transforms::Layout;
use admix_core::vinfer::{Convergence, FitConfig};
use admix_core::{analytics, genmodel::ModelShape, pipeline};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Deserialize;

mod suites;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(DataError),
    Numeric(ModelError),
    Recovery { accuracy: f64, report: PathBuf },
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) | CliError::Failed(_) => 3,
            CliError::Recovery { .. } => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "data error: {e}"),
            CliError::Numeric(e) => write!(f, "numeric error: {e}"),
            CliError::Recovery { accuracy, report } => write!(
                f,
                "recovery below threshold (accuracy {accuracy:.3}); report at {}",
                report.display()
            ),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Usage(m),
            e => CliError::Numeric(e),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn parse_prior(s: &str) -> Result<HyperPrior, String> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| format!("expected `gamma:SHAPE,RATE` or `fixed:VALUE`, got `{s}`"))?;
    let num = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad number `{x}`: {e}"))
    };
    match kind {
        "gamma" => {
            let (a, b) = rest
                .split_once(',')
                .ok_or_else(|| format!("gamma prior needs SHAPE,RATE, got `{rest}`"))?;
            Ok(HyperPrior::Gamma {
                shape: num(a)?,
                rate: num(b)?,
            })
        }
        "fixed" => Ok(HyperPrior::Fixed(num(rest)?)),
        _ => Err(format!("unknown prior kind `{kind}`")),
    }
}

#[derive(Parser, Debug)]
#[command(name = "admix", version, about = "Latent dialect components from sound-change data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, validate, fit, align, merge and report.
    Fit(FitArgs),
    /// Draw a synthetic corpus and its ground truth.
    Simulate(SimulateArgs),
    /// Align the runs of a fit directory and write the consensus.
    Align(AlignArgs),
    /// Token, type and language posteriors from a consensus estimate.
    Report(ReportArgs),
    /// Conjugate, grid and recovery checks with a pass/fail ledger.
    Oracle(OracleArgs),
    /// Unconstrained coordinate layout as JSON.
    Layout(LayoutArgs),
}

#[derive(clap::Args, Debug, Clone)]
struct ModelFlags {
    /// Truncation level (maximum number of components).
    #[arg(long = "T", default_value_t = 10)]
    truncation: usize,
    /// Symmetric Dirichlet concentration of every sound-change distribution.
    #[arg(long, default_value_t = 1e-4)]
    alpha: f64,
    /// Prior on the language-level concentration δ.
    #[arg(long = "delta-prior", default_value = "gamma:1,1", value_parser = parse_prior)]
    delta_prior: HyperPrior,
    /// Prior on the top-level concentration γ.
    #[arg(long = "gamma-prior", default_value = "gamma:1,1", value_parser = parse_prior)]
    gamma_prior: HyperPrior,
}

#[derive(clap::Args, Debug)]
struct FitArgs {
    /// Dataset TSV (language, etymon, sound, reflex[, gloss]).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "admix_out")]
    out: PathBuf,
    /// JSON file of settings; explicit flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    /// Optimization steps per run.
    #[arg(long, default_value_t = 100_000)]
    iters: usize,
    /// Independent initializations.
    #[arg(long, default_value_t = 4)]
    runs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.8)]
    beta1: f64,
    /// Adam second-moment decay.
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long = "adam-eps", default_value_t = 1e-8)]
    adam_eps: f64,
    /// Monte-Carlo samples per gradient.
    #[arg(long = "mc-samples", default_value_t = 1)]
    mc_samples: usize,
    /// Posterior draws kept per run.
    #[arg(long, default_value_t = 500)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "checkpoint-every", default_value_t = 100)]
    checkpoint_every: usize,
    #[arg(long = "smoothing-window", default_value_t = 100)]
    smoothing_window: usize,
    /// Stop early once the windowed ELBO changes by less than
    /// `--convergence-tol`; off unless given.
    #[arg(long = "convergence-window")]
    convergence_window: Option<usize>,
    #[arg(long = "convergence-tol", default_value_t = 1e-6)]
    convergence_tol: f64,
    /// Fits executed concurrently (capped by ADMIX_THREADS).
    #[arg(long = "parallel-runs", default_value_t = 1)]
    parallel_runs: usize,
    /// Drop exact duplicate rows.
    #[arg(long)]
    dedup: bool,
    /// Warn about languages with fewer rows than this.
    #[arg(long = "min-count", default_value_t = 5)]
    min_count: usize,
    /// Suppress components below this usage in printed tables.
    #[arg(long = "min-usage", default_value_t = analytics::DEFAULT_MIN_USAGE)]
    min_usage: f64,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "T")]
    truncation: Option<usize>,
    alpha: Option<f64>,
    delta_prior: Option<String>,
    gamma_prior: Option<String>,
    iters: Option<usize>,
    runs: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    mc_samples: Option<usize>,
    draws: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
    smoothing_window: Option<usize>,
    convergence_window: Option<usize>,
    convergence_tol: Option<f64>,
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[arg(long = "L", default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    languages: u64,
    /// Environments (etymon/sound slots).
    #[arg(long = "S", default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    environments: u64,
    /// Rows per language.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    tokens: u64,
    /// Outcome alphabet size per environment.
    #[arg(long = "K", default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    outcomes: u64,
    /// Components drawn by the simulator.
    #[arg(long = "T", default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    truncation: u64,
    #[arg(long, default_value_t = 1e-4)]
    alpha: f64,
    #[arg(long = "delta-prior", default_value = "gamma:1,1", value_parser = parse_prior)]
    delta_prior: HyperPrior,
    #[arg(long = "gamma-prior", default_value = "gamma:1,1", value_parser = parse_prior)]
    gamma_prior: HyperPrior,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory receiving `corpus.tsv` and `truth.json`.
    #[arg(long, default_value = "sim_out")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct AlignArgs {
    /// Output directory of `admix fit` (its `run_*` subdirectories).
    #[arg(long)]
    fit: PathBuf,
    /// Dataset the runs were fit on (for language token shares).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dedup: bool,
    /// Destination of `permutations.json` and `consensus.json`; defaults to
    /// the fit directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dedup: bool,
    /// Consensus JSON written by `fit` or `align`.
    #[arg(long)]
    consensus: Option<PathBuf>,
    /// Report from one run's variational mean instead of the consensus;
    /// needs `--fit`.
    #[arg(long)]
    run: Option<usize>,
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long, default_value = "admix_report")]
    out: PathBuf,
    #[arg(long = "min-usage", default_value_t = analytics::DEFAULT_MIN_USAGE)]
    min_usage: f64,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Suite {
    Conjugate,
    Grid,
    Recovery,
    All,
}

#[derive(clap::Args, Debug)]
struct OracleArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    /// Grid points per dimension for the conjugate check.
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Grid points per dimension for the two-component check.
    #[arg(long = "grid-points", default_value_t = 50)]
    grid_points: usize,
    /// Optimization steps for the VI side of each check.
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    /// Minimum token accuracy of the recovery check.
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "parallel-runs", default_value_t = 1)]
    parallel_runs: usize,
    /// Directory for `recovery.json`.
    #[arg(long, default_value = "oracle_out")]
    out: PathBuf,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum LayoutAction {
    Dump,
}

#[derive(clap::Args, Debug)]
struct LayoutArgs {
    #[arg(value_enum, default_value_t = LayoutAction::Dump)]
    action: LayoutAction,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dedup: bool,
    #[command(flatten)]
    model: ModelFlags,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("ADMIX_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "ADMIX_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn effective_parallelism(requested: usize) -> CliResult<usize> {
    if requested == 0 {
        return Err(CliError::Usage("--parallel-runs must be >= 1".into()));
    }
    Ok(match thread_cap()? {
        Some(cap) => requested.min(cap),
        None => requested,
    })
}

fn load_corpus(path: &Path, dedup: bool) -> CliResult<Corpus> {
    Ok(corpus::parse_dataset(path, ParseOptions { dedup })?)
}

fn hyperparams(model: &ModelFlags) -> Hyperparams {
    Hyperparams {
        alpha: model.alpha,
        delta: model.delta_prior,
        gamma: model.gamma_prior,
        truncation: model.truncation,
    }
}

/// Flags given on the command line win; then the config file; then defaults.
fn resolve_fit(args: &FitArgs, m: &ArgMatches) -> CliResult<(FitConfig, Hyperparams)> {
    let file: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| DataError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
    };
    let explicit = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    fn pick<T: Clone>(flag: bool, cli: &T, file: &Option<T>) -> T {
        match (flag, file) {
            (false, Some(v)) => v.clone(),
            _ => cli.clone(),
        }
    }
    let prior = |flag: bool, cli: HyperPrior, file: &Option<String>| -> CliResult<HyperPrior> {
        match (flag, file) {
            (false, Some(s)) => parse_prior(s).map_err(CliError::Usage),
            _ => Ok(cli),
        }
    };
    let hp = Hyperparams {
        truncation: pick(explicit("truncation"), &args.model.truncation, &file.truncation),
        alpha: pick(explicit("alpha"), &args.model.alpha, &file.alpha),
        delta: prior(explicit("delta_prior"), args.model.delta_prior, &file.delta_prior)?,
        gamma: prior(explicit("gamma_prior"), args.model.gamma_prior, &file.gamma_prior)?,
    };
    let window = if explicit("convergence_window") {
        args.convergence_window
    } else {
        file.convergence_window.or(args.convergence_window)
    };
    let config = FitConfig {
        iterations: pick(explicit("iters"), &args.iters, &file.iters),
        runs: pick(explicit("runs"), &args.runs, &file.runs),
        learning_rate: pick(explicit("lr"), &args.lr, &file.lr),
        adam_beta1: pick(explicit("beta1"), &args.beta1, &file.beta1),
        adam_beta2: pick(explicit("beta2"), &args.beta2, &file.beta2),
        adam_epsilon: pick(explicit("adam_eps"), &args.adam_eps, &file.adam_eps),
        mc_samples: pick(explicit("mc_samples"), &args.mc_samples, &file.mc_samples),
        posterior_draws: pick(explicit("draws"), &args.draws, &file.draws),
        seed: pick(explicit("seed"), &args.seed, &file.seed),
        convergence: window.map(|w| Convergence {
            window: w,
            relative_tol: pick(explicit("convergence_tol"), &args.convergence_tol, &file.convergence_tol),
        }),
        checkpoint_every: pick(explicit("checkpoint_every"), &args.checkpoint_every, &file.checkpoint_every),
        smoothing_window: pick(explicit("smoothing_window"), &args.smoothing_window, &file.smoothing_window),
    };
    hp.validate()?;
    config.validate()?;
    Ok((config, hp))
}

fn cmd_fit(args: &FitArgs, m: &ArgMatches, argv: Vec<String>) -> CliResult {
    let (config, hp) = resolve_fit(args, m)?;
    let parallel = effective_parallelism(args.parallel_runs)?;
    let mut manifest = RunManifest::start(argv);
    let corpus = load_corpus(&args.data, args.dedup)?;
    let validation = corpus::validate(&corpus, args.min_count);
    for w in &validation.warnings {
        eprintln!("warning: {w}");
    }
    if corpus.is_empty() {
        return Err(CliError::Data(DataError::Io {
            path: args.data.display().to_string(),
            message: "dataset has no rows".into(),
        }));
    }
    let resolved = ResolvedConfig::new(config.clone(), hp);
    manifest.config_digest = Some(resolved.digest.clone());
    manifest.seed = Some(config.seed);
    manifest.input_sha256 = Some(io::sha256_file(&args.data)?);

    let outputs = pipeline::fit_pipeline(&corpus, &hp, &config, parallel)?;
    pipeline::write_fit_outputs(&args.out, &corpus, &outputs, &resolved)?;
    print_tables(&outputs.report, &outputs.consensus, args.min_usage);
    manifest.finish(&args.out)?;
    Ok(())
}

fn print_tables(report: &Report, consensus: &ConsensusEstimate, min_usage: f64) {
    println!(
        "{}",
        analytics::profiles_table_human(&report.profiles, &consensus.usage, min_usage)
    );
    println!(
        "{}",
        analytics::type_table_human(&report.types, &consensus.usage, min_usage)
    );
}

fn cmd_simulate(args: &SimulateArgs, argv: Vec<String>) -> CliResult {
    let hp = Hyperparams {
        alpha: args.alpha,
        delta: args.delta_prior,
        gamma: args.gamma_prior,
        truncation: args.truncation as usize,
    };
    hp.validate()?;
    let shape = SimShape {
        languages: args.languages as usize,
        environments: args.environments as usize,
        outcomes_per_env: args.outcomes as usize,
        tokens_per_language: args.tokens as usize,
    };
    let mut manifest = RunManifest::start(argv);
    manifest.seed = Some(args.seed);
    let (corpus, truth) = genmodel::simulate(&hp, &shape, args.seed)?;
    io::write_text(&args.out.join("corpus.tsv"), &corpus.to_tsv())?;
    io::write_json(&args.out.join("truth.json"), &truth)?;
    manifest.finish(&args.out)?;
    println!("wrote {} rows to {}", corpus.len(), args.out.join("corpus.tsv").display());
    Ok(())
}

fn cmd_align(args: &AlignArgs, argv: Vec<String>) -> CliResult {
    let manifest = RunManifest::start(argv);
    let corpus = load_corpus(&args.data, args.dedup)?;
    let runs = io::read_fit_dir(&args.fit)?;
    let (perms, consensus) = pipeline::consensus_of(&runs, &corpus)?;
    let out = args.out.as_deref().unwrap_or(&args.fit);
    io::write_alignment(out, &perms, &consensus)?;
    for (r, p) in perms.iter().enumerate() {
        println!("run {r}: {:?}", p.sigma);
    }
    manifest.finish(out)?;
    Ok(())
}

fn cmd_report(args: &ReportArgs, argv: Vec<String>) -> CliResult {
    let manifest = RunManifest::start(argv);
    let corpus = load_corpus(&args.data, args.dedup)?;
    let consensus = match (args.run, &args.fit, &args.consensus) {
        (Some(r), Some(fit), _) => {
            let runs = io::read_fit_dir(fit)?;
            let (perms, _) = pipeline::consensus_of(&runs, &corpus)?;
            let run = runs
                .get(r)
                .ok_or_else(|| CliError::Usage(format!("no run {r} in {}", fit.display())))?;
            ConsensusEstimate::from_params(&perms[r].apply(&run.map_point), &corpus.language_shares())
        }
        (Some(_), None, _) => return Err(CliError::Usage("--run needs --fit".into())),
        (None, _, Some(path)) => io::read_json(path)?,
        (None, Some(fit), None) => io::read_json(&fit.join(io::CONSENSUS))?,
        (None, None, None) => {
            return Err(CliError::Usage("give --consensus, --fit, or --run with --fit".into()))
        }
    };
    let t = consensus.truncation();
    let shape = ModelShape::of(&corpus, t);
    if consensus.theta.len() != shape.languages
        || consensus.phi.first().map(Vec::len) != Some(shape.environments())
    {
        return Err(CliError::Numeric(ModelError::DimensionMismatch(
            "consensus does not match the dataset".into(),
        )));
    }
    let report = Report::build(&consensus, &corpus)?;
    report.write(&args.out, &corpus, t)?;
    print_tables(&report, &consensus, args.min_usage);
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_oracle(args: &OracleArgs, argv: Vec<String>) -> CliResult {
    let manifest = RunManifest::start(argv);
    let parallel = effective_parallelism(args.parallel_runs)?;
    let mut ledger = suites::Ledger::default();
    let want = |s: Suite| args.suite == s || args.suite == Suite::All;
    if want(Suite::Conjugate) {
        suites::conjugate(&mut ledger, args.points, args.iters, args.seed)?;
    }
    if want(Suite::Grid) {
        let spec = GridSpec {
            points_per_dim: args.grid_points,
            ..GridSpec::default()
        };
        suites::grid(&mut ledger, &spec, args.iters, args.seed)?;
    }
    let mut recovery = None;
    if want(Suite::Recovery) {
        let (report, pass) = suites::recovery(&mut ledger, args.iters, args.seed, parallel, args.threshold)?;
        let path = args.out.join("recovery.json");
        io::write_json(&path, &report)?;
        recovery = Some((report.accuracy, pass, path));
    }
    print!("{}", ledger.render());
    manifest.finish(&args.out)?;
    if let Some((accuracy, false, report)) = recovery {
        return Err(CliError::Recovery { accuracy, report });
    }
    if ledger.failed() > 0 {
        return Err(CliError::Failed(format!("{} oracle check(s) failed", ledger.failed())));
    }
    Ok(())
}

fn cmd_layout(args: &LayoutArgs) -> CliResult {
    let LayoutAction::Dump = args.action;
    let corpus = load_corpus(&args.data, args.dedup)?;
    let hp = hyperparams(&args.model);
    hp.validate()?;
    let layout = Layout::new(ModelShape::of(&corpus, hp.truncation), &hp);
    let manifest = layout.manifest(Some(corpus.table()));
    match &args.out {
        Some(p) => io::write_json(p, &manifest)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&manifest).expect("manifest serializes")
        ),
    }
    Ok(())
}

fn run(argv: Vec<String>) -> CliResult {
    let matches = Cli::command()
        .try_get_matches_from(&argv)
        .map_err(|e| {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    std::process::exit(0)
                }
                _ => CliError::Usage(String::new()),
            }
        })?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    match &cli.command {
        Command::Fit(a) => {
            let sub = matches.subcommand_matches("fit").expect("fit matches");
            cmd_fit(a, sub, argv)
        }
        Command::Simulate(a) => cmd_simulate(a, argv),
        Command::Align(a) => cmd_align(a, argv),
        Command::Report(a) => cmd_report(a, argv),
        Command::Oracle(a) => cmd_oracle(a, argv),
        Command::Layout(a) => cmd_layout(a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(&e, CliError::Usage(m) if m.is_empty()) {
                eprintln!("admix: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
