//! On-disk artifacts: fit-result directories, alignment output, reports and
//! the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{ComponentPermutation, ConsensusEstimate};
use crate::analytics::{self, LanguageProfile, TokenPosterior, TypeAverageRow};
use crate::corpus::Corpus;
use crate::error::DataError;
use crate::genmodel::{Hyperparams, ModelParams};
use crate::seeding;
use crate::vinfer::{mean_params, ElboCheckpoint, FitConfig, FitResult, VariationalState};

pub const PARAMS_MEAN: &str = "params_mean.json";
pub const DRAWS: &str = "draws.ndjson";
pub const ELBO_TRACE: &str = "elbo_trace.tsv";
pub const CONFIG: &str = "config.json";
pub const STATE: &str = "state.json";
pub const MANIFEST: &str = "manifest.json";
pub const PERMUTATIONS: &str = "permutations.json";
pub const CONSENSUS: &str = "consensus.json";
pub const LANGUAGE_PROFILES: &str = "language_profiles.tsv";
pub const TYPE_POSTERIORS: &str = "type_posteriors.tsv";
pub const TOKEN_POSTERIORS: &str = "token_posteriors.tsv";
pub const PLOT_DATA: &str = "profiles_plotdata.json";

type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline. Output is a pure function of the
/// value, so equal values give equal bytes.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Resolved configuration as written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub fit: FitConfig,
    pub hyperparams: Hyperparams,
    pub digest: String,
}

impl ResolvedConfig {
    pub fn new(fit: FitConfig, hyperparams: Hyperparams) -> Self {
        let digest = crate::vinfer::config_digest(&fit, &hyperparams);
        Self {
            fit,
            hyperparams,
            digest,
        }
    }
}

/// Run-level bookkeeping kept next to the variational state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    run: usize,
    seed: u64,
    iterations_run: usize,
    converged: bool,
    config_digest: String,
    map_point: ModelParams,
    state: VariationalState,
}

pub fn elbo_trace_tsv(trace: &[ElboCheckpoint]) -> String {
    let mut out = String::from("step\tblock_mean\tsmoothed\n");
    for c in trace {
        out.push_str(&format!("{}\t{}\t{}\n", c.step, c.block_mean, c.smoothed));
    }
    out
}

fn parse_elbo_trace(path: &Path, text: &str) -> Result<Vec<ElboCheckpoint>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(io_err(path, format!("bad trace line `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| io_err(path, e));
            Ok(ElboCheckpoint {
                step: f[0].parse().map_err(|e| io_err(path, e))?,
                block_mean: num(f[1])?,
                smoothed: num(f[2])?,
            })
        })
        .collect()
}

/// Directory name of run `r` inside a fit output directory.
pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run_{run}"))
}

/// Persist one run as a directory.
pub fn write_fit_result(dir: &Path, result: &FitResult, config: &ResolvedConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mean = mean_params(&result.draws).unwrap_or_else(|| result.map_point.clone());
    write_json(&dir.join(PARAMS_MEAN), &mean)?;
    let mut draws = String::new();
    for d in &result.draws {
        draws.push_str(&serde_json::to_string(d).map_err(|e| io_err(dir, e))?);
        draws.push('\n');
    }
    write_text(&dir.join(DRAWS), &draws)?;
    write_text(&dir.join(ELBO_TRACE), &elbo_trace_tsv(&result.elbo_trace))?;
    write_json(&dir.join(CONFIG), config)?;
    write_json(
        &dir.join(STATE),
        &RunState {
            run: result.run,
            seed: result.seed,
            iterations_run: result.iterations_run,
            converged: result.converged,
            config_digest: result.config_digest.clone(),
            map_point: result.map_point.clone(),
            state: result.state.clone(),
        },
    )
}

pub fn read_fit_result(dir: &Path) -> Result<FitResult> {
    let run: RunState = read_json(&dir.join(STATE))?;
    let draws_path = dir.join(DRAWS);
    let draws_text = fs::read_to_string(&draws_path).map_err(|e| io_err(&draws_path, e))?;
    let draws = draws_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(&draws_path, e)))
        .collect::<Result<Vec<ModelParams>>>()?;
    let trace_path = dir.join(ELBO_TRACE);
    let trace_text = fs::read_to_string(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    Ok(FitResult {
        run: run.run,
        seed: run.seed,
        state: run.state,
        elbo_trace: parse_elbo_trace(&trace_path, &trace_text)?,
        draws,
        map_point: run.map_point,
        config_digest: run.config_digest,
        iterations_run: run.iterations_run,
        converged: run.converged,
    })
}

/// Every `run_*` directory below `out`, in run order.
pub fn read_fit_dir(out: &Path) -> Result<Vec<FitResult>> {
    let mut dirs: Vec<(usize, PathBuf)> = fs::read_dir(out)
        .map_err(|e| io_err(out, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let r = name.strip_prefix("run_")?.parse().ok()?;
            Some((r, e.path()))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(io_err(out, "no run_* directories"));
    }
    dirs.iter().map(|(_, d)| read_fit_result(d)).collect()
}

pub fn write_alignment(
    out: &Path,
    perms: &[ComponentPermutation],
    consensus: &ConsensusEstimate,
) -> Result<()> {
    write_json(&out.join(PERMUTATIONS), perms)?;
    write_json(&out.join(CONSENSUS), consensus)
}

/// Everything the `report` step emits.
#[derive(Debug, Clone)]
pub struct Report {
    pub posteriors: Vec<TokenPosterior>,
    pub types: Vec<TypeAverageRow>,
    pub profiles: Vec<LanguageProfile>,
    pub plot: analytics::PlotData,
}

impl Report {
    pub fn build(consensus: &ConsensusEstimate, corpus: &Corpus) -> crate::error::Result<Self> {
        let posteriors = analytics::token_posteriors(consensus, corpus)?;
        let types = analytics::type_average(&posteriors, corpus);
        let profiles = analytics::language_profiles(consensus, &posteriors, corpus);
        let plot = analytics::plot_data(&profiles, consensus);
        Ok(Self {
            posteriors,
            types,
            profiles,
            plot,
        })
    }

    pub fn write(&self, out: &Path, corpus: &Corpus, truncation: usize) -> Result<()> {
        write_text(
            &out.join(LANGUAGE_PROFILES),
            &analytics::language_profiles_tsv(&self.profiles, truncation),
        )?;
        write_text(
            &out.join(TYPE_POSTERIORS),
            &analytics::type_posteriors_tsv(&self.types, truncation),
        )?;
        write_text(
            &out.join(TOKEN_POSTERIORS),
            &analytics::token_posteriors_tsv(&self.posteriors, corpus, truncation),
        )?;
        write_json(&out.join(PLOT_DATA), &self.plot)
    }
}

/// Provenance of one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub seed_scheme: String,
    pub input_sha256: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn start(command: Vec<String>) -> Self {
        let now = unix_now();
        Self {
            tool: "admix".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            config_digest: None,
            seed: None,
            seed_scheme: seeding::SCHEME.into(),
            input_sha256: None,
            started_unix: now,
            finished_unix: now,
        }
    }

    pub fn finish(mut self, out: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        write_json(&out.join(MANIFEST), &self)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_bytes, ParseOptions};
    use crate::vinfer::fit;

    #[test]
    fn fit_result_round_trips_through_a_directory() {
        let text = "language\tetymon\tsound\treflex\nA\tx\ts\ta\nA\tx\ts\tb\nB\ty\ts\tc\n";
        let corpus = parse_bytes(text.as_bytes(), ParseOptions::default()).unwrap();
        let hp = Hyperparams {
            truncation: 2,
            ..Hyperparams::default()
        };
        let cfg = FitConfig {
            iterations: 30,
            runs: 1,
            posterior_draws: 3,
            checkpoint_every: 10,
            ..FitConfig::default()
        };
        let result = fit(&corpus, &hp, &cfg, 1).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let run = run_dir(dir.path(), 0);
        write_fit_result(&run, &result, &ResolvedConfig::new(cfg, hp)).unwrap();
        for f in [PARAMS_MEAN, DRAWS, ELBO_TRACE, CONFIG, STATE] {
            assert!(run.join(f).exists(), "{f}");
        }
        let back = read_fit_dir(dir.path()).unwrap();
        assert_eq!(back, vec![result]);
    }

    #[test]
    fn trace_tsv_has_header_and_rows() {
        let t = elbo_trace_tsv(&[ElboCheckpoint {
            step: 100,
            block_mean: -1.5,
            smoothed: -1.5,
        }]);
        assert_eq!(t, "step\tblock_mean\tsmoothed\n100\t-1.5\t-1.5\n");
    }
}
