//! The end-to-end fit: independent runs, alignment, consensus and report,
//! plus the directory layout they are written to.

use std::path::Path;

use crate::align::{self, ComponentPermutation, ConsensusEstimate};
use crate::corpus::Corpus;
use crate::error::{DataError, Result};
use crate::genmodel::Hyperparams;
use crate::io::{self, Report, ResolvedConfig};
use crate::vinfer::{self, FitConfig, FitResult};

#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub runs: Vec<FitResult>,
    pub permutations: Vec<ComponentPermutation>,
    pub consensus: ConsensusEstimate,
    pub report: Report,
}

/// Aligned consensus of `runs`; a single run is its own consensus.
pub fn consensus_of(
    runs: &[FitResult],
    corpus: &Corpus,
) -> Result<(Vec<ComponentPermutation>, ConsensusEstimate)> {
    let perms = if runs.len() > 1 {
        align::align(runs)?
    } else {
        runs.iter()
            .map(|r| ComponentPermutation::identity(r.map_point.truncation()))
            .collect()
    };
    let consensus = align::merge(runs, &perms, &corpus.language_shares())?;
    Ok((perms, consensus))
}

pub fn fit_pipeline(
    corpus: &Corpus,
    hp: &Hyperparams,
    config: &FitConfig,
    parallel_runs: usize,
) -> Result<FitOutputs> {
    let runs = vinfer::fit(corpus, hp, config, parallel_runs)?;
    let (permutations, consensus) = consensus_of(&runs, corpus)?;
    let report = Report::build(&consensus, corpus)?;
    Ok(FitOutputs {
        runs,
        permutations,
        consensus,
        report,
    })
}

/// Write every artifact of a fit below `out`: one `run_<r>` directory per
/// run, the alignment, and the report files.
pub fn write_fit_outputs(
    out: &Path,
    corpus: &Corpus,
    outputs: &FitOutputs,
    config: &ResolvedConfig,
) -> std::result::Result<(), DataError> {
    for run in &outputs.runs {
        io::write_fit_result(&io::run_dir(out, run.run), run, config)?;
    }
    io::write_json(&out.join(io::CONFIG), config)?;
    io::write_alignment(out, &outputs.permutations, &outputs.consensus)?;
    outputs
        .report
        .write(out, corpus, outputs.consensus.truncation())
}
