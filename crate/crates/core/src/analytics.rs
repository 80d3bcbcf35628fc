//! Component posteriors per token, per sound-change type and per language.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::align::ConsensusEstimate;
use crate::corpus::{Corpus, Token};
use crate::error::{ModelError, Result};
use crate::math::argmax;

/// Default usage threshold below which components are left out of human
/// tables.
pub const DEFAULT_MIN_USAGE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosterior {
    pub index: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAverageRow {
    pub etymon: String,
    pub sound: String,
    pub reflex: String,
    pub count: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub language: String,
    pub tokens: usize,
    /// The language's consensus θ row.
    pub theta: Vec<f64>,
    /// Mean of the language's token posteriors; absent without tokens.
    pub empirical: Option<Vec<f64>>,
    pub argmax_disagrees: bool,
}

/// `P(z = t | θ, φ, x, y) ∝ θ_ℓ,t · φ_t,x,y`.
pub fn token_component_posterior(consensus: &ConsensusEstimate, token: Token) -> Result<Vec<f64>> {
    let theta = consensus
        .theta
        .get(token.language)
        .ok_or_else(|| ModelError::DimensionMismatch(format!("language {}", token.language)))?;
    let mut probs = Vec::with_capacity(theta.len());
    for (t, &w) in theta.iter().enumerate() {
        let phi = consensus
            .phi
            .get(t)
            .and_then(|c| c.get(token.env))
            .and_then(|row| row.get(token.outcome))
            .ok_or_else(|| ModelError::DimensionMismatch(format!("token {token:?}")))?;
        probs.push(w * phi);
    }
    let total: f64 = probs.iter().sum();
    if !(total >= 1e-300) {
        return Err(ModelError::DegenerateMass(total));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

pub fn token_posteriors(consensus: &ConsensusEstimate, corpus: &Corpus) -> Result<Vec<TokenPosterior>> {
    corpus
        .tokens()
        .iter()
        .enumerate()
        .map(|(index, &tok)| {
            token_component_posterior(consensus, tok).map(|probs| TokenPosterior { index, probs })
        })
        .collect()
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, t: usize) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; t];
    let mut n = 0;
    for row in rows {
        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    (acc, n)
}

/// Unweighted mean of token posteriors per `(etymon, sound, reflex)`, rows
/// sorted by that key.
pub fn type_average(posteriors: &[TokenPosterior], corpus: &Corpus) -> Vec<TypeAverageRow> {
    let t = posteriors.first().map_or(0, |p| p.probs.len());
    let mut groups: BTreeMap<(&str, &str, &str), Vec<&[f64]>> = BTreeMap::new();
    for post in posteriors {
        let inst = &corpus.instances()[post.index];
        groups
            .entry((&inst.etymon, &inst.sound, &inst.reflex))
            .or_default()
            .push(&post.probs);
    }
    groups
        .into_iter()
        .map(|((etymon, sound, reflex), rows)| {
            let (probs, count) = mean_of(rows.into_iter(), t);
            TypeAverageRow {
                etymon: etymon.to_string(),
                sound: sound.to_string(),
                reflex: reflex.to_string(),
                count,
                probs,
            }
        })
        .collect()
}

pub fn language_profiles(
    consensus: &ConsensusEstimate,
    posteriors: &[TokenPosterior],
    corpus: &Corpus,
) -> Vec<LanguageProfile> {
    let t = consensus.truncation();
    let mut by_lang: Vec<Vec<&[f64]>> = vec![Vec::new(); corpus.table().num_languages()];
    for post in posteriors {
        by_lang[corpus.tokens()[post.index].language].push(&post.probs);
    }
    corpus
        .table()
        .languages
        .iter()
        .zip(by_lang)
        .enumerate()
        .map(|(l, (language, rows))| {
            let theta = consensus.theta[l].clone();
            let (mean, n) = mean_of(rows.into_iter(), t);
            let empirical = (n > 0).then_some(mean);
            let argmax_disagrees = empirical
                .as_ref()
                .is_some_and(|e| argmax(e) != argmax(&theta));
            LanguageProfile {
                language: language.clone(),
                tokens: n,
                theta,
                empirical,
                argmax_disagrees,
            }
        })
        .collect()
}

fn header(first: &[&str], t: usize, prefix: &str) -> String {
    let mut cols: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=t).map(|k| format!("{prefix}{k}")));
    cols.join("\t") + "\n"
}

fn push_probs(out: &mut String, probs: &[f64]) {
    for p in probs {
        let _ = write!(out, "\t{p}");
    }
}

pub fn type_posteriors_tsv(rows: &[TypeAverageRow], t: usize) -> String {
    let mut out = header(&["etymon", "sound", "reflex"], t, "p_k");
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.etymon, r.sound, r.reflex);
        push_probs(&mut out, &r.probs);
        out.push('\n');
    }
    out
}

pub fn token_posteriors_tsv(posteriors: &[TokenPosterior], corpus: &Corpus, t: usize) -> String {
    let mut out = header(&["index", "language", "etymon", "sound", "reflex"], t, "p_k");
    for p in posteriors {
        let inst = &corpus.instances()[p.index];
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.index, inst.language, inst.etymon, inst.sound, inst.reflex
        );
        push_probs(&mut out, &p.probs);
        out.push('\n');
    }
    out
}

pub fn language_profiles_tsv(profiles: &[LanguageProfile], t: usize) -> String {
    let mut cols = vec!["language".to_string(), "tokens".to_string()];
    cols.extend((1..=t).map(|k| format!("theta_k{k}")));
    cols.extend((1..=t).map(|k| format!("empirical_k{k}")));
    cols.push("argmax_disagrees".into());
    let mut out = cols.join("\t") + "\n";
    for p in profiles {
        let _ = write!(out, "{}\t{}", p.language, p.tokens);
        push_probs(&mut out, &p.theta);
        match &p.empirical {
            Some(e) => push_probs(&mut out, e),
            None => (0..t).for_each(|_| out.push_str("\tNA")),
        }
        let _ = writeln!(out, "\t{}", p.argmax_disagrees);
    }
    out
}

/// Stacked-bar data for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub components: Vec<usize>,
    pub usage: Vec<f64>,
    pub languages: Vec<PlotBar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotBar {
    pub language: String,
    pub segments: Vec<f64>,
}

pub fn plot_data(profiles: &[LanguageProfile], consensus: &ConsensusEstimate) -> PlotData {
    PlotData {
        components: (1..=consensus.truncation()).collect(),
        usage: consensus.usage.clone(),
        languages: profiles
            .iter()
            .map(|p| PlotBar {
                language: p.language.clone(),
                segments: p.theta.clone(),
            })
            .collect(),
    }
}

/// Components kept in human tables.
pub fn visible_components(usage: &[f64], min_usage: f64) -> Vec<usize> {
    (0..usage.len()).filter(|&t| usage[t] >= min_usage).collect()
}

/// Two-decimal table of type averages over the visible components, in the
/// `etymon | sound | reflex | k=…` layout.
pub fn type_table_human(rows: &[TypeAverageRow], usage: &[f64], min_usage: f64) -> String {
    let keep = visible_components(usage, min_usage);
    let mut out = String::from("etymon | sound | reflex |");
    for &k in &keep {
        let _ = write!(out, " k={}", k + 1);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{} | {} | {} |", r.etymon, r.sound, r.reflex);
        for &k in &keep {
            let _ = write!(out, " {:.2}", r.probs[k]);
        }
        out.push('\n');
    }
    out
}

pub fn profiles_table_human(profiles: &[LanguageProfile], usage: &[f64], min_usage: f64) -> String {
    let keep = visible_components(usage, min_usage);
    let mut out = String::from("language |");
    for &k in &keep {
        let _ = write!(out, " k={}", k + 1);
    }
    out.push('\n');
    for p in profiles {
        let _ = write!(out, "{} |", p.language);
        for &k in &keep {
            let _ = write!(out, " {:.2}", p.theta[k]);
        }
        if p.argmax_disagrees {
            out.push_str(" *");
        }
        out.push('\n');
    }
    out
}
