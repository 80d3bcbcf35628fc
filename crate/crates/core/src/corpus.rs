//! Sound-change dataset ingestion and indexing.
//!
//! The on-disk format is a UTF-8 TSV with header
//! `language	etymon	sound	reflex` and an optional fifth `gloss` column.
//! Lines starting with `#` are comments. Each data row is one observed reflex
//! of one sound slot of one etymon in one language.
//!
//! An *environment* is the pair `(etymon, sound)`. Every environment carries
//! its own outcome alphabet: the set of reflexes observed for it. Environments,
//! outcomes and languages are indexed in lexicographic order so that ids do
//! not depend on row order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

const COLUMNS: [&str; 4] = ["language", "etymon", "sound", "reflex"];
const GLOSS: &str = "gloss";

/// One observed reflex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SoundChangeInstance {
    pub language: String,
    pub etymon: String,
    pub sound: String,
    pub reflex: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss: Option<String>,
}

impl SoundChangeInstance {
    pub fn new(language: &str, etymon: &str, sound: &str, reflex: &str) -> Self {
        Self {
            language: language.to_string(),
            etymon: etymon.to_string(),
            sound: sound.to_string(),
            reflex: reflex.to_string(),
            gloss: None,
        }
    }

    pub fn env_key(&self) -> EnvKey {
        EnvKey {
            etymon: self.etymon.clone(),
            sound: self.sound.clone(),
        }
    }
}

/// `(etymon, sound)`: the conditioning environment of a sound change.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvKey {
    pub etymon: String,
    pub sound: String,
}

impl std::fmt::Display for EnvKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.etymon, self.sound)
    }
}

/// Dense integer triple `(language, environment, outcome)` for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub language: usize,
    pub env: usize,
    pub outcome: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EnvironmentTable {
    pub environments: Vec<EnvKey>,
    pub outcomes: Vec<Vec<String>>,
    pub languages: Vec<String>,
}

impl EnvironmentTable {
    pub fn num_environments(&self) -> usize {
        self.environments.len()
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn outcome_counts(&self) -> Vec<usize> {
        self.outcomes.iter().map(Vec::len).collect()
    }

    pub fn env_id(&self, key: &EnvKey) -> Option<usize> {
        self.environments.binary_search(key).ok()
    }

    pub fn language_id(&self, language: &str) -> Option<usize> {
        self.languages
            .binary_search_by(|l| l.as_str().cmp(language))
            .ok()
    }

    pub fn outcome_id(&self, env: usize, reflex: &str) -> Option<usize> {
        self.outcomes
            .get(env)?
            .binary_search_by(|o| o.as_str().cmp(reflex))
            .ok()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Drop rows identical (all columns) to an earlier row.
    pub dedup: bool,
}

/// An indexed dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    instances: Vec<SoundChangeInstance>,
    tokens: Vec<Token>,
    table: EnvironmentTable,
}

impl Corpus {
    /// Index `instances`, with the language list taken from the instances.
    pub fn from_instances(instances: Vec<SoundChangeInstance>) -> Self {
        let languages: BTreeSet<String> =
            instances.iter().map(|i| i.language.clone()).collect();
        Self::with_languages(instances, languages.into_iter().collect())
    }

    /// Index `instances` against an explicit language list. Languages that
    /// appear in the instances but not in `languages` are added.
    pub fn with_languages(instances: Vec<SoundChangeInstance>, languages: Vec<String>) -> Self {
        Self::with_declared_outcomes(instances, languages, Vec::new())
    }

    /// Index `instances` with extra outcomes added to environment alphabets
    /// even though no row attests them.
    pub fn with_declared_outcomes(
        instances: Vec<SoundChangeInstance>,
        languages: Vec<String>,
        declared: Vec<(EnvKey, String)>,
    ) -> Self {
        let mut langs: BTreeSet<String> = languages.into_iter().collect();
        let mut envs: BTreeMap<EnvKey, BTreeSet<String>> = BTreeMap::new();
        for (key, reflex) in declared {
            envs.entry(key).or_default().insert(reflex);
        }
        for inst in &instances {
            langs.insert(inst.language.clone());
            envs.entry(inst.env_key())
                .or_default()
                .insert(inst.reflex.clone());
        }
        let table = EnvironmentTable {
            environments: envs.keys().cloned().collect(),
            outcomes: envs
                .into_values()
                .map(|set| set.into_iter().collect())
                .collect(),
            languages: langs.into_iter().collect(),
        };
        let tokens = instances
            .iter()
            .map(|inst| {
                let env = table.env_id(&inst.env_key()).expect("indexed environment");
                Token {
                    language: table.language_id(&inst.language).expect("indexed language"),
                    env,
                    outcome: table.outcome_id(env, &inst.reflex).expect("indexed outcome"),
                }
            })
            .collect();
        Self {
            instances,
            tokens,
            table,
        }
    }

    pub fn empty() -> Self {
        Self::from_instances(Vec::new())
    }

    pub fn instances(&self) -> &[SoundChangeInstance] {
        &self.instances
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn table(&self) -> &EnvironmentTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of distinct `(environment, outcome)` types.
    pub fn distinct_types(&self) -> usize {
        self.tokens
            .iter()
            .map(|t| (t.env, t.outcome))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn language_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.table.num_languages()];
        for t in &self.tokens {
            counts[t.language] += 1;
        }
        counts
    }

    /// Each language's share of the tokens. All zeros for an empty corpus.
    pub fn language_shares(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.language_counts()
            .into_iter()
            .map(|c| c as f64 / n)
            .collect()
    }

    /// Keep the instances matching `keep` and re-index. The language list is
    /// preserved so that languages losing all their rows stay visible.
    pub fn retain<F: FnMut(&SoundChangeInstance) -> bool>(&self, mut keep: F) -> Corpus {
        let kept = self.instances.iter().filter(|i| keep(i)).cloned().collect();
        Corpus::with_languages(kept, self.table.languages.clone())
    }

    /// Like [`Corpus::retain`] but keeps the full environment table, so the
    /// result indexes against the same parameter dimensions.
    pub fn retain_indexed<F: FnMut(&SoundChangeInstance) -> bool>(&self, mut keep: F) -> Corpus {
        let kept = self.instances.iter().filter(|i| keep(i)).cloned().collect();
        let declared = self
            .table
            .environments
            .iter()
            .zip(&self.table.outcomes)
            .flat_map(|(k, outs)| outs.iter().map(move |o| (k.clone(), o.clone())))
            .collect();
        Corpus::with_declared_outcomes(kept, self.table.languages.clone(), declared)
    }

    pub fn has_gloss(&self) -> bool {
        self.instances.iter().any(|i| i.gloss.is_some())
    }

    /// Serialize to the canonical TSV format. Rows keep their stored order.
    pub fn to_tsv(&self) -> String {
        let gloss = self.has_gloss();
        let mut out = COLUMNS.join("\t");
        if gloss {
            out.push('\t');
            out.push_str(GLOSS);
        }
        out.push('\n');
        for inst in &self.instances {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                inst.language, inst.etymon, inst.sound, inst.reflex
            );
            if gloss {
                out.push('\t');
                out.push_str(inst.gloss.as_deref().unwrap_or(""));
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_dataset(path: impl AsRef<Path>, options: ParseOptions) -> Result<Corpus, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_bytes(&bytes, options)
}

/// Parse TSV content. Row numbers in errors are 1-based line numbers.
pub fn parse_bytes(bytes: &[u8], options: ParseOptions) -> Result<Corpus, DataError> {
    let mut header: Option<bool> = None;
    let mut instances = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let row = idx + 1;
        let line = std::str::from_utf8(raw).map_err(|_| DataError::NonUtf8Input { row })?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let Some(has_gloss) = header else {
            header = Some(parse_header(&fields)?);
            continue;
        };
        let expected = if has_gloss { 5 } else { 4 };
        // a trailing empty gloss may be dropped by editors
        if fields.len() != expected && !(has_gloss && fields.len() == 4) {
            return Err(DataError::FieldCount {
                row,
                expected,
                found: fields.len(),
            });
        }
        let mut values = [""; 4];
        for (k, name) in COLUMNS.iter().enumerate() {
            let v = fields[k].trim();
            if v.is_empty() {
                return Err(DataError::EmptyField {
                    row,
                    column: name.to_string(),
                });
            }
            values[k] = v;
        }
        let gloss = fields
            .get(4)
            .map(|g| g.trim())
            .filter(|g| !g.is_empty())
            .map(str::to_string);
        let inst = SoundChangeInstance {
            language: values[0].to_string(),
            etymon: values[1].to_string(),
            sound: values[2].to_string(),
            reflex: values[3].to_string(),
            gloss,
        };
        if options.dedup && !seen.insert(inst.clone()) {
            continue;
        }
        instances.push(inst);
    }
    if header.is_none() {
        return Err(DataError::MissingColumn(COLUMNS[0].to_string()));
    }
    Ok(Corpus::from_instances(instances))
}

fn parse_header(fields: &[&str]) -> Result<bool, DataError> {
    for (k, name) in COLUMNS.iter().enumerate() {
        if fields.get(k).map(|f| f.trim()) != Some(*name) {
            return Err(DataError::MissingColumn(name.to_string()));
        }
    }
    match fields.get(4).map(|f| f.trim()) {
        None => Ok(false),
        Some(GLOSS) if fields.len() == 5 => Ok(true),
        Some(_) => Err(DataError::MissingColumn(GLOSS.to_string())),
    }
}

/// Environment keys shared by etyma with different glosses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct HomophoneReport {
    pub collisions: Vec<(EnvKey, Vec<String>)>,
}

/// Formally identical etyma already share one environment key; this reports
/// the keys whose rows carry more than one distinct gloss.
pub fn merge_homophones(corpus: Corpus) -> (Corpus, HomophoneReport) {
    let mut glosses: BTreeMap<EnvKey, BTreeSet<String>> = BTreeMap::new();
    for inst in corpus.instances() {
        if let Some(g) = &inst.gloss {
            glosses.entry(inst.env_key()).or_default().insert(g.clone());
        }
    }
    let collisions = glosses
        .into_iter()
        .filter(|(_, g)| g.len() > 1)
        .map(|(k, g)| (k, g.into_iter().collect()))
        .collect();
    (corpus, HomophoneReport { collisions })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub language_counts: Vec<(String, usize)>,
    /// Environments with a single observed outcome.
    pub uninformative: Vec<EnvKey>,
    /// Languages with fewer than the minimum number of instances.
    pub sparse_languages: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

pub fn validate(corpus: &Corpus, min_language_count: usize) -> ValidationReport {
    let table = corpus.table();
    let counts = corpus.language_counts();
    let language_counts: Vec<(String, usize)> = table
        .languages
        .iter()
        .cloned()
        .zip(counts.iter().copied())
        .collect();
    let uninformative: Vec<EnvKey> = table
        .environments
        .iter()
        .zip(&table.outcomes)
        .filter(|(_, o)| o.len() < 2)
        .map(|(k, _)| k.clone())
        .collect();
    let sparse_languages: Vec<String> = language_counts
        .iter()
        .filter(|(_, c)| *c < min_language_count.max(1))
        .map(|(l, _)| l.clone())
        .collect();
    let mut warnings = Vec::new();
    for k in &uninformative {
        warnings.push(format!("environment {k} is uninformative (single outcome)"));
    }
    for (l, c) in &language_counts {
        if sparse_languages.contains(l) {
            warnings.push(format!(
                "language {l} has {c} instances (minimum {})",
                min_language_count.max(1)
            ));
        }
    }
    ValidationReport {
        language_counts,
        uninformative,
        sparse_languages,
        warnings,
    }
}
