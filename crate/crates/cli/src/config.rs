//! Resolved per-command configuration.
//!
//! Each command reads an optional JSON file into its config struct, then
//! explicit flags overwrite individual fields. The resolved struct is what
//! gets echoed into the sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use markovmouth::lexicon::Casing;
use markovmouth::samplers::SamplerConfig;
use markovmouth::training::TrainConfig;

use crate::CliError;

pub const DEFAULT_TIMEOUT_SECS: u64 = 30;

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

/// Reads `path` into `T`, insisting that a `command` key, when present,
/// names the command being run.
pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(vec![format!("config {} is not valid JSON: {e}", path.display())]))?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(c) = obj.remove("command") {
            if c.as_str() != Some(command) {
                return Err(CliError::Config(vec![format!(
                    "config {} is for command {c}, not {command:?}",
                    path.display()
                )]));
            }
        }
    }
    serde_json::from_value(value)
        .map_err(|e| CliError::Config(vec![format!("config {}: {e}", path.display())]))
}

/// Settings for talking to an external scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSettings {
    pub timeout_secs: u64,
    pub pool_size: usize,
}

impl Default for ExternalSettings {
    fn default() -> Self {
        Self {
            timeout_secs: default_timeout(),
            pool_size: 1,
        }
    }
}

fn require<T>(field: &Option<T>, name: &str, problems: &mut Vec<String>) {
    if field.is_none() {
        problems.push(format!("missing {name}"));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub scorer: Option<String>,
    pub vocab: Option<PathBuf>,
    /// Source of `from_corpus` initial states.
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Total generations wanted; sets the chain count when given.
    pub count: Option<usize>,
    pub threads: Option<usize>,
    pub external: ExternalSettings,
    pub sampler: SamplerConfig,
}

impl SampleConfig {
    /// Problems that do not depend on the vocabulary size.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        require(&self.scorer, "scorer (--scorer)", &mut out);
        if self.count == Some(0) {
            out.push("count must be at least 1".into());
        }
        if self.sampler.init == markovmouth::samplers::InitStrategy::FromCorpus && self.corpus.is_none() {
            out.push("init from_corpus needs --corpus".into());
        }
        out.extend(self.sampler.problems(usize::MAX));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub corpus: Option<PathBuf>,
    /// Existing vocabulary; otherwise one is built from the corpus.
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
    pub casing: Casing,
    /// Drop sentences with out-of-vocabulary tokens instead of failing.
    pub skip_oov: bool,
    pub window: usize,
    /// Parameters start from `U(-init_scale, init_scale)`; 0 means zeros.
    pub init_scale: f64,
    /// Resume from a log-linear checkpoint.
    pub init_model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub train: TrainConfig,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            vocab: None,
            min_count: 1,
            casing: Casing::Lower,
            skip_oov: false,
            window: markovmouth::loglinear::DEFAULT_WINDOW,
            init_scale: 0.0,
            init_model: None,
            out: None,
            threads: None,
            train: TrainConfig::default(),
        }
    }
}

impl TrainCommandConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        require(&self.corpus, "corpus (--corpus)", &mut out);
        require(&self.out, "output path (--out)", &mut out);
        if self.min_count == 0 {
            out.push("min_count must be at least 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            out.push(format!("init_scale must be non-negative, got {}", self.init_scale));
        }
        if self.init_model.is_some() && self.vocab.is_none() {
            out.push("init_model needs the vocabulary it was trained with (--vocab)".into());
        }
        out.extend(self.train.problems());
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub scorer: Option<String>,
    pub vocab: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub external: ExternalSettings,
}

impl RankConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        require(&self.scorer, "scorer (--scorer)", &mut out);
        require(&self.input, "input sentences (--input)", &mut out);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// JSONL from `sample`, or plain text with one sentence per line.
    pub generations: Option<PathBuf>,
    pub references: BTreeMap<String, PathBuf>,
    pub lowercase: bool,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// External scorer answering `ar_logprob`, for perplexity.
    pub ppl_scorer: Option<String>,
    pub vocab: Option<PathBuf>,
    pub threads: Option<usize>,
    pub external: ExternalSettings,
}

impl EvalConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        require(&self.generations, "generations (--generations)", &mut out);
        if self.references.contains_key(markovmouth::evalkit::SELF_KEY) {
            out.push(format!("reference name {:?} is reserved", markovmouth::evalkit::SELF_KEY));
        }
        if let Some(s) = &self.ppl_scorer {
            if !s.starts_with("external:") {
                out.push(format!("ppl_scorer must be an external endpoint, got {s:?}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// `f2` or `loglinear`; ignored when `scorer` is set.
    pub fixture: Option<String>,
    pub scorer: Option<String>,
    pub vocab: Option<PathBuf>,
    pub length: Option<usize>,
    /// Gibbs steps after burn-in.
    pub steps: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub top_k: Option<usize>,
    pub chains: usize,
    pub seed: u64,
    pub threshold: f64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub external: ExternalSettings,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fixture: None,
            scorer: None,
            vocab: None,
            length: None,
            steps: 200_000,
            burn_in: 500,
            thinning: 10,
            top_k: None,
            chains: 1,
            seed: 0,
            threshold: 0.02,
            out: None,
            threads: None,
            external: ExternalSettings::default(),
        }
    }
}

pub const FIXTURES: [&str; 2] = ["f2", "loglinear"];

impl OracleConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match (&self.fixture, &self.scorer) {
            (None, None) => out.push("need --fixture or --scorer".into()),
            (Some(f), None) if !FIXTURES.contains(&f.as_str()) => {
                out.push(format!("unknown fixture {f:?}; expected one of {FIXTURES:?}"))
            }
            (_, Some(_)) if self.length.is_none() => out.push("--scorer needs --length".into()),
            _ => {}
        }
        if self.steps == 0 {
            out.push("steps must be at least 1".into());
        }
        if self.thinning == 0 {
            out.push("thinning must be at least 1".into());
        }
        if self.chains == 0 {
            out.push("chains must be at least 1".into());
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            out.push(format!("threshold must be non-negative, got {}", self.threshold));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub scorer: Option<String>,
    pub vocab: Option<PathBuf>,
    /// `host:port`; stdio when absent.
    pub listen: Option<String>,
    pub framing: bool,
    pub max_len: usize,
    pub threads: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            scorer: None,
            vocab: None,
            listen: None,
            framing: false,
            max_len: markovmouth::lexicon::DEFAULT_MAX_LEN,
            threads: None,
        }
    }
}

impl ServeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        require(&self.scorer, "scorer (--scorer)", &mut out);
        if self.scorer.as_deref().is_some_and(|s| s.starts_with("external:")) {
            out.push("serve wraps a built-in scorer, not an external one".into());
        }
        if self.max_len == 0 {
            out.push("max_len must be at least 1".into());
        }
        out
    }
}

pub fn check(problems: Vec<String>) -> Result<(), CliError> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(problems))
    }
}
