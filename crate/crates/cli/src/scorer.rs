//! `tabular:<path>`, `loglinear:<path>` and `external:<endpoint>` specs.

use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::Context;

use markovmouth::protocol::{ClientOptions, Endpoint, ExternalScorer};
use markovmouth::{LogLinearScorer, Scorer, TabularScorer, Vocabulary};

use crate::config::ExternalSettings;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerSpec {
    Tabular(String),
    LogLinear(String),
    External(Endpoint),
}

impl ScorerSpec {
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| format!("scorer {spec:?} must look like tabular:<path>, loglinear:<path> or external:<endpoint>"))?;
        match kind {
            "tabular" if !rest.is_empty() => Ok(Self::Tabular(rest.into())),
            "loglinear" if !rest.is_empty() => Ok(Self::LogLinear(rest.into())),
            "external" => rest.parse().map(Self::External).map_err(|e| e.to_string()),
            _ => Err(format!("unknown scorer spec {spec:?}")),
        }
    }
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

pub fn client_options(settings: &ExternalSettings) -> ClientOptions {
    ClientOptions {
        timeout: Duration::from_secs(settings.timeout_secs),
        pool_size: settings.pool_size.max(1),
    }
}

/// Loads the scorer named by `spec`. Built-in scorers need `vocab`; an
/// external one is checked against it when given.
pub fn load_scorer(spec: &str, vocab: Option<&Path>, external: &ExternalSettings) -> Result<Box<dyn Scorer>, CliError> {
    let parsed = ScorerSpec::parse(spec).map_err(|p| CliError::Config(vec![p]))?;
    let need_vocab = || CliError::Config(vec![format!("scorer {spec:?} needs --vocab")]);
    let scorer: Box<dyn Scorer> = match parsed {
        ScorerSpec::Tabular(path) => {
            let vocab = load_vocab(vocab.ok_or_else(need_vocab)?)?;
            let text = fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
            Box::new(TabularScorer::from_json(&text, vocab).with_context(|| format!("loading {path}"))?)
        }
        ScorerSpec::LogLinear(path) => {
            let vocab = load_vocab(vocab.ok_or_else(need_vocab)?)?;
            let text = fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
            Box::new(LogLinearScorer::from_json(&text, vocab).with_context(|| format!("loading {path}"))?)
        }
        ScorerSpec::External(endpoint) => {
            let local = vocab.map(load_vocab).transpose()?;
            let remote = ExternalScorer::connect(&endpoint, local.as_ref(), &client_options(external))
                .with_context(|| format!("connecting to {endpoint}"))?;
            Box::new(remote)
        }
    };
    Ok(scorer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!(ScorerSpec::parse("tabular:t.json").unwrap(), ScorerSpec::Tabular("t.json".into()));
        assert_eq!(ScorerSpec::parse("loglinear:/a/b.json").unwrap(), ScorerSpec::LogLinear("/a/b.json".into()));
        assert_eq!(
            ScorerSpec::parse("external:tcp://localhost:9000").unwrap(),
            ScorerSpec::External(Endpoint::Tcp("localhost:9000".into()))
        );
        assert_eq!(
            ScorerSpec::parse("external:exec:python -m bridge").unwrap(),
            ScorerSpec::External(Endpoint::Exec("python -m bridge".into()))
        );
        for bad in ["tabular:", "bert:x", "nocolon", "external:udp://x"] {
            assert!(ScorerSpec::parse(bad).is_err(), "{bad}");
        }
    }
}
