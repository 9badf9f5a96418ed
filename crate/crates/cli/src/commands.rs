use std::collections::BTreeMap;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use markovmouth::evalkit::{build_report, perplexity_from_logprobs};
use markovmouth::fixtures;
use markovmouth::lexicon::{read_lines, OovPolicy};
use markovmouth::mrf::{rank_order, unnormalized_log_joint};
use markovmouth::oracle::{
    empirical_distribution, enumerate_joint, gibbs_transition_matrix, stationary_distribution, total_variation,
};
use markovmouth::protocol::{self, ExternalScorer, ServeOptions};
use markovmouth::samplers::{run_gibbs, run_sampler, InitStrategy, SamplerConfig, Scheme};
use markovmouth::training::train_pll;
use markovmouth::{Corpus, LogLinearScorer, Scorer, Vocabulary};

use crate::config::{check, EvalConfig, OracleConfig, RankConfig, SampleConfig, ServeConfig, TrainCommandConfig};
use crate::output::{emit, jsonl, read_sentences, with_suffix, write_atomic, write_sidecar};
use crate::scorer::{client_options, load_scorer, ScorerSpec};
use crate::CliError;

#[derive(Serialize)]
struct Generation<'a> {
    chain: usize,
    iter: usize,
    tokens: Vec<&'a str>,
    unnorm_logp: f64,
}

/// Chains needed for `count` generations, never fewer than configured.
fn chains_for(sampler: &SamplerConfig, count: usize) -> Result<usize, String> {
    let per_chain = sampler.samples_per_chain();
    if per_chain == 0 {
        return Err(format!(
            "a chain emits no samples (iterations {}, burn_in {}, thinning {})",
            sampler.iterations, sampler.burn_in, sampler.thinning
        ));
    }
    Ok(sampler.chains.max(count.div_ceil(per_chain)))
}

/// Sentences from `sample` JSONL or plain text, encoded with `vocab`.
fn encode_corpus(path: &Path, vocab: &Vocabulary) -> anyhow::Result<Corpus> {
    let lines: Vec<String> = read_sentences(path, false)?.iter().map(|t| t.join(" ")).collect();
    Corpus::encode_lines(&lines, vocab, OovPolicy::Error, path.display().to_string())
        .with_context(|| format!("encoding {}", path.display()))
}

pub fn sample(mut cfg: SampleConfig) -> Result<(), CliError> {
    check(cfg.problems())?;
    let scorer = load_scorer(cfg.scorer.as_deref().expect("checked"), cfg.vocab.as_deref(), &cfg.external)?;
    let vocab = scorer.vocab();
    if let Some(count) = cfg.count {
        cfg.sampler.chains = chains_for(&cfg.sampler, count).map_err(|p| CliError::Config(vec![p]))?;
    }
    check(cfg.sampler.problems(vocab.len()))?;
    let corpus = match (cfg.sampler.init, &cfg.corpus) {
        (InitStrategy::FromCorpus, Some(path)) => Some(encode_corpus(path, vocab)?),
        _ => None,
    };
    let run = run_sampler(&*scorer, &cfg.sampler, corpus.as_ref())?;
    if !run.withheld.is_empty() {
        log::warn!("{} samples still held [MASK] and were withheld", run.withheld.len());
    }
    let mut samples = run.samples;
    if let Some(count) = cfg.count {
        if samples.len() < count {
            log::warn!("only {} of {count} requested generations are mask-free", samples.len());
        }
        samples.truncate(count);
    }
    let rows = samples
        .par_iter()
        .map(|s| {
            Ok(Generation {
                chain: s.chain,
                iter: s.iteration,
                tokens: vocab.decode_tokens(&s.sequence)?,
                unnorm_logp: unnormalized_log_joint(&*scorer, &s.sequence)?,
            })
        })
        .collect::<markovmouth::Result<Vec<_>>>()?;
    log::info!("{} generations from {} chains", rows.len(), cfg.sampler.chains);
    emit(cfg.out.as_deref(), &jsonl(&rows)?)?;
    if let Some(out) = &cfg.out {
        write_sidecar(out, "sample", &cfg)?;
    }
    Ok(())
}

pub fn train(cfg: TrainCommandConfig) -> Result<(), CliError> {
    check(cfg.problems())?;
    let corpus_path = cfg.corpus.as_deref().expect("checked");
    let out = cfg.out.as_deref().expect("checked");
    let lines = read_lines(corpus_path).with_context(|| format!("reading {}", corpus_path.display()))?;
    let (vocab, built) = match &cfg.vocab {
        Some(p) => (Vocabulary::load(p).with_context(|| format!("loading {}", p.display()))?, false),
        None => (Vocabulary::build(&lines, cfg.min_count, cfg.casing)?, true),
    };
    let mut sentences = Vec::with_capacity(lines.len());
    let mut skipped = 0;
    for (i, line) in lines.iter().enumerate() {
        match vocab.encode(line) {
            Ok(s) => sentences.push(s),
            Err(e @ markovmouth::Error::OutOfVocabulary { .. }) if !cfg.skip_oov => {
                return Err(anyhow::Error::new(e)
                    .context(format!("{} sentence {}", corpus_path.display(), i + 1))
                    .into())
            }
            Err(markovmouth::Error::OutOfVocabulary { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} sentences with out-of-vocabulary tokens");
    }
    let corpus = Corpus::new(sentences, corpus_path.display().to_string())?;
    let mut scorer = match &cfg.init_model {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            LogLinearScorer::from_json(&text, vocab.clone())?
        }
        None if cfg.init_scale > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            LogLinearScorer::random(vocab.clone(), cfg.window, cfg.init_scale, &mut rng)
        }
        None => LogLinearScorer::zeros(vocab.clone(), cfg.window),
    };
    log::info!(
        "training on {} sentences ({} tokens), M = {}, w = {}",
        corpus.len(),
        corpus.token_count(),
        vocab.len(),
        scorer.window()
    );
    let trace = train_pll(&mut scorer, &corpus, &cfg.train)?;
    for e in &trace.epochs {
        log::info!("epoch {}: pll {:.6}", e.epoch, e.pll);
    }
    write_atomic(out, scorer.to_json().as_bytes())?;
    write_atomic(&with_suffix(out, ".trace.jsonl"), trace.to_jsonl().as_bytes())?;
    if built {
        write_atomic(&with_suffix(out, ".vocab.json"), vocab.to_json().as_bytes())?;
    }
    write_sidecar(out, "train", &cfg)?;
    println!("final pll {:.6}", trace.final_pll());
    Ok(())
}

#[derive(Serialize)]
struct Ranked<'a> {
    rank: usize,
    /// 1-based position in the input.
    index: usize,
    tokens: Vec<&'a str>,
    unnorm_logp: f64,
}

pub fn rank(cfg: RankConfig) -> Result<(), CliError> {
    check(cfg.problems())?;
    let scorer = load_scorer(cfg.scorer.as_deref().expect("checked"), cfg.vocab.as_deref(), &cfg.external)?;
    let input = cfg.input.as_deref().expect("checked");
    let corpus = encode_corpus(input, scorer.vocab())?;
    let order = rank_order(&*scorer, &corpus.sentences)?;
    let rows = order
        .iter()
        .enumerate()
        .map(|(r, &(i, score))| {
            Ok(Ranked {
                rank: r + 1,
                index: i + 1,
                tokens: scorer.vocab().decode_tokens(&corpus.sentences[i])?,
                unnorm_logp: score,
            })
        })
        .collect::<markovmouth::Result<Vec<_>>>()?;
    emit(cfg.out.as_deref(), &jsonl(&rows)?)?;
    if let Some(out) = &cfg.out {
        write_sidecar(out, "rank", &cfg)?;
    }
    Ok(())
}

pub fn eval(cfg: EvalConfig) -> Result<(), CliError> {
    check(cfg.problems())?;
    let generations = read_sentences(cfg.generations.as_deref().expect("checked"), cfg.lowercase)?;
    let mut references = BTreeMap::new();
    for (name, path) in &cfg.references {
        references.insert(name.clone(), read_sentences(path, cfg.lowercase)?);
    }
    let mut report = build_report(&generations, &references)?;
    if let Some(spec) = &cfg.ppl_scorer {
        let endpoint = match ScorerSpec::parse(spec).map_err(|p| CliError::Config(vec![p]))? {
            ScorerSpec::External(e) => e,
            _ => return Err(CliError::Config(vec!["ppl_scorer must be external".into()])),
        };
        let vocab = cfg
            .vocab
            .as_deref()
            .map(Vocabulary::load)
            .transpose()
            .context("loading vocabulary")?;
        let remote = ExternalScorer::connect(&endpoint, vocab.as_ref(), &client_options(&cfg.external))
            .with_context(|| format!("connecting to {endpoint}"))?;
        let logprobs = generations
            .par_iter()
            .map(|g| remote.ar_logprobs(&remote.vocab().encode(&g.join(" "))?))
            .collect::<markovmouth::Result<Vec<_>>>()?;
        report.perplexity = Some(perplexity_from_logprobs(&logprobs)?);
    }
    let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
    text.push('\n');
    emit(cfg.out.as_deref(), text.as_bytes())?;
    if let Some(csv) = &cfg.csv {
        write_atomic(csv, format!("{}\n{}\n", report.csv_header(), report.csv_row()).as_bytes())?;
    }
    if let Some(out) = &cfg.out {
        write_sidecar(out, "eval", &cfg)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    fixture: Option<String>,
    length: usize,
    samples: usize,
    tv_empirical_stationary: f64,
    tv_stationary_joint: f64,
    detailed_balance_residual: f64,
    threshold: f64,
    pass: bool,
}

pub fn oracle_check(cfg: OracleConfig) -> Result<(), CliError> {
    check(cfg.problems())?;
    let (scorer, length): (Box<dyn Scorer>, usize) = match (&cfg.scorer, cfg.fixture.as_deref()) {
        (Some(spec), _) => (
            load_scorer(spec, cfg.vocab.as_deref(), &cfg.external)?,
            cfg.length.expect("checked"),
        ),
        (None, Some("f2")) => (Box::new(fixtures::f2()), 2),
        (None, _) => (Box::new(fixtures::loglinear_fixture(3, 2, 1, 1.0)), 3),
    };
    let m = scorer.vocab().len();
    let sampler = SamplerConfig {
        scheme: Scheme::Gibbs,
        length,
        iterations: cfg.burn_in + cfg.steps,
        burn_in: cfg.burn_in,
        thinning: cfg.thinning,
        top_k: cfg.top_k,
        chains: cfg.chains,
        init: InitStrategy::AllMask,
        seed: cfg.seed,
        passes: 1,
    };
    check(sampler.problems(m))?;
    let run = run_gibbs(&*scorer, &sampler, None)?;
    let empirical = empirical_distribution(run.samples.iter().map(|s| &s.sequence), m, length)?;
    let kernel = gibbs_transition_matrix(&*scorer, length, cfg.top_k)?;
    let stationary = stationary_distribution(&kernel)?;
    let joint = enumerate_joint(&*scorer, length)?;
    let tv_emp = total_variation(&empirical, &stationary)?;
    let report = OracleReport {
        fixture: cfg.scorer.is_none().then(|| cfg.fixture.clone()).flatten(),
        length,
        samples: run.samples.len(),
        tv_empirical_stationary: tv_emp,
        tv_stationary_joint: total_variation(&stationary, &joint)?,
        detailed_balance_residual: kernel.detailed_balance_residual(&stationary.probs),
        threshold: cfg.threshold,
        pass: tv_emp <= cfg.threshold,
    };
    println!("samples: {}", report.samples);
    println!("TV(empirical, stationary) = {:.6}", report.tv_empirical_stationary);
    println!("TV(stationary, joint) = {:.6}", report.tv_stationary_joint);
    println!("detailed balance residual = {:.3e}", report.detailed_balance_residual);
    if let Some(out) = &cfg.out {
        let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
        text.push('\n');
        write_atomic(out, text.as_bytes())?;
        write_sidecar(out, "oracle-check", &cfg)?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!(
            "TV(empirical, stationary) = {tv_emp:.6} exceeds {}",
            cfg.threshold
        )))
    }
}

pub fn serve(cfg: ServeConfig) -> Result<(), CliError> {
    check(cfg.problems())?;
    let scorer = load_scorer(
        cfg.scorer.as_deref().expect("checked"),
        cfg.vocab.as_deref(),
        &Default::default(),
    )?;
    let options = ServeOptions {
        max_len: cfg.max_len,
        framing: cfg.framing,
    };
    match &cfg.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            let local = listener.local_addr().context("reading the bound address")?;
            println!("listening on {local}");
            io::stdout().flush().context("flushing stdout")?;
            protocol::serve_tcp(Arc::new(scorer), listener, options)?;
        }
        None => {
            let stdin = BufReader::new(io::stdin().lock());
            protocol::serve(&*scorer, stdin, io::stdout().lock(), &options)?;
        }
    }
    Ok(())
}
