//! `markovmouth`: train, sample, rank and evaluate masked-LM random fields.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 a check
//! that ran but did not pass.

mod commands;
mod config;
mod output;
mod scorer;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use markovmouth::lexicon::Casing;
use markovmouth::samplers::{InitStrategy, Scheme};
use markovmouth::training::TrainMode;

use config::{load_file, EvalConfig, OracleConfig, RankConfig, SampleConfig, ServeConfig, TrainCommandConfig};

pub const LOG_ENV: &str = "MARKOVMOUTH_LOG";

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Runtime(anyhow::Error),
    Acceptance(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Acceptance(_) => 4,
        }
    }

    fn report(&self) {
        match self {
            CliError::Config(problems) => {
                eprintln!("error: invalid configuration");
                for p in problems {
                    eprintln!("  - {p}");
                }
            }
            CliError::Runtime(e) => eprintln!("error: {e:#}"),
            CliError::Acceptance(msg) => eprintln!("check failed: {msg}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        let problems = e.chain().find_map(|c| match c.downcast_ref::<markovmouth::Error>() {
            Some(markovmouth::Error::InvalidConfig(p)) => Some(p.clone()),
            _ => None,
        });
        match problems {
            Some(p) => CliError::Config(p),
            None => CliError::Runtime(e),
        }
    }
}

impl From<markovmouth::Error> for CliError {
    fn from(e: markovmouth::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

#[derive(Parser)]
#[command(name = "markovmouth", version, about = "Masked language models as Markov random fields")]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Globals {
    /// JSON config; explicit flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a log-linear scorer by pseudo-likelihood.
    Train(TrainArgs),
    /// Generate fixed-length sequences.
    Sample(SampleArgs),
    /// Order same-length sentences by unnormalized joint.
    Rank(RankArgs),
    /// BLEU, self-BLEU and n-gram uniqueness of generations.
    Eval(EvalArgs),
    /// Compare sampled, stationary and exact distributions on a small case.
    OracleCheck(OracleArgs),
    /// Expose a built-in scorer over the line-JSON protocol.
    Serve(ServeArgs),
}

fn parse_snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    parse_snake(s)
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    parse_snake(s)
}

fn parse_casing(s: &str) -> Result<Casing, String> {
    parse_snake(s)
}

/// `--top-k none` or `--top-k <k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TopK(Option<usize>);

fn parse_top_k(s: &str) -> Result<TopK, String> {
    match s {
        "none" => Ok(TopK(None)),
        _ => s
            .parse()
            .map(|k| TopK(Some(k)))
            .map_err(|_| format!("expected an integer or \"none\", got {s:?}")),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ModeArg {
    Exact,
    Stochastic,
    Multimask,
}

#[derive(Args)]
struct ExternalArgs {
    /// Seconds to wait for an external scorer reply.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Connections (or child processes) to an external scorer.
    #[arg(long)]
    pool_size: Option<usize>,
}

impl ExternalArgs {
    fn apply(&self, s: &mut config::ExternalSettings) {
        if let Some(t) = self.timeout_secs {
            s.timeout_secs = t;
        }
        if let Some(p) = self.pool_size {
            s.pool_size = p;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long, value_parser = parse_casing)]
    casing: Option<Casing>,
    #[arg(long)]
    skip_oov: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    init_model: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Positions per sentence in stochastic mode.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thinning: Option<usize>,
    #[arg(long, value_parser = parse_top_k)]
    top_k: Option<TopK>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitStrategy>,
    #[arg(long)]
    passes: Option<usize>,
    #[command(flatten)]
    external: ExternalArgs,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// One sentence per line, all the same length.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    external: ExternalArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generations: Option<PathBuf>,
    /// `name=path`, repeatable; a bare path is named by its file stem.
    #[arg(long = "reference")]
    references: Vec<String>,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// External scorer for perplexity, e.g. `external:tcp://host:port`.
    #[arg(long)]
    ppl_scorer: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    external: ExternalArgs,
}

#[derive(Args)]
struct OracleArgs {
    /// `f2` or `loglinear`.
    #[arg(long)]
    fixture: Option<String>,
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    length: Option<usize>,
    /// Gibbs steps after burn-in.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thinning: Option<usize>,
    #[arg(long, value_parser = parse_top_k)]
    top_k: Option<TopK>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    external: ExternalArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// `host:port` to listen on; stdio otherwise.
    #[arg(long)]
    listen: Option<String>,
    /// Expect `[CLS] … [SEP]` around every request.
    #[arg(long)]
    framing: bool,
    #[arg(long)]
    max_len: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
    (opt $dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = Some(v);
        }
    };
}

fn resolve_train(cli: &Globals, a: TrainArgs) -> Result<TrainCommandConfig, CliError> {
    let mut c: TrainCommandConfig = load_file(cli.config.as_deref(), "train")?;
    set!(opt c.corpus, a.corpus);
    set!(opt c.vocab, a.vocab);
    set!(c.min_count, a.min_count);
    set!(c.casing, a.casing);
    c.skip_oov |= a.skip_oov;
    set!(c.window, a.window);
    set!(c.init_scale, a.init_scale);
    set!(opt c.init_model, a.init_model);
    set!(c.train.learning_rate, a.learning_rate);
    set!(c.train.epochs, a.epochs);
    set!(c.train.batch_size, a.batch_size);
    set!(c.train.l2, a.l2);
    set!(c.train.seed, cli.seed);
    set!(opt c.out, cli.out.clone());
    set!(opt c.threads, cli.threads);
    let mut problems = Vec::new();
    match a.mode {
        Some(ModeArg::Exact) => c.train.mode = TrainMode::ExactPll,
        Some(ModeArg::Stochastic) => c.train.mode = TrainMode::StochasticPll { k: a.k.unwrap_or(1) },
        Some(ModeArg::Multimask) => {
            c.train.mode = TrainMode::MultiMask {
                rate: a.mask_rate.unwrap_or(markovmouth::training::DEFAULT_MASK_RATE),
            }
        }
        None => {}
    }
    match (&mut c.train.mode, a.k, a.mask_rate) {
        (TrainMode::StochasticPll { k }, Some(v), _) => *k = v,
        (_, Some(_), _) => problems.push("--k only applies to --mode stochastic".into()),
        _ => {}
    }
    match (&mut c.train.mode, a.mask_rate) {
        (TrainMode::MultiMask { rate }, Some(v)) => *rate = v,
        (_, Some(_)) => problems.push("--mask-rate only applies to --mode multimask".into()),
        _ => {}
    }
    if problems.is_empty() {
        Ok(c)
    } else {
        problems.extend(c.problems());
        Err(CliError::Config(problems))
    }
}

fn resolve_sample(cli: &Globals, a: SampleArgs) -> Result<SampleConfig, CliError> {
    let mut c: SampleConfig = load_file(cli.config.as_deref(), "sample")?;
    set!(opt c.scorer, a.scorer);
    set!(opt c.vocab, a.vocab);
    set!(opt c.corpus, a.corpus);
    set!(opt c.count, a.count);
    let s = &mut c.sampler;
    set!(s.scheme, a.scheme);
    set!(s.length, a.length);
    set!(s.iterations, a.iterations);
    set!(s.burn_in, a.burn_in);
    set!(s.thinning, a.thinning);
    set!(s.top_k, a.top_k.map(|k| k.0));
    set!(s.chains, a.chains);
    set!(s.init, a.init);
    set!(s.passes, a.passes);
    set!(s.seed, cli.seed);
    a.external.apply(&mut c.external);
    set!(opt c.out, cli.out.clone());
    set!(opt c.threads, cli.threads);
    Ok(c)
}

fn resolve_rank(cli: &Globals, a: RankArgs) -> Result<RankConfig, CliError> {
    let mut c: RankConfig = load_file(cli.config.as_deref(), "rank")?;
    set!(opt c.scorer, a.scorer);
    set!(opt c.vocab, a.vocab);
    set!(opt c.input, a.input);
    a.external.apply(&mut c.external);
    set!(opt c.out, cli.out.clone());
    set!(opt c.threads, cli.threads);
    Ok(c)
}

fn resolve_eval(cli: &Globals, a: EvalArgs) -> Result<EvalConfig, CliError> {
    let mut c: EvalConfig = load_file(cli.config.as_deref(), "eval")?;
    set!(opt c.generations, a.generations);
    for r in a.references {
        let (name, path) = match r.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(&r);
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(r);
                (name, p)
            }
        };
        c.references.insert(name, path);
    }
    c.lowercase |= a.lowercase;
    set!(opt c.csv, a.csv);
    set!(opt c.ppl_scorer, a.ppl_scorer);
    set!(opt c.vocab, a.vocab);
    a.external.apply(&mut c.external);
    set!(opt c.out, cli.out.clone());
    set!(opt c.threads, cli.threads);
    Ok(c)
}

fn resolve_oracle(cli: &Globals, a: OracleArgs) -> Result<OracleConfig, CliError> {
    let mut c: OracleConfig = load_file(cli.config.as_deref(), "oracle-check")?;
    set!(opt c.fixture, a.fixture);
    set!(opt c.scorer, a.scorer);
    set!(opt c.vocab, a.vocab);
    set!(opt c.length, a.length);
    set!(c.steps, a.steps);
    set!(c.burn_in, a.burn_in);
    set!(c.thinning, a.thinning);
    set!(c.top_k, a.top_k.map(|k| k.0));
    set!(c.chains, a.chains);
    set!(c.threshold, a.threshold);
    set!(c.seed, cli.seed);
    a.external.apply(&mut c.external);
    set!(opt c.out, cli.out.clone());
    set!(opt c.threads, cli.threads);
    Ok(c)
}

fn resolve_serve(cli: &Globals, a: ServeArgs) -> Result<ServeConfig, CliError> {
    let mut c: ServeConfig = load_file(cli.config.as_deref(), "serve")?;
    set!(opt c.scorer, a.scorer);
    set!(opt c.vocab, a.vocab);
    set!(opt c.listen, a.listen);
    c.framing |= a.framing;
    set!(c.max_len, a.max_len);
    set!(opt c.threads, cli.threads);
    Ok(c)
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config(vec!["threads must be at least 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(Cli { globals: cli, command }: Cli) -> Result<(), CliError> {
    match command {
        Command::Train(a) => {
            let c = resolve_train(&cli, a)?;
            init_threads(c.threads)?;
            commands::train(c)
        }
        Command::Sample(a) => {
            let c = resolve_sample(&cli, a)?;
            init_threads(c.threads)?;
            commands::sample(c)
        }
        Command::Rank(a) => {
            let c = resolve_rank(&cli, a)?;
            init_threads(c.threads)?;
            commands::rank(c)
        }
        Command::Eval(a) => {
            let c = resolve_eval(&cli, a)?;
            init_threads(c.threads)?;
            commands::eval(c)
        }
        Command::OracleCheck(a) => {
            let c = resolve_oracle(&cli, a)?;
            init_threads(c.threads)?;
            commands::oracle_check(c)
        }
        Command::Serve(a) => {
            let c = resolve_serve(&cli, a)?;
            init_threads(c.threads)?;
            commands::serve(c)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code())
        }
    }
}
