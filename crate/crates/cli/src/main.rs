//! `flowguess` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric divergence, 5 I/O.
//! Failures print one line on stderr:
//! `flowguess: error kind=<kind> code=<code> message="<text>"`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use flowguess::checkpoint::{self, Checkpoint};
use flowguess::encoding::{encode_all, encode_password, load_corpus, DEFAULT_DIM};
use flowguess::harness::{self, ExperimentConfig, SplitSpec, MILESTONES};
use flowguess::latent_ops;
use flowguess::sampling::{self, DynamicParams, MembershipOracle, SamplingConfig, SamplingMode};
use flowguess::training::{self, TrainConfig};
use flowguess::{Charset, Error, ErrorKind, FlowConfig, FlowModel, MaskKind, Result};
use rand::seq::SliceRandom;

#[derive(Parser)]
#[command(name = "flowguess", version, about = "Train a normalizing-flow password model and generate guesses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a newline-separated corpus.
    Train(TrainArgs),
    /// Generate guesses against a target set and report matches.
    Guess(GuessArgs),
    /// Stream static samples to stdout.
    Sample(SampleArgs),
    /// Decode a straight latent path between two passwords.
    Interpolate(InterpolateArgs),
    /// Sample around the latent image of a password.
    Neighborhood(NeighborhoodArgs),
    /// Print the model log-density of a password.
    Logprob(LogprobArgs),
    /// Split a corpus into cleaned train and test files.
    Split(SplitArgs),
    /// Write a synthetic password corpus.
    GenCorpus(GenCorpusArgs),
    /// Train one model per mask pattern and compare matches.
    AblateMasks(AblateArgs),
}

#[derive(Args, Clone)]
struct ModelShape {
    #[arg(long, default_value_t = 18)]
    layers: usize,
    #[arg(long, default_value = "char-run:1")]
    mask: String,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Maximum password length (the model dimension).
    #[arg(long, default_value_t = DEFAULT_DIM)]
    max_len: usize,
}

impl ModelShape {
    fn flow_config(&self) -> Result<FlowConfig> {
        let cfg = FlowConfig {
            dim: self.max_len,
            layers: self.layers,
            mask: self.mask.parse()?,
            hidden: self.hidden,
            blocks: self.blocks,
            ..FlowConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct Optim {
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Clip the global gradient norm.
    #[arg(long)]
    clip: Option<f64>,
    /// Uniform dequantization noise amplitude, below half a lattice step (off by default).
    #[arg(long)]
    jitter: Option<f64>,
}

impl Optim {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            seed,
            grad_clip_norm: self.clip,
            jitter: self.jitter,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "FLOWGUESS_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "FLOWGUESS_MODEL")]
    out: PathBuf,
    #[command(flatten)]
    shape: ModelShape,
    #[command(flatten)]
    optim: Optim,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on a seeded random subset of this many passwords.
    #[arg(long)]
    subsample: Option<usize>,
    /// Loss history destination; defaults to `<out>.loss.tsv`.
    #[arg(long)]
    loss_out: Option<PathBuf>,
    /// Also write `<out>.epoch<N>` every N epochs.
    #[arg(long)]
    keep_every: Option<usize>,
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct GuessArgs {
    #[arg(long, env = "FLOWGUESS_MODEL")]
    model: PathBuf,
    #[arg(long, env = "FLOWGUESS_TARGETS")]
    targets: PathBuf,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value = "static")]
    mode: String,
    /// Matches needed before the mixture prior activates ("inf" never activates it).
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Penalization threshold ("inf" disables penalization).
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    gs_sigma: f64,
    #[arg(long, default_value_t = 10)]
    gs_attempts: usize,
    /// Draws per prior refresh.
    #[arg(long, default_value_t = sampling::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report destination; stderr when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    matched_out: Option<PathBuf>,
    /// Do not write guesses to stdout.
    #[arg(long)]
    quiet: bool,
    /// Add wall-clock time to the report.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, env = "FLOWGUESS_MODEL")]
    model: PathBuf,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = sampling::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long, env = "FLOWGUESS_MODEL")]
    model: PathBuf,
    #[arg(long)]
    start: String,
    #[arg(long)]
    target: String,
    #[arg(long)]
    steps: usize,
    /// Prefix each line with its step index.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct NeighborhoodArgs {
    #[arg(long, env = "FLOWGUESS_MODEL")]
    model: PathBuf,
    #[arg(long)]
    pivot: String,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    unique: bool,
}

#[derive(Args)]
struct LogprobArgs {
    #[arg(long, env = "FLOWGUESS_MODEL")]
    model: PathBuf,
    #[arg(long)]
    password: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, env = "FLOWGUESS_CORPUS")]
    corpus: PathBuf,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    max_len: usize,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Five comma-separated template weights summing to 1.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "horizontal,char-run:1,char-run:2")]
    masks: String,
    #[command(flatten)]
    shape: ModelShape,
    #[command(flatten)]
    optim: Optim,
    #[arg(long, default_value_t = 100_000)]
    guesses: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Table destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Guess(a) => cmd_guess(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Neighborhood(a) => cmd_neighborhood(a),
        Command::Logprob(a) => cmd_logprob(a),
        Command::Split(a) => cmd_split(a),
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::AblateMasks(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numeric => "numeric",
                ErrorKind::Io => "io",
            };
            eprintln!("flowguess: error kind={name} code={} message={:?}", e.code(), e.to_string());
            ExitCode::from(match kind {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
                ErrorKind::Io => 5,
            })
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_lines<I, S>(out: &mut dyn Write, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    for l in lines {
        writeln!(out, "{}", l.as_ref())?;
    }
    out.flush()?;
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = create(p)?;
            f.write_all(text.as_bytes())?;
            f.flush()?;
        }
        None => {
            let mut o = io::stdout().lock();
            o.write_all(text.as_bytes())?;
            o.flush()?;
        }
    }
    Ok(())
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

fn path_with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let flow = a.shape.flow_config()?;
    let cfg = a.optim.train_config(a.seed);
    cfg.validate()?;
    let cs = Charset::default();
    let corpus = load_corpus(&a.corpus, &cs, flow.dim, false)?;
    if corpus.skipped.total() > 0 {
        eprintln!("flowguess: {}", corpus.skipped);
    }
    let mut passwords = corpus.passwords;
    if let Some(k) = a.subsample {
        passwords.shuffle(&mut flowguess::rng::stream(a.seed, flowguess::rng::purpose::SPLIT));
        passwords.truncate(k);
    }
    if passwords.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let data = encode_all(&passwords, &cs, flow.dim)?;
    let mut model = FlowModel::new(flow, cs, a.seed)?;
    let started = Instant::now();
    let mut snapshot_err = None;
    let outcome = training::train(&mut model, &data, &cfg, &mut |r| {
        if a.progress {
            eprintln!(
                "epoch {}/{} loss {:.6}{} ({:.1}s)",
                r.epoch,
                cfg.epochs,
                r.mean_loss,
                if r.improved { " *" } else { "" },
                started.elapsed().as_secs_f64()
            );
        }
        if a.keep_every.is_some_and(|k| k > 0 && r.epoch % k == 0) {
            let path = path_with_suffix(&a.out, &format!(".epoch{}", r.epoch));
            if let Err(e) = checkpoint::save_checkpoint(r.model, &path) {
                snapshot_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e);
    }
    let mut ck = Checkpoint::new(model);
    ck.loss_history = outcome.history.clone();
    ck.metadata.insert("train_seed".into(), a.seed.to_string());
    ck.metadata.insert("epochs".into(), cfg.epochs.to_string());
    ck.metadata.insert("train_size".into(), passwords.len().to_string());
    if let Some(e) = outcome.best_epoch {
        ck.metadata.insert("best_epoch".into(), e.to_string());
    }
    checkpoint::save(&ck, &a.out)?;
    let loss_path = a.loss_out.unwrap_or_else(|| path_with_suffix(&a.out, ".loss.tsv"));
    let mut text = format!("epoch\tloss\n0\t{:.10}\n", outcome.initial_loss);
    for (i, l) in outcome.history.iter().enumerate() {
        text.push_str(&format!("{}\t{:.10}\n", i + 1, l));
    }
    write_text(Some(&loss_path), &text)
}

fn parse_unbounded(s: &str, what: &str) -> Result<Option<u64>> {
    match s {
        "inf" | "none" | "∞" => Ok(None),
        _ => s.parse().map(Some).map_err(|_| usage(format!("{what} must be an integer or \"inf\", got {s:?}"))),
    }
}

fn dynamic_params(a: &GuessArgs) -> Result<DynamicParams> {
    let mut p = DynamicParams::for_budget(a.n);
    if let Some(alpha) = &a.alpha {
        p.alpha = parse_unbounded(alpha, "alpha")?.map_or(usize::MAX, |v| v as usize);
    }
    if let Some(s) = a.sigma {
        p.sigma = s;
    }
    if let Some(g) = &a.gamma {
        p.gamma = parse_unbounded(g, "gamma")?;
    }
    Ok(p)
}

fn cmd_guess(a: GuessArgs) -> Result<()> {
    let mode: SamplingMode = a.mode.parse()?;
    if mode == SamplingMode::Static && (a.alpha.is_some() || a.sigma.is_some() || a.gamma.is_some()) {
        eprintln!("flowguess: warning: --alpha/--sigma/--gamma are ignored in static mode");
    }
    let cfg = SamplingConfig {
        dynamic: dynamic_params(&a)?,
        gs_sigma: a.gs_sigma,
        gs_max_attempts: a.gs_attempts,
        batch_size: a.batch,
        workers: a.workers,
        ..SamplingConfig::new(mode, a.n, a.seed)
    };
    let model = checkpoint::load_checkpoint(&a.model)?;
    let oracle = MembershipOracle::from_file(&a.targets)?;
    let started = Instant::now();
    let mut out = BufWriter::new(io::stdout().lock());
    let mut count = 0u64;
    let run = sampling::generate(&model, Some(&oracle), &cfg, &mut |g| {
        if !a.quiet {
            writeln!(out, "{g}")?;
        }
        count += 1;
        if a.progress && (MILESTONES.contains(&count) || count == a.n) {
            eprintln!("guesses {count} ({:.1}s)", started.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    out.flush()?;
    let mut text = run.to_text();
    if a.timing {
        text.push_str(&format!("wall_time_s: {:.3}\n", started.elapsed().as_secs_f64()));
    }
    match &a.report {
        Some(p) => write_text(Some(p), &text)?,
        None => eprint!("{text}"),
    }
    if let Some(p) = &a.matched_out {
        write_lines(&mut create(p)?, &run.matched_list)?;
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = checkpoint::load_checkpoint(&a.model)?;
    let cfg = SamplingConfig {
        batch_size: a.batch,
        workers: a.workers,
        ..SamplingConfig::new(SamplingMode::Static, a.n, a.seed)
    };
    let mut out = BufWriter::new(io::stdout().lock());
    sampling::generate(&model, None, &cfg, &mut |g| Ok(writeln!(out, "{g}")?))?;
    out.flush()?;
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    let model = checkpoint::load_checkpoint(&a.model)?;
    let path = latent_ops::interpolate(&model, &a.start, &a.target, a.steps)?;
    let lines = path.iter().enumerate().map(|(j, p)| if a.verbose { format!("{j}\t{p}") } else { p.clone() });
    write_lines(&mut io::stdout().lock(), lines)
}

fn cmd_neighborhood(a: NeighborhoodArgs) -> Result<()> {
    let model = checkpoint::load_checkpoint(&a.model)?;
    let found = latent_ops::neighborhood(&model, &a.pivot, a.sigma, a.n, a.seed, a.unique)?;
    if found.len() < a.n {
        eprintln!("flowguess: found {} of {} requested neighbours", found.len(), a.n);
    }
    write_lines(&mut io::stdout().lock(), &found)
}

fn cmd_logprob(a: LogprobArgs) -> Result<()> {
    let model = checkpoint::load_checkpoint(&a.model)?;
    let x = encode_password(&a.password, model.charset(), model.dim())?;
    write_lines(&mut io::stdout().lock(), [format!("{:.6}", model.log_prob(x.as_slice())?)])
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, &Charset::default(), a.max_len, false)?;
    if corpus.skipped.total() > 0 {
        eprintln!("flowguess: {}", corpus.skipped);
    }
    let spec = SplitSpec { train_fraction: a.fraction, train_subsample: a.subsample, seed: a.seed };
    let (train, test) = harness::split_and_clean(&corpus.passwords, &spec)?;
    write_lines(&mut create(&a.train_out)?, &train)?;
    write_lines(&mut create(&a.test_out)?, &test)?;
    eprintln!("flowguess: train {} test {}", train.len(), test.len());
    Ok(())
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let weights = match &a.weights {
        None => harness::DEFAULT_TEMPLATE_WEIGHTS,
        Some(s) => {
            let v: Vec<f64> = s
                .split(',')
                .map(|w| w.trim().parse().map_err(|_| usage(format!("bad weight {w:?}"))))
                .collect::<Result<_>>()?;
            v.try_into().map_err(|_| usage("--weights needs exactly five values"))?
        }
    };
    let corpus = harness::gen_synthetic_corpus(a.n, a.seed, &weights)?;
    match &a.out {
        Some(p) => write_lines(&mut create(p)?, &corpus),
        None => write_lines(&mut io::stdout().lock(), &corpus),
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let kinds: Vec<MaskKind> = a.masks.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?;
    let flow = a.shape.flow_config()?;
    let cfg = ExperimentConfig {
        flow,
        train: a.optim.train_config(a.seed),
        model_seed: a.seed,
        guesses: a.guesses,
        sample_seed: a.seed,
    };
    let train = read_list(&a.train)?;
    let test = read_list(&a.test)?;
    let table = harness::masking_ablation(&train, &test, &kinds, &cfg)?;
    write_text(a.out.as_deref(), &table.to_tsv())
}
