use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use layervision::eval::DEFAULT_MAX_ANSWER_LEN;
use layervision::heads::{HeadKind, Task};
use layervision::pipeline::{
    cmd_analyze, cmd_curve, cmd_ensemble, cmd_eval, cmd_synth, cmd_train, EvalRequest, RunConfig,
    SynthRequest,
};
use layervision::toy::ToyConfig;
use serde::Serialize;

/// Train and evaluate lightweight heads over cached encoder activations.
#[derive(Debug, Parser)]
#[command(name = "layervision", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a head; evaluates on --eval-cache when given.
    Train(RunArgs),
    /// Score a saved model on a cache.
    Eval(EvalArgs),
    /// Train once per training fraction and write curve.csv.
    Curve(CurveArgs),
    /// Combine two or more probability dumps by element-wise max.
    Ensemble(EnsembleArgs),
    /// Per-category accuracy breakdown for one or two prediction sets.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic activation cache with a planted answer signal.
    Synth(SynthArgs),
}

/// Flags mirroring `RunConfig`; each one overrides the config file.
#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    eval_cache: Option<PathBuf>,
    #[arg(long)]
    examples: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    adapter_size: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    shared: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    skip: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    max_answer_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut cfg.data.cache, self.cache.clone().map(Some));
        set(&mut cfg.data.eval_cache, self.eval_cache.clone().map(Some));
        set(&mut cfg.data.eval_examples, self.examples.clone().map(Some));
        set(&mut cfg.data.vocab, self.vocab.clone().map(Some));
        set(&mut cfg.task, self.task);
        set(&mut cfg.head.kind, self.head);
        set(&mut cfg.head.adapter_size, self.adapter_size);
        set(&mut cfg.head.shared, self.shared);
        set(&mut cfg.head.use_skip, self.skip);
        set(&mut cfg.optimizer.epochs, self.epochs);
        set(&mut cfg.optimizer.lr, self.lr);
        set(&mut cfg.optimizer.batch, self.batch);
        set(&mut cfg.optimizer.seed, self.seed);
        set(&mut cfg.data.fraction, self.fraction);
        set(&mut cfg.eval.max_answer_len, self.max_answer_len);
        set(&mut cfg.out, self.out.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory holding model.json and model.bin.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// JSONL examples behind the cache; required for span heads.
    #[arg(long)]
    examples: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    max_answer_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated training fractions, each in (0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// Probability dump written by `eval`; repeat for each member.
    #[arg(long = "probs", required = true)]
    probs: Vec<PathBuf>,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    max_answer_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    preds: PathBuf,
    /// Second model's predictions for the uniquely-correct comparison.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Toy encoder settings as JSON; individual flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    answerable_fraction: f64,
    /// Seed for example sampling; the encoder seed is --toy-seed.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long, default_value = "span")]
    task: Task,
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    toy_seed: Option<u64>,
    #[arg(long)]
    plant_layer: Option<usize>,
    #[arg(long)]
    plant_strength: Option<f32>,
    #[arg(long)]
    noise_std: Option<f32>,
    #[arg(long)]
    overlap: Option<usize>,
}

impl SynthArgs {
    fn toy(&self) -> Result<ToyConfig> {
        let mut toy: ToyConfig = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ToyConfig::default(),
        };
        set(&mut toy.tokens, self.tokens);
        set(&mut toy.hidden, self.hidden);
        set(&mut toy.channels, self.channels);
        set(&mut toy.seed, self.toy_seed);
        set(&mut toy.plant_layer, self.plant_layer);
        set(&mut toy.plant_strength, self.plant_strength);
        set(&mut toy.noise_std, self.noise_std);
        set(&mut toy.overlap, self.overlap);
        Ok(toy)
    }
}

fn print<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("value serializes")
    );
}

fn opt(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => print(&cmd_train(&args.resolve()?)?),
        Command::Eval(a) => {
            let req = EvalRequest {
                cache: &a.cache,
                examples: opt(&a.examples),
                vocab: opt(&a.vocab),
                max_answer_len: a.max_answer_len,
                out: &a.out,
            };
            print(&cmd_eval(&a.model, &req)?);
        }
        Command::Curve(a) => {
            let rows = cmd_curve(&a.run.resolve()?, &a.fractions)?;
            print(&rows);
        }
        Command::Ensemble(a) => print(&cmd_ensemble(
            &a.probs,
            &a.examples,
            opt(&a.vocab),
            a.max_answer_len,
            &a.out,
        )?),
        Command::Analyze(a) => print(&cmd_analyze(
            &a.preds,
            opt(&a.compare),
            &a.examples,
            opt(&a.vocab),
            &a.out,
        )?),
        Command::Synth(a) => {
            let toy = a.toy()?;
            let req = SynthRequest {
                toy: &toy,
                n: a.n,
                answerable_fraction: a.answerable_fraction,
                sample_seed: a.sample_seed,
                task: a.task,
                out: &a.out,
                name: &a.name,
            };
            print(&cmd_synth(&req)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
