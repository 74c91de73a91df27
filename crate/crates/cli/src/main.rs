//! `dslu`: corpus generation, staged training, evaluation and analysis.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use settings::{parse_override, Settings};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<dslu::SluError> for CliError {
    fn from(e: dslu::SluError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dslu", version, about = "Two-pass deliberation spoken language understanding")]
struct Cli {
    /// Flat TOML file of settings; see `config.toml` in any output directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Required; nothing is written elsewhere.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Threads for inference.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override any setting, e.g. `--set d_model=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    set: Vec<(String, toml::Value)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a grammar and voice a corpus.
    GenCorpus {
        #[arg(long)]
        intents: Option<usize>,
        #[arg(long)]
        templates: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Masked-LM pretraining of the semantic encoder on the unlabeled text.
    PretrainLm(TrainArgs),
    /// Acoustic encoder and first-pass decoder.
    TrainStage1(TrainArgs),
    /// Deliberation encoder and second-pass decoder.
    TrainStage2(TrainArgs),
    /// Decode splits and write predictions plus reports.
    Eval(EvalArgs),
    /// Bucket tables, routed accuracy and heatmaps from a predictions file.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to continue from. Required for `train-stage2`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Epochs for this stage.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// A checkpoint that has been through `train-stage2`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to decode; repeatable. Defaults to the three test splits.
    #[arg(long = "split")]
    pub splits: Vec<String>,
    /// Run both passes on every utterance and write bucket tables.
    #[arg(long, conflicts_with = "route")]
    pub both_passes: bool,
    /// Production routing: the second pass runs only below the threshold.
    #[arg(long)]
    pub route: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// First-pass audio in seconds, or `full`.
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Comma-separated prefix lengths for a first-pass accuracy curve.
    #[arg(long, value_delimiter = ',')]
    pub prefix_sweep: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// JSONL written by `eval`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// With `--corpus`, also export deliberation heatmaps.
    #[arg(long, requires = "corpus")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Utterance for the heatmaps; defaults to the first prediction.
    #[arg(long)]
    pub heatmap_utt: Option<String>,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, toml::Value)>, CliError> {
    let mut o = cli.set.clone();
    let mut put = |k: &str, v: toml::Value| o.push((k.to_owned(), v));
    if let Some(s) = cli.seed {
        put("seed", toml::Value::Integer(i64::try_from(s).map_err(|_| CliError::Usage(format!("seed {s} too large")))?));
    }
    if let Some(w) = cli.workers {
        put("workers", toml::Value::Integer(w as i64));
    }
    match &cli.command {
        Command::GenCorpus { intents, templates, noise } => {
            if let Some(v) = intents {
                put("intents", toml::Value::Integer(*v as i64));
            }
            if let Some(v) = templates {
                put("templates_per_intent", toml::Value::Integer(*v as i64));
            }
            if let Some(v) = noise {
                put("noise_level", toml::Value::Float(*v));
            }
        }
        Command::PretrainLm(a) | Command::TrainStage1(a) | Command::TrainStage2(a) => {
            let key = match &cli.command {
                Command::PretrainLm(_) => "pretrain_epochs",
                Command::TrainStage1(_) => "stage1_epochs",
                _ => "stage2_epochs",
            };
            if let Some(e) = a.epochs {
                put(key, toml::Value::Integer(e as i64));
            }
        }
        Command::Eval(a) => {
            if let Some(t) = a.threshold {
                put("threshold", toml::Value::Float(t));
            }
            if let Some(b) = a.beam {
                put("beam", toml::Value::Integer(b as i64));
            }
            if let Some(p) = &a.prefix {
                let secs = if p == "full" {
                    f64::INFINITY
                } else {
                    p.parse().map_err(|_| CliError::Usage(format!("--prefix expects seconds or `full`, got `{p}`")))?
                };
                put("prefix", toml::Value::Float(secs));
            }
        }
        Command::Analyze(a) => {
            if let Some(t) = a.threshold {
                put("threshold", toml::Value::Float(t));
            }
        }
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = cli.out.clone().ok_or_else(|| {
        CliError::Usage(format!("--out is required\n\n{}", Cli::command().render_usage()))
    })?;
    let settings = Settings::resolve(cli.config.as_deref(), &overrides(&cli)?)?;
    let mut sink = commands::Output::create(&out)?;
    sink.echo_config(&settings)?;
    match cli.command {
        Command::GenCorpus { .. } => commands::gen_corpus(&settings, &mut sink)?,
        Command::PretrainLm(a) => commands::train(dslu::train::Stage::PretrainLm, &a, &settings, &mut sink)?,
        Command::TrainStage1(a) => commands::train(dslu::train::Stage::Stage1, &a, &settings, &mut sink)?,
        Command::TrainStage2(a) => commands::train(dslu::train::Stage::Stage2, &a, &settings, &mut sink)?,
        Command::Eval(a) => commands::eval(&a, &settings, &mut sink)?,
        Command::Analyze(a) => commands::analyze(&a, &settings, &mut sink)?,
    }
    sink.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
