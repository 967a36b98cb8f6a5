use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use moirenet::checkpoint;
use moirenet::datagen::{self, SynthConfig, SynthMode};
use moirenet::network::{MoireNet, NetworkConfig};
use moirenet::selfcheck::{self, Precision};
use moirenet::trainer::{self, TrainConfig};

/// Synthetic-data demoireing: generate pairs, train, run and score the network.
#[derive(Debug, Parser)]
#[command(name = "moirenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic clean/moire dataset.
    Synth(SynthArgs),
    /// Train a network and write the best checkpoint.
    Train(TrainArgs),
    /// Demoire a single PNG.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the parameter count and a per-module breakdown.
    Params(ParamsArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "sinus")]
    mode: SynthMode,
    #[arg(long, default_value_t = 0.3)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.45)]
    f1: f64,
    #[arg(long, default_value_t = 0.40)]
    f2: f64,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    cycles: Option<usize>,
    /// Seeds both parameter initialization and data shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fraction: Option<f64>,
    /// JSON file with optional `network` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    no_clip: bool,
    /// Also write the training report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check a single primitive, block, or `network`.
    #[arg(long, value_parser = PossibleValuesParser::new(selfcheck::all_names()))]
    op: Option<String>,
    /// Run the analytic gradients in 64-bit.
    #[arg(long)]
    f64: bool,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    network: NetworkConfig,
    train: TrainConfig,
}

enum Failure {
    /// Bad flags or configuration: exit code 1.
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work: exit code 2.
    Runtime(anyhow::Error),
}

impl From<moirenet::Error> for Failure {
    fn from(e: moirenet::Error) -> Self {
        match e {
            moirenet::Error::BadConfig(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

/// Attaches the path a library call was working on.
fn at<T>(r: moirenet::Result<T>, path: &Path) -> Result<T, Failure> {
    r.map_err(|e| match Failure::from(e) {
        Failure::Usage(e) => Failure::Usage(e.context(path.display().to_string())),
        Failure::Runtime(e) => Failure::Runtime(e.context(path.display().to_string())),
    })
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(anyhow!("{}: {e}", path.display())))
}

fn synth(a: SynthArgs) -> Outcome {
    let cfg = SynthConfig { size: a.size, mode: a.mode, amplitude: a.amplitude, f1: a.f1, f2: a.f2, seed: a.seed };
    cfg.validate()?;
    let manifest = at(datagen::generate_dataset(&a.out, a.count, &cfg), &a.out)?;
    log::info!("wrote {} pairs to {}", manifest.count, a.out.display());
    println!("{}", serde_json::to_string(&manifest).map_err(anyhow::Error::from)?);
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let ConfigFile { network: mut net_cfg, train: mut cfg } = read_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr_max = v;
    }
    if let Some(v) = a.cycles {
        cfg.cycles = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        net_cfg.seed = v;
    }
    if let Some(v) = a.fraction {
        cfg.fraction = v;
    }
    if a.no_clip {
        cfg.clip_norm = None;
    }
    net_cfg.validate()?;
    cfg.validate()?;
    let pairs = at(datagen::load_dataset(&a.data), &a.data)?;
    let mut net = MoireNet::build(&net_cfg)?;
    log::info!("{} parameters, {} pairs", net.count_params(), pairs.len());
    let report = at(trainer::train(&mut net, &pairs, &cfg, Some(&a.out)), &a.out)?;
    let json = serde_json::to_string(&report).map_err(anyhow::Error::from)?;
    if let Some(path) = &a.report {
        fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn infer(a: InferArgs) -> Outcome {
    let net = at(checkpoint::load(&a.ckpt), &a.ckpt)?;
    let input = at(datagen::load_png(&a.input), &a.input)?;
    let output = net.forward(&input)?.map(|v| v.clamp(0.0, 1.0));
    at(datagen::save_png(&output, &a.output), &a.output)?;
    println!("{}", a.output.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let net = at(checkpoint::load(&a.ckpt), &a.ckpt)?;
    let pairs = at(datagen::load_dataset(&a.data), &a.data)?;
    let report = trainer::evaluate(&net, &pairs)?;
    println!("{}", report.output);
    println!("baseline {}", report.input);
    Ok(())
}

fn params(a: ParamsArgs) -> Outcome {
    let cfg = read_config(a.config.as_deref())?.network;
    cfg.validate()?;
    let net = MoireNet::<f32>::build(&cfg)?;
    println!("{}", net.count_params());
    for (module, count) in net.breakdown() {
        println!("{module} {count}");
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let precision = if a.f64 { Precision::F64 } else { Precision::F32 };
    let names = match &a.op {
        Some(op) => vec![op.as_str()],
        None => selfcheck::all_names(),
    };
    let mut failed = Vec::new();
    for name in names {
        let r = selfcheck::run(name, precision)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{} {:.3e} {:.0e} {verdict}", r.name, r.max_rel_error, r.threshold);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
