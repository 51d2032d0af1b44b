//! `plugnet` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plugnet::bench::{bench, BenchConfig};
use plugnet::experiment::{self, ExperimentConfig, Sweep};
use plugnet::nn::{checkpoint, save_checkpoint, BaseNetwork};
use plugnet::plugin::{JointModel, PluginNetwork};
use plugnet::synth::Dataset;
use plugnet::train::{default_metrics, evaluate, Metric, TrainHistory};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "plugnet", version, about = "Plugin networks on synthetic partial-evidence tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from an experiment config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base network on every label and save it frozen.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train plugins on a frozen base checkpoint.
    TrainPlugin {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a base network, optionally with plugins.
    Evaluate(EvaluateArgs),
    /// Train one plugin set per variant of a sweep and write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// fusion, attach or depth
        #[arg(long)]
        sweep: String,
        /// Reuse a dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reuse a base checkpoint instead of training one.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train variants concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Time base forward, joint forward and feedback-prop inference.
    Bench(BenchArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    base: PathBuf,
    /// Plugin checkpoint; repeat for several plugins.
    #[arg(long)]
    plugin: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated metric names; defaults to the task's metrics.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, required = true)]
    plugin: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "fbprop-T", default_value_t = 10)]
    fbprop_t: usize,
    #[arg(long = "fbprop-eta", default_value_t = 0.1)]
    fbprop_eta: f64,
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 64)]
    examples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .any(|e| e.downcast_ref::<plugnet::Error>().is_some_and(plugnet::Error::is_config));
    if config {
        2
    } else {
        1
    }
}

fn set_threads() -> Result<()> {
    let Ok(value) = std::env::var("PLUGNET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| plugnet::Error::Config(format!("PLUGNET_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ExperimentConfig::from_str_json(&text).with_context(|| format!("in config {}", path.display()))
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .ok_or_else(|| plugnet::Error::Config("no output directory: pass --out or set \"out\"".into()))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    fs::write(path, history.to_jsonl()?).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_base(path: &Path) -> Result<BaseNetwork> {
    let bytes = fs::read(path).with_context(|| format!("reading base checkpoint {}", path.display()))?;
    let (header, _) = checkpoint::decode(&bytes)?;
    if header.plugin.is_some() {
        bail!("{} is a plugin checkpoint, not a base network", path.display());
    }
    let base = checkpoint::from_bytes(&bytes)?;
    if !base.is_frozen() {
        return Err(plugnet::Error::NotFrozen.into());
    }
    Ok(base)
}

fn load_joint(base: BaseNetwork, plugins: &[PathBuf]) -> Result<JointModel> {
    let plugins = plugins
        .iter()
        .map(|p| PluginNetwork::load(p).with_context(|| format!("loading plugin {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointModel::new(base, plugins)?)
}

fn sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn gen_data(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out_dir(out, Some(&cfg))?;
    let data = experiment::gen_data(&cfg)?;
    data.save(&dir)?;
    write_json(&dir.join("config.json"), &cfg.to_json())?;
    println!("wrote {} examples to {}", data.train.len() + data.val.len() + data.test.len(), dir.display());
    Ok(())
}

fn train_base(config: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let data = load_data(data)?;
    let dir = out_dir(out, Some(&cfg))?;
    let stage = experiment::base_stage(&cfg, &data)?;
    save_checkpoint(&stage.model, dir.join("base.ckpt"))?;
    write_history(&dir.join("base_history.jsonl"), &stage.history)?;
    write_json(&dir.join("base_metrics.json"), &stage.test)?;
    write_json(&dir.join("config.json"), &cfg.to_json())?;
    println!("{}", serde_json::to_string(&stage.test)?);
    Ok(())
}

fn train_plugin(config: &Path, base_path: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let data = load_data(data)?;
    let dir = out_dir(out, Some(&cfg))?;
    let before = sha256(base_path)?;
    let base = load_base(base_path)?;
    let stage = experiment::plugin_stage(&cfg, base, &data)?;
    let after = sha256(base_path)?;
    if before != after {
        bail!("base checkpoint {} changed during plugin training", base_path.display());
    }
    for (k, p) in stage.model.plugins().iter().enumerate() {
        p.save(dir.join(format!("plugin{k}.ckpt")))?;
    }
    write_history(&dir.join("plugin_history.jsonl"), &stage.history)?;
    write_json(&dir.join("joint_metrics.json"), &stage.test)?;
    write_json(&dir.join("config.json"), &cfg.to_json())?;
    println!("{}", serde_json::to_string(&stage.test)?);
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let split = match args.split.as_str() {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => return Err(plugnet::Error::Config(format!("unknown split {other:?}")).into()),
    };
    let metrics = if args.metrics.is_empty() {
        default_metrics(data.info.task)
    } else {
        args.metrics.iter().map(|m| m.parse()).collect::<plugnet::Result<Vec<Metric>>>()?
    };
    let base = load_base(&args.base)?;
    let report = if args.plugin.is_empty() {
        evaluate(&base, &data.info, split, &metrics)?
    } else {
        evaluate(&load_joint(base, &args.plugin)?, &data.info, split, &metrics)?
    };
    if let Some(path) = args.out {
        write_json(&path, &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn ablate(
    config: &Path,
    sweep: &str,
    data: Option<PathBuf>,
    base: Option<PathBuf>,
    out: Option<PathBuf>,
    parallel: bool,
) -> Result<()> {
    let sweep: Sweep = sweep.parse()?;
    let cfg = load_config(config)?;
    let dir = out_dir(out, Some(&cfg))?;
    let data = match data {
        Some(path) => load_data(&path)?,
        None => experiment::gen_data(&cfg)?,
    };
    let base = match base {
        Some(path) => load_base(&path)?,
        None => {
            let stage = experiment::base_stage(&cfg, &data)?;
            write_history(&dir.join("base_history.jsonl"), &stage.history)?;
            stage.model
        }
    };
    let (table, stages) = experiment::ablate(&cfg, &data, &base, sweep, parallel)?;
    for (row, stage) in table.rows.iter().zip(&stages) {
        let vdir = dir.join(format!("{sweep}-{}", row.variant.replace('+', "_")));
        fs::create_dir_all(&vdir)?;
        write_history(&vdir.join("plugin_history.jsonl"), &stage.history)?;
        write_json(&vdir.join("joint_metrics.json"), &stage.test)?;
    }
    let csv = table.to_csv()?;
    fs::write(dir.join(format!("ablate_{sweep}.csv")), &csv)?;
    write_json(&dir.join("config.json"), &cfg.to_json())?;
    print!("{csv}");
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let base = load_base(&args.base)?;
    let joint = load_joint(base.clone(), &args.plugin)?;
    let cfg = BenchConfig {
        warmup: args.warmup,
        reps: args.reps,
        examples: args.examples,
        fbprop_iterations: args.fbprop_t,
        fbprop_step: args.fbprop_eta,
    };
    if cfg.reps < 30 {
        return Err(anyhow!(plugnet::Error::Config("bench needs at least 30 repetitions".into())));
    }
    let report = bench(&base, &joint, &data.info, &data.test, &cfg)?;
    if let Some(path) = args.out {
        write_json(&path, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, out),
        Command::TrainBase { config, data, out } => train_base(&config, &data, out),
        Command::TrainPlugin {
            config,
            base,
            data,
            out,
        } => train_plugin(&config, &base, &data, out),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Ablate {
            config,
            sweep,
            data,
            base,
            out,
            parallel,
        } => ablate(&config, &sweep, data, base, out, parallel),
        Command::Bench(args) => bench_cmd(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
