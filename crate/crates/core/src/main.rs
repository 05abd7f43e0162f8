use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use prodding::distill::run_distillation;
use prodding::finetune::run_finetune;
use prodding::harness::{
    emit_report, evaluate, load_domains, oracle_cache_path, prepare_source_checkpoint,
    resolve_output, Experiment, ExperimentConfig, Report, ReportFormat,
};
use prodding::networks::{Checkpoint, Network};
use prodding::oracle::{query_dataset, serve_blocking, BlackBoxOracle, QueryMode, RemoteOracle};
use prodding::rng::child_seed;
use prodding::Error;

#[derive(Parser)]
#[command(
    name = "prodding",
    version,
    about = "Black-box domain adaptation pipeline"
)]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "PRODDING_OUTPUT", global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Soft,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model (or confirm the cached one).
    TrainSource {
        #[arg(long)]
        config: PathBuf,
    },
    /// Expose a source checkpoint as a query-only HTTP oracle.
    ServeOracle {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Most informative mode clients may ask for.
        #[arg(long, value_enum, default_value = "soft")]
        mode: ModeArg,
        /// Truncation depth allowed in soft mode.
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8750)]
        port: u16,
    },
    /// Query the oracle once per target example and cache the answers.
    Query {
        #[arg(long)]
        config: PathBuf,
        /// Remote oracle; the configured source model is used when absent.
        #[arg(long)]
        url: Option<String>,
    },
    /// Step one only, writing the model and every bank snapshot.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Step two only, starting from a target checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init_checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full pipeline over every seed and preset.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of csv, json, plots.
        #[arg(long, default_value = "csv,json,plots")]
        format: String,
    },
    /// Score a target checkpoint on the configured target domain.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Re-emit tables and plots from a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv,json,plots")]
        format: String,
    },
}

fn load_config(path: &Path, root: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    cfg.output_dir = resolve_output(&cfg.output_dir, root);
    Ok(cfg)
}

fn formats(spec: &str) -> anyhow::Result<Vec<ReportFormat>> {
    Ok(spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<_>, Error>>()?)
}

fn first_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::TrainSource { config } => {
            let cfg = load_config(&config, root)?;
            let (path, acc) = prepare_source_checkpoint(&cfg)?;
            println!(
                "source checkpoint {} (source accuracy {acc:.4})",
                path.display()
            );
        }
        Command::ServeOracle {
            checkpoint,
            mode,
            r,
            host,
            port,
        } => {
            let oracle = BlackBoxOracle::from_checkpoint(&checkpoint)?;
            let ceiling = match mode {
                ModeArg::Hard => QueryMode::Hard,
                ModeArg::Soft => QueryMode::SoftTopR { r },
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Config(format!("bad address: {e}")))?;
            serve_blocking(Arc::new(oracle), addr, Some(ceiling))?;
        }
        Command::Query { config, url } => {
            let cfg = load_config(&config, root)?;
            let answers = match url {
                Some(url) => {
                    let (_, target) = load_domains(&cfg)?;
                    let remote = RemoteOracle::connect(&url)?;
                    let cache = oracle_cache_path(&cfg);
                    std::fs::create_dir_all(cache.parent().unwrap())
                        .with_context(|| format!("creating {}", cache.display()))?;
                    query_dataset(&remote, &target, cfg.query_mode(), Some(&cache))?
                }
                None => Experiment::prepare(cfg.clone())?.oracle_answers().clone(),
            };
            println!(
                "{} answers cached in {}",
                answers.len(),
                oracle_cache_path(&cfg).display()
            );
        }
        Command::Distill { config, seed } => {
            let cfg = load_config(&config, root)?;
            let seed = first_seed(&cfg, seed);
            let exp = Experiment::prepare(cfg.clone())?;
            let flags = cfg.presets()?[0]
                .distill
                .ok_or_else(|| Error::Config("every distillation term is disabled".into()))?;
            let (model, history) = run_distillation(
                exp.init_target(seed)?,
                exp.target(),
                exp.oracle_answers(),
                &cfg.hyperparams(),
                &cfg.optim(),
                flags,
                child_seed(seed, "distill"),
            )?;
            let dir = cfg.output_dir.join("distill").join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (epoch, bank) in history.banks.iter().enumerate() {
                bank.save(&dir.join(format!("bank-{epoch:03}.json")))?;
            }
            let steps: Vec<String> = history
                .steps
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?;
            std::fs::write(dir.join("metrics.jsonl"), steps.join("\n") + "\n")?;
            Checkpoint::from_target(&model, seed, cfg.epochs).save(&dir.join("model.json"))?;
            let m = evaluate(&model, exp.target())?;
            println!(
                "distilled model in {} (accuracy {:.4})",
                dir.display(),
                m.accuracy
            );
        }
        Command::Finetune {
            config,
            init_checkpoint,
            seed,
        } => {
            let cfg = load_config(&config, root)?;
            let seed = first_seed(&cfg, seed);
            let (_, target) = load_domains(&cfg)?;
            let model = Checkpoint::load(&init_checkpoint)?.into_target()?;
            let flags = cfg.presets()?[0]
                .finetune
                .ok_or_else(|| Error::Config("every fine-tuning term is disabled".into()))?;
            let (model, history) = run_finetune(
                model,
                &target,
                &cfg.finetune_hyperparams(),
                &cfg.optim(),
                flags,
                &cfg.augment_params(),
                child_seed(seed, "finetune"),
            )?;
            let dir = cfg.output_dir.join("finetune").join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let epochs: Vec<String> = history
                .epochs
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?;
            std::fs::write(dir.join("metrics.jsonl"), epochs.join("\n") + "\n")?;
            let last = history.epochs.len();
            Checkpoint::from_target(&model, seed, last).save(&dir.join("model.json"))?;
            let m = evaluate(&model, &target)?;
            println!(
                "fine-tuned model in {} (accuracy {:.4})",
                dir.display(),
                m.accuracy
            );
        }
        Command::Run { config, format } => {
            let cfg = load_config(&config, root)?;
            let formats = formats(&format)?;
            let report = Experiment::prepare(cfg.clone())?.run()?;
            let dir = cfg.output_dir.join("report");
            emit_report(&report, &dir, &formats)?;
            print!("{}", report.to_csv());
            println!("report {} in {}", report.fingerprint, dir.display());
            if report.partial {
                anyhow::bail!("some seeds failed; see report.json");
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(&config, root)?;
            let (_, target) = load_domains(&cfg)?;
            let model = Checkpoint::load(&checkpoint)?.into_target()?;
            let m = evaluate(&model, &target)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            println!("checksum {}", model.checksum());
        }
        Command::Report { input, out, format } => {
            let report = Report::load(&input)?;
            for path in emit_report(&report, &out, &formats(&format)?)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}
