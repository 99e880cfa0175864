//! `cdhar`: run pipeline stages, check configs and generate the bundled
//! synthetic datasets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdhar::experiment::{validate_config, ExperimentConfig, Runner, Severity, StageName};
use cdhar::data::SyntheticDomain;
use cdhar::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cdhar", version, about = "Few-shot cross-domain activity recognition experiments")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set student.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding one folder per dataset id.
    #[arg(long)]
    datasets_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one stage: ingest, teacher, pseudolabel, student, fewshot,
    /// baseline, ablate, report or search.
    Run {
        stage: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Where artifacts go; falls back to `paths.run_dir`, then `runs`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Print config diagnostics; fails if any is an error.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a config file with every default spelled out.
    Init {
        #[arg(long, default_value = "experiment.toml")]
        output: PathBuf,
        /// Short schedule for the synthetic datasets.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        force: bool,
    },
    /// Write the synthetic source and target datasets as CSV recordings.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(root) = &args.datasets_root {
        cfg.paths.datasets_root = Some(root.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { stage, config, run_dir } => {
            let stage = StageName::parse(&stage)?;
            let cfg = load_config(&config)?;
            let run_dir = run_dir
                .or_else(|| cfg.paths.run_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs"));
            let outcome = Runner::new(cfg, &run_dir)?.run(stage)?;
            let m = outcome.manifest();
            let status = if outcome.is_cached() { "cached" } else { "done" };
            println!("{stage}: {status} ({} artifacts, stage hash {})", m.outputs.len(), &m.stage_hash[..12]);
            for path in m.outputs.keys() {
                println!("  {}", run_dir.join(path).display());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let diags = validate_config(&cfg);
            for d in &diags {
                println!("{d}");
            }
            println!("config hash {}", cfg.hash());
            match diags.iter().find(|d| d.severity == Severity::Error) {
                Some(d) => Err(Error::Config(d.to_string())),
                None => Ok(()),
            }
        }
        Command::Init { output, quick, force } => {
            if output.exists() && !force {
                return Err(Error::Usage(format!("{} exists; pass --force to overwrite", output.display())));
            }
            let cfg = if quick {
                ExperimentConfig::synthetic_quick()
            } else {
                ExperimentConfig::default()
            };
            write_text(&output, &cfg.to_toml())?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Synth { out } => {
            for domain in [SyntheticDomain::source(), SyntheticDomain::target()] {
                let dir = domain.write_layout(&out)?;
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
