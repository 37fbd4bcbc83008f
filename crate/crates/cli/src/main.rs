mod config;
mod experiments;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Experiment, ExperimentConfig, KernelCheck};
use experiments::{sha256_hex, Artifacts};

/// Experiments for McKean-Vlasov equations driven by alpha-stable noise.
#[derive(Parser, Debug)]
#[command(name = "mvstable", version)]
struct Cli {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, env = "MVSTABLE_OUT")]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment named in the config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a config against the schema and assumption windows without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// List the available experiments.
    List,
    Simulate(ConfigArg),
    Counterexample(ConfigArg),
    Limits {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = ["i", "ii"])]
        part: Option<String>,
        /// Override the midpoint choice of theta (part ii).
        #[arg(long)]
        theta: Option<f64>,
    },
    KernelCheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        check: Option<KernelCheck>,
    },
    MetricsSelftest(ConfigArg),
    Contraction(ConfigArg),
}

/// Exit status: 1 for invalid input, 2 for numerical failure.
enum Failure {
    Invalid(anyhow::Error),
    Numerical(anyhow::Error),
}

fn classify(e: anyhow::Error) -> Failure {
    use mvstable::Error as E;
    match e.downcast_ref::<E>() {
        Some(
            E::NonFinite { .. }
            | E::NonConvergence { .. }
            | E::Numerical(_)
            | E::IllConditioned(_)
            | E::Calibration(_)
            | E::InsufficientSamples(_),
        ) => Failure::Numerical(e),
        _ => Failure::Invalid(e),
    }
}

fn diagnostics(e: &anyhow::Error) -> serde_json::Value {
    let mut d = json!({
        "error": e.to_string(),
        "chain": e.chain().map(|c| c.to_string()).collect::<Vec<_>>(),
    });
    match e.downcast_ref::<mvstable::Error>() {
        Some(mvstable::Error::NonConvergence {
            stage,
            iterations,
            last,
            residuals,
        }) => {
            d["kind"] = json!("non_convergence");
            d["stage"] = json!(stage);
            d["iterations"] = json!(iterations);
            d["last_residual"] = json!(last);
            d["residuals"] = json!(residuals);
        }
        Some(mvstable::Error::NonFinite { particle, step }) => {
            d["kind"] = json!("non_finite");
            d["particle"] = json!(particle);
            d["step"] = json!(step);
        }
        _ => d["kind"] = json!("numerical"),
    }
    d
}

fn load(path: Option<&Path>, experiment: Option<Experiment>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(e) = experiment {
        match cfg.experiment {
            Some(named) if named != e => {
                anyhow::bail!("config names experiment `{}` but `{}` was requested", named.name(), e.name())
            }
            _ => cfg.experiment = Some(e),
        }
    }
    Ok(cfg)
}

fn resolve(cli: &Cli) -> anyhow::Result<Option<ExperimentConfig>> {
    let cfg = match &cli.command {
        Command::List | Command::Validate { .. } => return Ok(None),
        Command::Run { config } => load(Some(config), None)?,
        Command::Simulate(c) => load(c.config.as_deref(), Some(Experiment::Simulate))?,
        Command::Counterexample(c) => load(c.config.as_deref(), Some(Experiment::Counterexample))?,
        Command::MetricsSelftest(c) => load(c.config.as_deref(), Some(Experiment::MetricsSelftest))?,
        Command::Contraction(c) => load(c.config.as_deref(), Some(Experiment::Contraction))?,
        Command::Limits { config, part, theta } => {
            let mut cfg = load(config.config.as_deref(), Some(Experiment::Limits))?;
            if let Some(p) = part {
                cfg.limits.part = p.clone();
            }
            if theta.is_some() {
                cfg.limits.theta = *theta;
            }
            cfg
        }
        Command::KernelCheck { config, check } => {
            let mut cfg = load(config.config.as_deref(), Some(Experiment::KernelCheck))?;
            if let Some(c) = check {
                cfg.kernel.check = *c;
            }
            cfg
        }
    };
    Ok(Some(cfg))
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    if let Some(d) = cli.out.clone().or_else(|| cfg.output_dir.clone()) {
        return Ok(d);
    }
    let exp = cfg.experiment()?;
    let name = match exp {
        Experiment::Limits => format!("limits-{}", cfg.limits.part),
        Experiment::KernelCheck => format!("kernel-{}", cfg.kernel.check.name()),
        _ => exp.name().to_string(),
    };
    Ok(PathBuf::from("runs").join(name))
}

fn execute(cli: &Cli, mut cfg: ExperimentConfig) -> Result<(), Failure> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Failure::Invalid(anyhow::anyhow!("invalid configuration:\n  {}", errors.join("\n  "))));
    }
    let dir = output_dir(cli, &cfg).map_err(Failure::Invalid)?;
    let mut out = Artifacts::create(&dir).map_err(Failure::Invalid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("cannot start worker pool")
        .map_err(Failure::Invalid)?;

    let canonical = cfg.canonical();
    let start = Instant::now();
    let result = pool.install(|| experiments::run(&cfg, &mut out));
    let wall = start.elapsed().as_secs_f64();
    let status = match &result {
        Ok(summary) => json!({ "ok": true, "summary": summary }),
        Err(e) => json!({ "ok": false, "error": e.to_string() }),
    };
    let failure = result.err().map(classify);
    if let Some(Failure::Numerical(e)) = &failure {
        out.json("diagnostics.json", &diagnostics(e)).map_err(Failure::Invalid)?;
    }
    let manifest = json!({
        "tool": "mvstable",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment().map_err(Failure::Invalid)?.name(),
        "seed": cfg.seed,
        "config_sha256": sha256_hex(canonical.as_bytes()),
        "config": canonical,
        "threads": pool.current_num_threads(),
        "wall_time_seconds": wall,
        "status": status,
        "artifacts": out.files.iter().map(|(f, h)| json!({ "file": f, "sha256": h })).collect::<Vec<_>>(),
    });
    out.json("manifest.json", &manifest).map_err(Failure::Invalid)?;
    match failure {
        None => {
            let summary = status["summary"].as_str().unwrap_or_default();
            println!("{summary}");
            println!("artifacts in {}", out.dir().display());
            Ok(())
        }
        Some(f) => Err(f),
    }
}

fn validate_only(path: &Path) -> ExitCode {
    match ExperimentConfig::load(path) {
        Ok(cfg) => {
            let errors = cfg.validate();
            if errors.is_empty() {
                println!("ok");
                ExitCode::SUCCESS
            } else {
                errors.iter().for_each(|e| eprintln!("{e}"));
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::List => {
            for e in Experiment::ALL {
                println!("{:<18}{}", e.name(), e.summary());
            }
            return ExitCode::SUCCESS;
        }
        Command::Validate { config } => return validate_only(config),
        _ => {}
    }
    let outcome = resolve(&cli)
        .map_err(Failure::Invalid)
        .and_then(|cfg| execute(&cli, cfg.expect("experiment commands carry a config")));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(2)
        }
    }
}
