use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use r3_lab::{run_diagnose, run_replay_verify, run_train, ExperimentConfig, LabError};

#[derive(Parser)]
#[command(name = "r3", about = "Routing replay experiments on a toy mixture-of-experts policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Measure train/inference mismatch with and without replayed masks.
    Diagnose(ConfigArg),
    /// Run RL training on the sorting task.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        replay: Option<String>,
        #[arg(long)]
        mini_steps: Option<usize>,
        /// Enables truncated importance sampling with this ceiling.
        #[arg(long)]
        tis_c: Option<f64>,
    },
    /// Run the replay invariant checks.
    ReplayVerify(ConfigArg),
}

fn load(path: &Path, overrides: &[(&str, String)]) -> Result<ExperimentConfig, LabError> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    let mut bad = Vec::new();
    for (k, v) in overrides {
        if let Err(e) = cfg.set(k, v) {
            bad.push(format!("{k}: {e}"));
        }
    }
    if !bad.is_empty() {
        return Err(LabError::Config {
            keys: overrides.iter().map(|(k, _)| k.to_string()).collect(),
            detail: bad.join("; "),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, LabError> {
    match cli.command {
        Command::Diagnose(a) => {
            let r = run_diagnose(&load(&a.config, &[])?)?;
            println!("{}", serde_json::to_string_pretty(&r.summary)?);
            Ok(true)
        }
        Command::Train {
            config,
            method,
            replay,
            mini_steps,
            tis_c,
        } => {
            let mut o = Vec::new();
            if let Some(m) = method {
                o.push(("rl.method", m));
            }
            if let Some(r) = replay {
                o.push(("rl.replay", r));
            }
            if let Some(n) = mini_steps {
                o.push(("rl.mini_steps", n.to_string()));
            }
            if let Some(c) = tis_c {
                o.push(("rl.tis", "true".to_string()));
                o.push(("rl.tis_c", c.to_string()));
            }
            let r = run_train(&load(&config.config, &o)?)?;
            println!("{}", serde_json::to_string_pretty(&r.summary)?);
            Ok(true)
        }
        Command::ReplayVerify(a) => {
            let r = run_replay_verify(&load(&a.config, &[])?)?;
            for c in &r.checks {
                println!("{} {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.detail);
            }
            Ok(r.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) if e.is_validation() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
