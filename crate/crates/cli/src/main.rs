use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cpicl_cli::{
    cmd_compare, cmd_eval, cmd_oracle_check, cmd_train, format_row, format_suite, ExperimentConfig, Overrides, Preset,
};
use cpicl_core::eval::{compare, SchemeId};

#[derive(Parser)]
#[command(name = "cpicl", version, about = "Conformal prediction with in-context learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Miscoverage level for evaluation and the CP-aware loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Run single-threaded.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let cfg = cfg.with_overrides(&Overrides {
            seed: self.seed,
            alpha: self.alpha,
            deterministic: self.deterministic,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the model a scheme runs on.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_scheme)]
        scheme: SchemeId,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a scheme on the test stream.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_scheme)]
        scheme: SchemeId,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate evaluation summaries (files or run directories).
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the brute-force equivalence suites; exits 2 on any failure.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a config file with every default filled in.
    GenConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_scheme(s: &str) -> Result<SchemeId, String> {
    s.parse().map_err(|e: cpicl_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, scheme, out } => {
            let cfg = common.load()?;
            let outcome = cmd_train(&cfg, scheme, &out)?;
            println!(
                "trained {} ({:?}) best epoch {} -> {}",
                scheme,
                outcome.checkpoint.objective,
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Eval {
            common,
            scheme,
            checkpoint,
            out,
        } => {
            let cfg = common.load()?;
            let report = cmd_eval(&cfg, scheme, &checkpoint, &out)?;
            println!("{}", format_row(&compare(&[report.summary])[0]));
        }
        Command::Compare { reports, out } => {
            for row in cmd_compare(&reports, &out)? {
                println!("{}", format_row(&row));
            }
        }
        Command::OracleCheck { seed, out } => {
            let suites = cmd_oracle_check(seed, out.as_deref())?;
            for s in &suites {
                println!("{}", format_suite(s));
            }
            if suites.iter().any(|s| !s.passed) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::GenConfig { preset, out } => {
            let text = ExperimentConfig::preset(preset).to_toml()?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
