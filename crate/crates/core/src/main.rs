use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evimix::harness::{
    exit_code_for, parse_config, preset, run_experiment, ExperimentConfig, ExperimentKind, Outcome, EXIT_CONFIG,
    OUTPUT_ROOT_ENV, PRESET_NAMES,
};
use evimix::{Error, Result};

#[derive(Parser)]
#[command(name = "evimix", version, about = "Extended variational inference for beta and Dirichlet mixtures")]
#[command(after_help = "Output goes to the config's `output` path, or under $EVIMIX_OUTPUT_ROOT (default ./evimix-out).\n\
Exit status: 0 success, 1 an experiment check failed, 2 config error, 3 runtime error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run { config: PathBuf },
    /// Run a built-in model by name.
    Preset {
        /// One of model-a-bmm, model-b-bmm, model-b-dmm.
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// trace-study (default) or comparison.
        #[arg(long, default_value = "trace-study")]
        kind: String,
    },
    /// Check the bound inequalities and gaps on random posteriors.
    Sweep {
        #[arg(long)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(command: Command) -> Result<ExperimentConfig> {
    match command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::Config {
                field: config.display().to_string(),
                detail: e.to_string(),
            })?;
            parse_config(&text)
        }
        Command::Preset { name, out, seed, kind } => {
            if preset(&name).is_none() {
                return Err(Error::Config {
                    field: "name".into(),
                    detail: format!("unknown preset `{name}`; expected one of {}", PRESET_NAMES.join(", ")),
                });
            }
            let kind: ExperimentKind = kind.parse()?;
            if kind == ExperimentKind::BoundSweep {
                return Err(Error::Config {
                    field: "kind".into(),
                    detail: "presets run trace-study or comparison; use `sweep` for the bound sweep".into(),
                });
            }
            let mut config = ExperimentConfig::new(kind);
            config.model = Some(name);
            config.seed = seed;
            config.output = Some(out);
            let text = config.to_toml();
            parse_config(&text)
        }
        Command::Sweep { configs, seed, out } => {
            let mut config = ExperimentConfig::new(ExperimentKind::BoundSweep);
            config.sweep.configs = configs;
            config.seed = seed;
            config.output = Some(out);
            config.validate()?;
            Ok(config)
        }
    }
}

fn report(outcome: &Outcome) {
    println!("wrote {} files to {}", outcome.manifest.files.len() + 1, outcome.dir.display());
    for a in &outcome.manifest.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match build_config(cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if config.output.is_none() && std::env::var_os(OUTPUT_ROOT_ENV).is_none() {
        eprintln!("note: no output path given, writing under ./evimix-out");
    }
    match run_experiment(&config) {
        Ok(outcome) => {
            report(&outcome);
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
