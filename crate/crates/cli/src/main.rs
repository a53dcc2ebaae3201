use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffscm::config::{ExperimentConfig, Overrides};
use diffscm::error::{Error, Result};
use diffscm::pipeline::{self, RunManifest, TrainRole};

#[derive(Parser)]
#[command(name = "diffscm", version, about = "Diffusion-based structural causal model experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reseed every stage from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Schedule profile: default, short or a step count.
    #[arg(long, global = true)]
    steps: Option<String>,
    /// Use analytic oracles instead of trained models where the family has them.
    #[arg(long, global = true)]
    use_oracle: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the dataset and write it as a DSCM file.
    GenerateData,
    /// Train one model role, or all of them.
    Train {
        #[arg(long, default_value = "all")]
        role: String,
    },
    /// Abduct test factuals and generate guided counterfactuals.
    Counterfact {
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Sample under do(y = target) from fresh latents.
    Intervene {
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        /// Reuse one latent for every sample.
        #[arg(long)]
        shared_latent: bool,
    },
    /// Score the stored counterfactuals.
    Eval,
    /// Mean CLD over a grid of guidance scales.
    SweepScale {
        /// Comma-separated scales; the config grid when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Print the effective config.
    ShowConfig,
}

fn load(global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: global.seed,
        out: global.out.clone(),
        steps: global.steps.clone(),
        use_oracle: global.use_oracle,
    })?;
    Ok(cfg)
}

fn summary(m: &RunManifest) -> Result<String> {
    serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = load(&cli.global)?;
    let manifest = match cli.command {
        Command::GenerateData => pipeline::cmd_generate_data(&cfg)?,
        Command::Train { role } => pipeline::cmd_train(&cfg, TrainRole::parse(&role)?)?,
        Command::Counterfact { scale, count } => {
            if let Some(s) = scale {
                cfg.guidance.scale = s;
            }
            if let Some(n) = count {
                cfg.counterfact.count = n;
            }
            cfg.validate()?;
            pipeline::cmd_counterfact(&cfg)?.0
        }
        Command::Intervene {
            target,
            count,
            scale,
            shared_latent,
        } => {
            if let Some(t) = target {
                cfg.intervene.target = t;
            }
            if let Some(n) = count {
                cfg.intervene.count = n;
            }
            if let Some(s) = scale {
                cfg.guidance.scale = s;
            }
            cfg.intervene.shared_latent |= shared_latent;
            cfg.validate()?;
            pipeline::cmd_intervene(&cfg)?.0
        }
        Command::Eval => pipeline::cmd_eval(&cfg)?.0,
        Command::SweepScale { grid } => {
            let (m, rows) = pipeline::cmd_sweep_scale(&cfg, grid.as_deref())?;
            return Ok(format!("{}{}", pipeline::sweep_csv(&rows), summary(&m)?));
        }
        Command::ShowConfig => return cfg.to_toml(),
    };
    summary(&manifest)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
