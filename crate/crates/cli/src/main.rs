use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tape_cli::commands;
use tape_cli::config::{parse_override, Assignment, RunConfig};
use tape_cli::CliError;

#[derive(Parser)]
#[command(name = "tape", about = "Train, distill and evaluate the toy motion-transfer model")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Run seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and list which clips feed which stage.
    GenData,
    /// Pretrain the backbone.
    Pretrain,
    /// Stage I: one adapter per training body.
    TrainLora,
    /// Stage II: shared motion deltas with rolling adapters.
    TrainShared,
    /// Fit an adapter for the held-out body.
    Adapt,
    /// Teacher-forcing initialization of the causal student.
    DistillTf,
    /// Self-forcing distillation of the causal student.
    DistillSf,
    /// Save source, target and generated frames of one held-out case.
    Rollout {
        #[arg(long, default_value_t = 0)]
        case: usize,
        /// Use the distilled student instead of the teacher.
        #[arg(long)]
        student: bool,
    },
    /// Held-out metrics against copy-source and mean-frame baselines.
    Bench,
    /// Check structural invariants of the trained models.
    Probe {
        #[arg(long, default_value_t = 4)]
        seeds: usize,
    },
    /// Every stage in order.
    All,
    /// Print the resolved config.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides: Vec<Assignment> = Vec::new();
    if let Ok(dir) = std::env::var("TAPE_RUNS_DIR") {
        overrides.push(Assignment {
            key: "paths.runs".into(),
            value: dir,
            line: None,
        });
    }
    for s in &cli.sets {
        overrides.push(parse_override(s)?);
    }
    if let Some(seed) = cli.seed {
        overrides.push(Assignment {
            key: "seed".into(),
            value: seed.to_string(),
            line: None,
        });
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let rc = resolve(cli)?;
    let dir = match &cli.command {
        Command::GenData => commands::gen_data(&rc)?,
        Command::Pretrain => commands::pretrain(&rc)?,
        Command::TrainLora => commands::train_lora(&rc)?,
        Command::TrainShared => commands::train_shared(&rc)?,
        Command::Adapt => commands::adapt(&rc)?,
        Command::DistillTf => commands::distill_tf(&rc)?,
        Command::DistillSf => commands::distill_sf(&rc)?,
        Command::Rollout { case, student } => commands::rollout_grid(&rc, *case, *student)?,
        Command::Bench => commands::bench(&rc)?,
        Command::Probe { seeds } => commands::probe(&rc, *seeds)?,
        Command::All => commands::all(&rc)?,
        Command::Config => {
            print!("{}", rc.render());
            return Ok(());
        }
    };
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
