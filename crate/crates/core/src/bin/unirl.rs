use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unirl::harness::config::{EnvKind, RunConfig};
use unirl::harness::{self, checkpoint, HarnessError};

#[derive(Parser)]
#[command(name = "unirl", version, about = "Train and evaluate a unified QP value/Q/policy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the configuration.
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every training phase of the configuration.
    Train(Common),
    /// Monte-Carlo return of a checkpoint's deterministic policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired comparison of a checkpoint against true-model MPC.
    CompareMpc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// 100 Q-learning episodes followed by 100 A2C episodes on one θ.
    SwitchDemo(Common),
}

fn load_config(c: &Common) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", c.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_run(art: &harness::RunArtifacts) {
    for p in &art.evals {
        println!(
            "episode {:>5} {:<9} return {:>12.4} ± {:.4}",
            p.episode, p.phase, p.estimate.mean, p.estimate.std_error
        );
    }
    println!("artifacts written to {}", art.dir.display());
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(c) => report_run(&harness::run(&load_config(&c)?)?),
        Command::SwitchDemo(c) => {
            let cfg = harness::switch_demo_config(&load_config(&c)?);
            report_run(&harness::run(&cfg)?);
        }
        Command::Eval { common, checkpoint: path } => {
            let cfg = load_config(&common)?;
            let theta = checkpoint::load(&path)?;
            let env = harness::make_env(&cfg);
            let states = harness::eval_states(&cfg);
            let est = harness::evaluate_policy(&env, &theta, &states, cfg.eval.t_max)?;
            println!("return {:.6} ± {:.6} over {} rollouts", est.mean, est.std_error, est.per_rollout.len());
            if cfg.env == EnvKind::Pendulum {
                let err = harness::final_angle_error(&env, &theta, &states, cfg.eval.t_max, 50)?;
                let mean = err.iter().sum::<f64>() / err.len() as f64;
                println!("final |theta| over the last 50 steps: mean {mean:.6}");
            }
        }
        Command::CompareMpc { common, checkpoint: path } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let theta = checkpoint::load(&path)?;
            let c = harness::compare_mpc(&cfg, &theta)?;
            println!("learned {:.6} ± {:.6}", c.learned.mean, c.learned.std_error);
            println!("mpc     {:.6} ± {:.6}", c.mpc.mean, c.mpc.std_error);
            println!("ratio   {:.6}", c.ratio);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
