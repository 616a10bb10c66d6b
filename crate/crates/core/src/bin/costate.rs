use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use costate::envgen::make_task;
use costate::harness::{
    evaluate_policy, rebuild_report, run_block, size_networks, table_csv, write_block, PolicyCheckpoint, RunConfig,
};
use costate::rng::{rng_from_seed, uniform_pm1};

#[derive(Parser)]
#[command(version, about = "Costate-based model-learning control benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a block of trials described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (defaults to `output_dir` in the config, then `runs/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the rollout budget.
        #[arg(long)]
        n_rolls: Option<usize>,
        /// Run trials one at a time.
        #[arg(long)]
        serial: bool,
    },
    /// Evaluate a policy checkpoint on its task.
    Eval {
        checkpoint: PathBuf,
        /// Use a fresh test set of this many states instead of the stored one.
        #[arg(long)]
        test_set_size: Option<usize>,
        /// Seed for a fresh test set and for task noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the task's noise level.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Solve network widths from parameter-count targets.
    Sizes {
        #[arg(long)]
        n_s: usize,
        #[arg(long)]
        n_a: usize,
        #[arg(long, conflicts_with = "policy_hidden")]
        n_mu: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        policy_hidden: Option<Vec<usize>>,
        #[arg(long)]
        n_est: usize,
        #[arg(long)]
        ddpg_n_est: Option<usize>,
        #[arg(long, default_value_t = 4)]
        model_layers: usize,
    },
    /// Rebuild summaries and the table from a block's exported curves.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> costate::Result<()> {
    match command {
        Command::Run { config, out, trials, n_rolls, serial } => {
            let (mut cfg, text) = RunConfig::load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(n) = n_rolls {
                cfg.n_rolls = n;
            }
            cfg.parallel &= !serial;
            cfg.validate()?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let outcome = run_block(&cfg)?;
            write_block(&dir, &outcome, &text)?;
            for rec in outcome.report.records.iter().filter(|r| r.error.is_some()) {
                eprintln!("trial {} {} failed: {}", rec.trial, rec.label, rec.error.as_deref().unwrap_or(""));
            }
            print!("{}", table_csv(&outcome.report));
            eprintln!("wrote {}", dir.display());
        }
        Command::Eval { checkpoint, test_set_size, seed, sigma } => {
            let ck = PolicyCheckpoint::load(&checkpoint)?;
            let mut task = ck.task.clone();
            if let Some(s) = sigma {
                task.noise_sigma = s;
            }
            let env = make_task(&task)?;
            let states = match test_set_size {
                Some(n) => uniform_pm1(task.n_s, n, &mut rng_from_seed(seed)),
                None => uniform_pm1(task.n_s, ck.test_set_size, &mut rng_from_seed(ck.test_set_seed)),
            };
            let cost = evaluate_policy(&ck.policy, &env, &states, &mut rng_from_seed(seed))?;
            println!("{cost}");
        }
        Command::Sizes { n_s, n_a, n_mu, policy_hidden, n_est, ddpg_n_est, model_layers } => {
            let sized = size_networks(
                n_s,
                n_a,
                policy_hidden.as_deref(),
                n_mu,
                n_est,
                ddpg_n_est.unwrap_or(n_est),
                model_layers,
            )?;
            println!("{}", serde_json::to_string_pretty(&sized)?);
        }
        Command::Report { dir } => {
            let report = rebuild_report(&dir, true)?;
            print!("{}", table_csv(&report));
        }
    }
    Ok(())
}
