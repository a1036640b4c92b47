use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kma::workbench::commands::{self, Task};
use kma::workbench::ExperimentConfig;

/// Koopman model averaging: learn, weight and control with linear embedding models.
#[derive(Parser, Debug)]
#[command(name = "kma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (TOML). Without it the default Duffing experiment is used.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root seed (overrides the config's data and training seeds).
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the plant and write the training dataset.
    GenData(Common),
    /// Train the base model, fit the ensemble and write the weighted model.
    Run(Common),
    /// Fit the EDMD and plain neural-network baselines on the full dataset.
    Baselines(Common),
    /// Roll a model out against the true plant.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Run an LQR or MPC closed loop on the true plant.
    Control {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Collect every metrics file under the output directory into report.csv.
    Report(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Lqr,
    Mpc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Lqr => Task::Lqr,
            TaskArg::Mpc => Task::Mpc,
        }
    }
}

fn load_config(common: &Common) -> kma::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_system("duffing"),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    let out = commands::output_dir(&cfg, common.out.as_deref());
    Ok((cfg, out))
}

fn fmt_rmse(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined (no predicted steps)".to_string(), |v| format!("{v:.6e}"))
}

fn execute(command: Command) -> kma::Result<()> {
    match command {
        Command::GenData(common) => {
            let (cfg, out) = load_config(&common)?;
            let ds = commands::gen_data(&cfg, &out)?;
            println!("wrote {} ({})", commands::dataset_path(&cfg, &out).display(), commands::describe_dataset(&ds));
        }
        Command::Run(common) => {
            let (cfg, out) = load_config(&common)?;
            let res = commands::run(&cfg, &out)?;
            println!("validation loss {:.6e}", res.outcome.train_report.final_val_loss);
            for (part, w) in res.outcome.ensemble.partitions.iter().zip(res.outcome.weights.as_slice()) {
                println!("w[{part}] = {w:.6}");
            }
            println!("weighted-model RMSE {}", fmt_rmse(res.metrics.total_rmse));
            println!("artifacts in {}", out.display());
        }
        Command::Baselines(common) => {
            let (cfg, out) = load_config(&common)?;
            let res = commands::baselines(&cfg, &out)?;
            println!("EDMD RMSE {}", fmt_rmse(res.edmd_metrics.total_rmse));
            println!("normal NN RMSE {}", fmt_rmse(res.normal_nn_metrics.total_rmse));
        }
        Command::Predict { common, model } => {
            let (cfg, out) = load_config(&common)?;
            let res = commands::predict(&cfg, &model, &out)?;
            println!("total RMSE {}", fmt_rmse(res.metrics.total_rmse));
            println!("wrote {}", res.csv.display());
        }
        Command::Control { common, model, task } => {
            let (cfg, out) = load_config(&common)?;
            let report = commands::control(&cfg, &model, task.into(), &out)?;
            for (i, r) in report.runs.iter().enumerate() {
                match r.max_tracking_error {
                    Some(e) => println!("run {i}: ‖x(T)‖ = {:.4e}, max tracking error {e:.4e}", r.metrics.final_state_norm),
                    None => println!("run {i}: ‖x(T)‖ = {:.4e}", r.metrics.final_state_norm),
                }
            }
        }
        Command::Report(common) => {
            let (_, out) = load_config(&common)?;
            let rows = commands::report(&out)?;
            println!("{} rows written to {}", rows.len(), Path::new(&out).join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
