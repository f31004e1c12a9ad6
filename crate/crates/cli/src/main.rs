use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subspace_bnn::experiment::{
    compare, plot_data, run_experiment, ExperimentConfig, Grid, ResultRecord, RunOptions, Stage,
};
use subspace_bnn::{Error, Result};

/// Active-subspace Bayesian neural network experiments.
#[derive(Debug, Parser)]
#[command(name = "asbnn", version)]
struct Cli {
    /// Output directory; defaults to `experiment.output` or `runs/<name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// First stage to execute; earlier stages are loaded from the output directory.
    #[arg(long, global = true, default_value = "pretrain")]
    from: Stage,
    /// Worker threads for trials and batched evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every trial of an experiment and write results.json.
    Run { config: PathBuf },
    /// Write bands.csv and curves.csv for a finished 1-D run.
    Plotdata {
        config: PathBuf,
        /// Input grid as start:end:step.
        #[arg(long)]
        grid: Grid,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Tabulate several results.json files side by side.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
}

fn out_dir(cli_out: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.experiment.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.experiment.name))
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon_pool(n)?;
    }
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bytes = std::fs::read(&config)?;
            let opts = RunOptions {
                out_dir: out_dir(cli.out.as_deref(), &cfg),
                from: cli.from,
            };
            let rec = run_experiment(&cfg, &opts, Some(&bytes))?;
            let (r, l, c) = (
                rec.aggregate.rmse,
                rec.aggregate.avg_log_lik,
                rec.aggregate.coverage95,
            );
            println!(
                "{} on {}: rmse {:.4}±{:.4}  log-lik {:.4}±{:.4}  coverage95 {:.4}±{:.4}",
                rec.method, rec.dataset, r.0, r.1, l.0, l.1, c.0, c.1
            );
            println!("wrote {}", opts.out_dir.join("results.json").display());
        }
        Command::Plotdata {
            config,
            grid,
            trial,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(cli.out.as_deref(), &cfg);
            let data = plot_data(&cfg, &dir, trial, &grid)?;
            data.write(&dir)?;
            println!("wrote {} grid rows to {}", data.bands.len(), dir.display());
        }
        Command::Compare { files } => {
            let records = files
                .iter()
                .map(|f| ResultRecord::load(f))
                .collect::<Result<Vec<_>>>()?;
            let table = compare(&records)?;
            print!("{}", table.to_text());
            if let Some(dir) = cli.out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("comparison.csv"), table.to_csv()?)?;
                std::fs::write(dir.join("comparison.txt"), table.to_text())?;
            }
        }
    }
    Ok(())
}

fn rayon_pool(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
