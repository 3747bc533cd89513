use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pnp_mc::experiments::{load_config, output_dir, run_experiment, seed_sweep, SweepParam, OUTPUT_ROOT_ENV};

/// Plug-and-play Monte Carlo experiment runner.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run { config: PathBuf },
    /// Run a validate2d experiment for several values of one parameter.
    Sweep {
        config: PathBuf,
        /// gamma, sigma_min or eps_max
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated, positive and decreasing.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Defaults to `<output dir>/sweep_<param>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(root) = &cli.output_root {
        std::env::set_var(OUTPUT_ROOT_ENV, root);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> pnp_mc::Result<()> {
    match cmd {
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!("{}: ok ({}, digest {})", config.display(), cfg.experiment.kind(), cfg.digest());
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let s = run_experiment(&cfg)?;
            for w in &s.output.warnings {
                eprintln!("warning: {w}");
            }
            for r in &s.output.records {
                println!("{} = {}", r.metric, r.value);
            }
            println!("wrote {} in {:.1}s", s.dir.display(), s.wall_clock_secs);
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = out.unwrap_or_else(|| output_dir(&cfg).join(format!("sweep_{param}")));
            let r = seed_sweep(&cfg, param, &values, Some(&dir))?;
            if r.divergences > 0 {
                eprintln!("warning: {} chains diverged", r.divergences);
            }
            println!("{param},mean_min_fi,mean_min_kl");
            for (v, fi, kl) in &r.means {
                println!("{v},{fi},{kl}");
            }
            println!("wrote {}", dir.join("sweep.csv").display());
        }
    }
    Ok(())
}
