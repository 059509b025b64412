use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use yodar::pipeline;

/// Camera/radar late fusion for vehicle detection on synthetic night scenes.
#[derive(Parser)]
#[command(name = "yodar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val and test worlds and a manifest.
    GenData(Common),
    /// Train the radar network on the train world.
    TrainRadar(Common),
    /// Build the meta-classifier training set and fit the ensemble.
    TrainFusion(Common),
    /// Evaluate radar-only, camera-only and fused detectors on the test world.
    Eval(Common),
    /// Write an index of the run with the headline tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run config. Defaults to the run directory's saved config.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Run seed, overriding the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use yodar::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => 1,
        Some(E::Numeric(_)) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn set_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("YODAR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        yodar::Error::Config(format!(
            "YODAR_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    set_threads()?;
    match cli.command {
        Command::GenData(a) => {
            let cfg = pipeline::resolve_config(a.config.as_deref(), &a.out, a.seed)?;
            let m = pipeline::gen_data(&cfg, &a.out)?;
            for s in &m.splits {
                println!(
                    "{:<5} {:5} scenes  night {:5.1}%  vehicles {:6}  candidates {:6}",
                    s.split,
                    s.n_scenes,
                    100.0 * s.night_fraction,
                    s.n_vehicles,
                    s.n_candidates
                );
            }
        }
        Command::TrainRadar(a) => {
            let cfg = pipeline::resolve_config(a.config.as_deref(), &a.out, a.seed)?;
            let (_, history) = pipeline::train_radar(&cfg, &a.out, |e| {
                eprintln!(
                    "epoch {:3}  lr {:.0e}  loss {:.5}",
                    e.epoch, e.learning_rate, e.loss
                );
            })?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs, final loss {:.5}",
                    history.len(),
                    last.loss
                );
            }
        }
        Command::TrainFusion(a) => {
            let cfg = pipeline::resolve_config(a.config.as_deref(), &a.out, a.seed)?;
            let e = pipeline::train_fusion(&cfg, &a.out)?;
            println!("fitted {} trees", e.trees.len());
        }
        Command::Eval(a) => {
            let cfg = pipeline::resolve_config(a.config.as_deref(), &a.out, a.seed)?;
            let outcome = pipeline::eval(&cfg, &a.out)?;
            print!("{}", yodar::report::summary_text(&outcome.summaries));
        }
        Command::Report(a) => {
            pipeline::report(&a.out)?;
            println!("{}", a.out.join("report").join("index.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
