//! Command-line runner for single attacks, parameter sweeps and federated
//! simulations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldp_recon::config::{parse_override, RunConfig};
use ldp_recon::runner::{
    run_flsim, run_single, sweep, sweep_csv, sweep_timings_csv, write_attack_outputs, write_flsim_outputs, SweepAxis,
};
use ldp_recon::Error;

#[derive(Parser, Debug)]
#[command(name = "ldp-recon", version, about = "Sample reconstruction attack laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one attack and write images, quality.csv and manifest.txt.
    Attack(Common),
    /// Repeat the attack over values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// epsilon, clip_bound, batch, units, bias_inputs or rounds.
        #[arg(long)]
        axis: String,
        /// Comma-separated values of the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Paired federated training with and without the attack.
    Flsim(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) | Error::Unseparable { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    Ok(RunConfig::parse_with(&text, &overrides)?)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Attack(common) => {
            let cfg = load(&common)?;
            let run = run_single(&cfg, cfg.seed)?;
            write_attack_outputs(&common.out, &cfg, &run)?;
            println!(
                "mean PSNR {:.2} dB (random guess {:.2} dB), {} of {} samples recovered, sigma_hat {:.6}",
                run.report.mean_psnr,
                run.random_guess_psnr,
                run.result.samples.len(),
                cfg.batch,
                run.result.sigma.sigma
            );
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = sweep(&cfg, axis, &values, common.jobs)?;
            std::fs::create_dir_all(&common.out)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
            write(&common.out.join("sweep.csv"), &sweep_csv(axis, &rows))?;
            write(&common.out.join("timings.csv"), &sweep_timings_csv(&rows))?;
            let mut manifest = cfg.to_text();
            manifest.push_str(&format!("sweep_axis = {}\nsweep_values = {}\n", axis.key(), values.join(",")));
            write(&common.out.join("manifest.txt"), &manifest)?;
            for v in &values {
                let psnr: Vec<f64> = rows.iter().filter(|r| &r.value == v).map(|r| r.psnr).collect();
                println!("{} = {v}: mean PSNR {:.2} dB", axis.key(), psnr.iter().sum::<f64>() / psnr.len() as f64);
            }
        }
        Command::Flsim(common) => {
            let cfg = load(&common)?;
            let outcome = run_flsim(&cfg, cfg.seed)?;
            write_flsim_outputs(&common.out, &cfg, &outcome)?;
            println!(
                "final accuracy {:.4} with attack, {:.4} without ({:+.2} points)",
                outcome.with_attack.final_accuracy(),
                outcome.without_attack.final_accuracy(),
                outcome.accuracy_delta_points()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
