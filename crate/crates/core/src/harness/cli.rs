//! `degen-lio` subcommands.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use crate::evaluation::{ape_rmse, associate, DEFAULT_MAX_DT};
use crate::harness::config::RunConfig;
use crate::harness::dataset::{read_dataset, read_trajectory, write_dataset, write_text};
use crate::harness::pipeline::run;
use crate::simulator::{generate, Scenario, ScenarioKind};

#[derive(Debug, Parser)]
#[command(name = "degen-lio", version, about = "Degeneracy-aware sliding-window LiDAR-inertial odometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        /// corridor, open_plane, room or cavern
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Scenario overrides: duration, rays_per_scan, range_sigma, noiseless=on
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the filter on a dataset directory; writes est.tum and report.json.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Ground truth for the APE summary.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Print the APE RMSE of an estimate against ground truth.
    Ape {
        #[arg(long)]
        gt: PathBuf,
        /// Estimated trajectory (TUM).
        est: PathBuf,
    },
}

fn scenario_from(name: &str, seed: u64, overrides: &[String]) -> Result<Scenario, String> {
    let kind: ScenarioKind = name.parse().map_err(|e| format!("{e}"))?;
    let mut s = Scenario::new(kind, seed);
    let mut noiseless = false;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {o:?}"))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |e: &dyn std::fmt::Display| format!("invalid value {v:?} for {k}: {e}");
        match k {
            "duration" => s.duration = v.parse().map_err(|e| bad(&e))?,
            "rays_per_scan" => s.rays_per_scan = v.parse().map_err(|e| bad(&e))?,
            "range_sigma" => s.range_sigma = v.parse().map_err(|e| bad(&e))?,
            "noiseless" => noiseless = matches!(v, "on" | "true" | "1"),
            _ => return Err(format!("unknown scenario keys: {k}")),
        }
    }
    if noiseless {
        s = s.noiseless();
    }
    s.validate().map_err(|e| e.to_string())?;
    Ok(s)
}

fn simulate(scenario: &str, seed: u64, out: &Path, set: &[String]) -> Result<(), String> {
    let s = scenario_from(scenario, seed, set)?;
    let data = generate(&s).map_err(|e| e.to_string())?;
    write_dataset(out, &data).map_err(|e| e.to_string())?;
    println!("wrote {} scans, {} IMU samples to {}", data.scans.len(), data.imu.len(), out.display());
    Ok(())
}

fn run_cmd(data: &Path, out: Option<&Path>, config: Option<&Path>, set: &[String], gt: Option<&Path>) -> Result<bool, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    cfg.apply_overrides(set).map_err(|e| e.to_string())?;
    let mut dataset = read_dataset(data).map_err(|e| e.to_string())?;
    dataset.ground_truth = match gt {
        Some(path) => Some(read_trajectory(path).map_err(|e| e.to_string())?),
        None => None,
    };
    let output = run(&dataset, &cfg).map_err(|e| e.to_string())?;
    let out = out.unwrap_or(data);
    write_text(&out.join("est.tum"), &output.trajectory.to_tum()).map_err(|e| e.to_string())?;
    write_text(&out.join("report.json"), &output.report.to_json()).map_err(|e| e.to_string())?;
    let summary = &output.report.summary;
    print!("{} scans, {:.2} ms/scan", summary.scans, summary.mean_ms);
    if let Some(ape) = summary.ape {
        print!(", APE {:.4} m", ape.rmse);
    }
    println!();
    if summary.aborted > 0 {
        eprintln!("{} scans aborted on a singular normal matrix", summary.aborted);
    }
    Ok(summary.aborted == 0)
}

fn ape_cmd(gt: &Path, est: &Path) -> Result<f64, String> {
    let gt = read_trajectory(gt).map_err(|e| e.to_string())?;
    let est = read_trajectory(est).map_err(|e| e.to_string())?;
    let pairs = associate(&gt, &est, DEFAULT_MAX_DT).map_err(|e| e.to_string())?;
    Ok(ape_rmse(&pairs).map_err(|e| e.to_string())?.rmse)
}

/// Execute a parsed command line.
pub fn execute(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Simulate { scenario, seed, out, set } => simulate(&scenario, seed, &out, &set).map(|_| ExitCode::SUCCESS).map_err(|e| {
            let mut cmd = Cli::command();
            let usage = cmd.find_subcommand_mut("simulate").map(|c| c.render_usage().to_string()).unwrap_or_default();
            format!("{e}\n{usage}")
        }),
        Command::Run { data, out, config, set, gt } => {
            run_cmd(&data, out.as_deref(), config.as_deref(), &set, gt.as_deref())
                .map(|clean| if clean { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Ape { gt, est } => ape_cmd(&gt, &est).map(|rmse| {
            println!("{rmse:.4}");
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
