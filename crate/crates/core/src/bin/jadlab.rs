use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jadlab::harness::{compare_runs, export_timespace, run_scenario, RunMode, RunOptions};
use jadlab::scenario::{load_scenario, Preset};
use jadlab::Error;

#[derive(Parser)]
#[command(name = "jadlab", version, about = "Jam-absorption driving experiments on a freeway sag")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    NoJad,
    JadNoDa,
    JadDa,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Baseline,
    Ue,
    Oe,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its bundle.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Add seeded measurement noise to detector samples.
        #[arg(long)]
        noise: bool,
        /// Override the estimator's initial fundamental-diagram parameters.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Benefit of run B over reference run A (ΔATT = ATT_A − ATT_B).
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize a run's trajectories into a mean-speed grid.
    ExportTimespace {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        dt: f64,
        #[arg(long, default_value_t = 100.0)]
        dp: f64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Simulate {
            scenario,
            mode,
            seed,
            out,
            noise,
            preset,
        } => {
            let mut scenario = load_scenario(&scenario)?;
            if let Some(p) = preset {
                scenario = scenario.with_preset(match p {
                    PresetArg::Baseline => Preset::Baseline,
                    PresetArg::Ue => Preset::Ue,
                    PresetArg::Oe => Preset::Oe,
                });
            }
            let mode = match mode {
                Mode::NoJad => RunMode::NoJad,
                Mode::JadNoDa => RunMode::JadNoDa,
                Mode::JadDa => RunMode::JadDa,
            };
            let summary = run_scenario(&scenario, RunOptions { mode, seed, noise }, &out)?;
            let m = &summary.metrics;
            println!(
                "{} {}: ATT {:.2} s, AFC {:.2} ml over {} vehicles; JAD activated at {}",
                m.key.scenario,
                m.key.mode,
                m.att,
                m.afc,
                m.vehicle_count,
                summary
                    .activated_at
                    .map_or_else(|| "never".to_string(), |t| format!("{t:.0} s")),
            );
        }
        Cmd::Compare { a, b, out } => {
            let report = compare_runs(&a, &b)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "ΔATT {:.2} s, ΔAFC {:.2} ml, deterioration: {}",
                report.delta_att.unwrap_or(f64::NAN),
                report.delta_afc.unwrap_or(f64::NAN),
                report.deterioration_flag.unwrap_or(false)
            );
        }
        Cmd::ExportTimespace { run, dt, dp } => {
            let grid = export_timespace(&run, dt, dp)?;
            println!("wrote {}x{} grid to {}", grid.nt, grid.np, run.join("timespace.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
