use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mp3c::config::{preset, PresetCurve, ScenarioConfig};
use mp3c::harness::{compare, measure_impedance, run_scenario, TraceOptions};
use mp3c::opp::build_table;
use mp3c::smallsignal::{effective_gain, model_curve, ImpedanceCurve};
use mp3c::Error;

#[derive(Parser)]
#[command(
    name = "mp3c",
    version,
    about = "Pulse-pattern control impedance sweeps and models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Scenario {
    /// TOML scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Figure case study (fig5..fig9), built on top of --config.
    #[arg(long)]
    preset: Option<String>,
    /// Seed for the pattern optimizer's random starts.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a pattern table and write it to a file.
    Opp {
        #[command(flatten)]
        scenario: Scenario,
        /// Angles per quarter wave; defaults to the configured value.
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        levels: Option<usize>,
        /// Comma-separated modulation indices; an empty string gives an empty table.
        #[arg(long)]
        m_grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure the impedance by frequency sweep.
    Sweep {
        #[command(flatten)]
        scenario: Scenario,
        /// CSV file, or a directory when the preset has several curves.
        #[arg(long)]
        out: PathBuf,
        /// Also write an unperturbed steady-state trace of the first curve.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate the small-signal model on the sweep grid.
    Model {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a measured curve with a model curve.
    Compare {
        #[arg(long)]
        measured: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Normalization in ohms; defaults to the configured controller gain.
        #[arg(long)]
        norm: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Text summary; per-point deviations go next to it with a .csv extension.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } | Error::OutOfRange { .. } => 3,
        Error::NonPeriodic { .. }
        | Error::Singular { .. }
        | Error::NoCrossing { .. }
        | Error::NonIntegerWindow { .. }
        | Error::Unmeasurable { .. }
        | Error::InvalidSwitchPosition(_)
        | Error::NonPositiveStep(_) => 4,
        _ => 2,
    }
}

fn base_config(s: &Scenario) -> mp3c::Result<ScenarioConfig> {
    let mut cfg = match &s.config {
        Some(path) => ScenarioConfig::from_path(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = s.seed {
        cfg.opp.seed = seed;
    }
    Ok(cfg)
}

/// The curves a command works on, and whether measurement is impossible.
fn curves(s: &Scenario) -> mp3c::Result<(Vec<PresetCurve>, bool)> {
    let base = base_config(s)?;
    match &s.preset {
        Some(name) => {
            let p = preset(name, &base)?;
            Ok((p.curves, p.model_only))
        }
        None => Ok((
            vec![PresetCurve {
                label: "curve".into(),
                config: base,
            }],
            false,
        )),
    }
}

fn write(path: &Path, text: &str) -> mp3c::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// One file for a single curve, one file per label inside `out` otherwise.
fn write_curves(out: &Path, results: &[(String, ImpedanceCurve)]) -> mp3c::Result<()> {
    if let [(_, curve)] = results {
        return write(out, &curve.to_csv());
    }
    fs::create_dir_all(out)?;
    for (label, curve) in results {
        write(&out.join(format!("{label}.csv")), &curve.to_csv())?;
    }
    Ok(())
}

fn model_for(cfg: &ScenarioConfig) -> mp3c::Result<ImpedanceCurve> {
    model_curve(
        &cfg.frequencies(),
        &cfg.params()?,
        &cfg.controller()?,
        cfg.grid.f1,
        cfg.frame(),
        cfg.exec(),
    )
}

fn run(cli: Cli) -> mp3c::Result<()> {
    match cli.command {
        Command::Opp {
            scenario,
            d,
            levels,
            m_grid,
            out,
        } => {
            let cfg = base_config(&scenario)?;
            let d = d.unwrap_or(cfg.d());
            let levels = levels.unwrap_or(cfg.opp.levels);
            let grid = match m_grid {
                Some(s) if s.trim().is_empty() => Vec::new(),
                Some(s) => s
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Config(format!("--m-grid: `{x}`: {e}")))
                    })
                    .collect::<mp3c::Result<_>>()?,
                None => cfg.m_grid(),
            };
            let table = build_table(d, levels, &grid, &cfg.optimizer(cfg.exec()))?;
            write(&out, &table.to_text())
        }
        Command::Sweep {
            scenario,
            out,
            trace,
        } => {
            let (curves, model_only) = curves(&scenario)?;
            if model_only {
                eprintln!("no pattern table for this preset; writing the model curve only");
            }
            let mut results = Vec::with_capacity(curves.len());
            for (i, c) in curves.iter().enumerate() {
                let curve = if model_only {
                    model_for(&c.config)?
                } else {
                    let sc = c.config.scenario()?;
                    if i == 0 {
                        if let Some(path) = &trace {
                            let s = &c.config.sweep;
                            let duration =
                                (s.settle_periods + s.window_periods) as f64 / c.config.grid.f1;
                            let opts = TraceOptions {
                                sample_period: s.sample_period,
                                record_from: 0.0,
                            };
                            write(path, &run_scenario(&sc, duration, opts)?.to_csv())?;
                        }
                    }
                    measure_impedance(&c.config.sweep_config()?, &sc)?
                };
                results.push((c.label.clone(), curve));
            }
            write_curves(&out, &results)
        }
        Command::Model { scenario, out } => {
            let (curves, _) = curves(&scenario)?;
            let results = curves
                .iter()
                .map(|c| Ok((c.label.clone(), model_for(&c.config)?)))
                .collect::<mp3c::Result<Vec<_>>>()?;
            write_curves(&out, &results)
        }
        Command::Compare {
            measured,
            model,
            norm,
            config,
            out,
        } => {
            let measured = ImpedanceCurve::from_csv(&fs::read_to_string(measured)?)?;
            let model = ImpedanceCurve::from_csv(&fs::read_to_string(model)?)?;
            let norm = match norm {
                Some(n) => n,
                None => {
                    let cfg = match config {
                        Some(path) => ScenarioConfig::from_path(&path)?,
                        None => ScenarioConfig::default(),
                    };
                    effective_gain(&cfg.controller()?, cfg.params()?.lt())
                }
            };
            let report = compare(&measured, &model, norm)?;
            let csv = if out.extension().is_some_and(|e| e == "csv") {
                out.with_extension("points.csv")
            } else {
                out.with_extension("csv")
            };
            write(&out, &report.summary())?;
            write(&csv, &report.to_csv())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
