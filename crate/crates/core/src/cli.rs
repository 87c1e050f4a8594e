//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on runtime failure (after the completed
//! steps and the last valid state are on disk), 2 on usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::{
    builtin_experiments, find_experiment, refinement_study, structure_metrics, Ladder,
    RefinementAxis, RefinementReport,
};
use crate::integrators::{SchemeKind, StepOptions};
use crate::io::{execute_run, read_config, read_snapshot, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "copolymer", about = "Ternary copolymer phase-field simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write `energy.log` plus snapshots.
    Run {
        /// TOML run configuration.
        #[arg(long, conflicts_with = "experiment")]
        config: Option<PathBuf>,
        /// Built-in experiment with its desk defaults.
        #[arg(long)]
        experiment: Option<String>,
        /// Overrides the scheme of the configuration.
        #[arg(long)]
        scheme: Option<SchemeKind>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the seed of random initial data.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the full-size grid, time step and horizon.
        #[arg(long)]
        full_scale: bool,
    },
    /// Run a halving ladder and print the refinement report.
    Refine {
        #[arg(long)]
        axis: RefinementAxis,
        #[arg(long)]
        scheme: SchemeKind,
        #[arg(long, default_value = "mesh_refinement")]
        experiment: String,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// Grid size (time axis) or coarsest grid size (space axis).
        #[arg(long)]
        n: Option<usize>,
        /// Coarsest step (time axis) or fixed step (space axis).
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in experiments.
    Experiments,
    /// Print structure metrics of snapshot files.
    Metrics {
        #[arg(required = true)]
        snapshots: Vec<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownExperiment(_) | Error::InvalidParameter { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other),
        }
    }
}

fn dispatch(cmd: Command, out: &mut impl Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            experiment,
            scheme,
            out: out_dir,
            seed,
            full_scale,
        } => {
            let mut cfg = match (config, experiment) {
                (Some(path), _) => read_config(&path).map_err(|e| match e {
                    Error::Io { .. } => Failure::Usage(e.to_string()),
                    other => other.into(),
                })?,
                (None, Some(name)) => RunConfig::for_experiment(
                    &name,
                    scheme.ok_or_else(|| {
                        Failure::Usage("--scheme is required with --experiment".into())
                    })?,
                ),
                (None, None) => {
                    return Err(Failure::Usage("one of --config or --experiment is required".into()))
                }
            };
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(d) = out_dir {
                cfg.output.out_dir = d;
            }
            if seed.is_some() {
                cfg.seed = seed;
            }
            cfg.full_scale |= full_scale;
            let run = cfg.resolve()?;
            match execute_run(&run) {
                Ok(o) => {
                    writeln!(
                        out,
                        "{} steps of {} with {}; log {}; {} snapshots",
                        o.steps_done,
                        run.spec.name,
                        run.scheme,
                        o.energy_log.display(),
                        o.snapshots.len()
                    )
                    .map_err(stdout_err)?;
                    Ok(())
                }
                Err((e, o)) => {
                    eprintln!(
                        "run stopped after {} steps; completed steps are in {}",
                        o.steps_done,
                        o.energy_log.display()
                    );
                    Err(Failure::Runtime(e))
                }
            }
        }
        Command::Refine {
            axis,
            scheme,
            experiment,
            levels,
            n,
            dt,
            t_end,
            out: table_path,
        } => {
            if levels < 2 {
                return Err(Failure::Usage("--levels must be at least 2".into()));
            }
            let spec = find_experiment(&experiment)?;
            let ladder = match axis {
                RefinementAxis::Time => Ladder {
                    n: n.unwrap_or(spec.desk.n),
                    dt: dt.unwrap_or(spec.desk.dt),
                    t_end: t_end.unwrap_or(spec.desk.t_end),
                    levels,
                },
                RefinementAxis::Space => Ladder {
                    n: n.unwrap_or(8),
                    dt: dt.unwrap_or(1e-3),
                    t_end: t_end.unwrap_or(spec.desk.t_end),
                    levels,
                },
            };
            let report = refinement_study(&spec, scheme, axis, ladder, StepOptions::default())?;
            let table = format_report(&report);
            out.write_all(table.as_bytes()).map_err(stdout_err)?;
            if let Some(p) = table_path {
                write_text(&p, &table)?;
            }
            Ok(())
        }
        Command::Experiments => {
            for e in builtin_experiments() {
                writeln!(
                    out,
                    "{:<16} {:>4}^2 dt={:<8e} T={:<6} {}",
                    e.name, e.desk.n, e.desk.dt, e.desk.t_end, e.description
                )
                .map_err(stdout_err)?;
            }
            Ok(())
        }
        Command::Metrics { snapshots } => {
            writeln!(out, "file t anisotropy gradient_angle").map_err(stdout_err)?;
            for p in snapshots {
                let snap = read_snapshot(&p)?;
                let m = structure_metrics(&snap.state()?);
                let angle = m
                    .gradient_angle
                    .map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
                writeln!(out, "{} {:.16e} {:.6} {}", p.display(), snap.t, m.anisotropy, angle)
                    .map_err(stdout_err)?;
            }
            Ok(())
        }
    }
}

fn stdout_err(e: std::io::Error) -> Failure {
    Failure::Runtime(Error::io(Path::new("<stdout>"), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated refinement table. Comment lines start with `#`;
/// `nan` marks the missing error of the finest rung.
pub fn format_report(r: &RefinementReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    let mut s = format!("# axis {:?} scheme {}\n", r.axis, r.scheme).to_lowercase();
    s.push_str(&format!("# fitted_slope {}\n", opt(r.fitted_slope)));
    s.push_str(&format!("# alpha_slope {}\n", opt(r.alpha_slope)));
    s.push_str("step err_A err_B err_S err max_alpha bootstrap_alpha order\n");
    let combined = r.combined_errors();
    for (k, l) in r.levels.iter().enumerate() {
        let (e, total) = match l.errors {
            Some(e) => (e.map(|v| format!("{v:.16e}")), format!("{:.16e}", combined[k].1)),
            None => (["nan".to_string(), "nan".to_string(), "nan".to_string()], "nan".to_string()),
        };
        let order = if k >= 1 { opt(r.observed_orders.get(k - 1).copied()) } else { "nan".into() };
        s.push_str(&format!(
            "{:.16e} {} {} {} {} {:.16e} {:.16e} {}\n",
            l.step, e[0], e[1], e[2], total, l.max_alpha, l.bootstrap_alpha, order
        ));
    }
    s
}
