//! Command-line harness: validate problems, run the deterministic oracle,
//! single filter runs, full experiment bundles, and closed-loop rollouts.
//!
//! Exit codes: 0 success, 1 usage/config/validation error, 2 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dual_enkf::bench::{run_experiment, BenchError, ExperimentSpec};
use dual_enkf::control::{closed_loop_rollout, ControlLaw, GainSchedule, PrimalSchedule};
use dual_enkf::enkf::run_offline;
use dual_enkf::model::Horizon;
use dual_enkf::riccati::{solve_are, solve_dre, solve_dual_dre, RiccatiTrajectory};
use dual_enkf::rng;

#[derive(Parser)]
#[command(
    name = "denkf",
    version,
    about = "Learn linear-quadratic controllers from a simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's, or "out").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; the DENKF_THREADS environment variable overrides the
    /// default, this flag overrides both.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output format for series files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configured problem against the standing assumptions.
    Validate { config: PathBuf },
    /// Solve the deterministic Riccati flows (oracle only).
    Riccati { config: PathBuf },
    /// One offline filter run; writes the moment trajectories and a snapshot.
    Enkf { config: PathBuf },
    /// Run a full experiment bundle.
    Experiment { config: PathBuf },
    /// Closed-loop rollout under the controller learned by one filter run.
    Rollout { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("DENKF_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(threads) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }

    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, BenchError> {
    match &cli.command {
        Command::Validate { config } => {
            let mut spec = ExperimentSpec::from_file(config)?;
            apply_overrides(&mut spec, cli);
            let problem = spec.build_problem_raw()?;
            let report = problem.validate();
            print!("{report}");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Riccati { config } => {
            let mut spec = ExperimentSpec::from_file(config)?;
            apply_overrides(&mut spec, cli);
            let problem = spec.build_problem()?;
            let out_dir = out_dir(&spec, cli);
            std::fs::create_dir_all(&out_dir)?;
            let tau_ref = spec.enkf.tau / 10.0;

            if let Horizon::Finite(t) = problem.horizon() {
                let primal = solve_dre(&problem, t, tau_ref)?;
                let dual = solve_dual_dre(&problem, t, tau_ref)?;
                write_trajectory(&out_dir, "dre", &primal, cli.format)?;
                write_trajectory(&out_dir, "dual_dre", &dual, cli.format)?;
            }
            let are = solve_are(&problem, 1e-9, tau_ref)?;
            let s_bar = are.s_bar(&problem)?;
            let doc = serde_json::json!({
                "schema_version": 1,
                "p_bar": matrix_rows(&are.p_bar),
                "s_bar": matrix_rows(&s_bar),
                "residual": are.residual,
                "horizon_used": are.horizon_used,
            });
            std::fs::write(
                out_dir.join("are.json"),
                serde_json::to_vec_pretty(&doc).unwrap(),
            )?;
            println!(
                "oracle done: residual {:.3e} at horizon {}",
                are.residual, are.horizon_used
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Enkf { config } => {
            let mut spec = ExperimentSpec::from_file(config)?;
            apply_overrides(&mut spec, cli);
            let problem = spec.build_problem()?;
            let out_dir = out_dir(&spec, cli);
            std::fs::create_dir_all(&out_dir)?;
            let output = run_offline(&problem, &spec.enkf_config())?;
            match cli.format {
                Format::Csv => {
                    let mut buf = Vec::new();
                    output.write_csv(&mut buf)?;
                    std::fs::write(out_dir.join("enkf_run.csv"), buf)?;
                }
                Format::Json => {
                    let doc = enkf_json(&output);
                    std::fs::write(
                        out_dir.join("enkf_run.json"),
                        serde_json::to_vec_pretty(&doc).unwrap(),
                    )?;
                }
            }
            let mut buf = Vec::new();
            output.write_snapshot(&mut buf)?;
            std::fs::write(out_dir.join("enkf_snapshot.bin"), buf)?;
            println!(
                "filter run done: {} steps, {} dynamics inversions",
                output.len() - 1,
                output.dynamics_inversions()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment { config } => {
            let mut spec = ExperimentSpec::from_file(config)?;
            apply_overrides(&mut spec, cli);
            let bundle = run_experiment(&spec)?;
            println!(
                "experiment {} -> {} ({} files, status {:?})",
                bundle.kind.name(),
                bundle.out_dir.display(),
                bundle.files.len(),
                bundle.status
            );
            for e in &bundle.errors {
                eprintln!("run error: {e}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Rollout { config } => {
            let mut spec = ExperimentSpec::from_file(config)?;
            apply_overrides(&mut spec, cli);
            let problem = spec.build_problem()?;
            let out_dir = out_dir(&spec, cli);
            std::fs::create_dir_all(&out_dir)?;
            let cfg = spec.enkf_config();
            let output = run_offline(&problem, &cfg)?;

            let d = problem.dim_state();
            let x0 = match &spec.rollout.x0 {
                dual_enkf::bench::X0Section::Named(name) if name == "gaussian" => {
                    let mut stream = rng::substream(cfg.seed, 1, 0, rng::Channel::Rollout);
                    let mut buf = vec![0.0f64; d];
                    rng::fill_standard_normal(&mut stream, &mut buf);
                    nalgebra::DVector::from_column_slice(&buf)
                }
                dual_enkf::bench::X0Section::Named(other) => {
                    return Err(BenchError::Config(format!("unknown x0 spec '{other}'")));
                }
                dual_enkf::bench::X0Section::Values(values) => {
                    if values.len() != d {
                        return Err(BenchError::Config(format!(
                            "x0 has {} entries for a {d}-dimensional state",
                            values.len()
                        )));
                    }
                    nalgebra::DVector::from_column_slice(values)
                }
            };

            let result = match spec.rollout.law.as_str() {
                "gain" => {
                    let gains = GainSchedule::from_enkf(&output, &problem)?;
                    closed_loop_rollout(
                        &problem,
                        &ControlLaw::Gains(&gains),
                        &x0,
                        spec.rollout.t,
                        spec.rollout.tau,
                        cfg.seed,
                    )?
                }
                "probe" => {
                    let primals = PrimalSchedule::from_enkf(&output)?;
                    closed_loop_rollout(
                        &problem,
                        &ControlLaw::Probe {
                            primals: &primals,
                            config: spec.online_config(),
                        },
                        &x0,
                        spec.rollout.t,
                        spec.rollout.tau,
                        cfg.seed,
                    )?
                }
                other => return Err(BenchError::Config(format!("unknown rollout law '{other}'"))),
            };
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            std::fs::write(out_dir.join("rollout.csv"), buf)?;
            println!(
                "rollout done: terminal energy {:.3e} (initial {:.3e})",
                result.energy.last().unwrap(),
                result.energy[0]
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn apply_overrides(spec: &mut ExperimentSpec, cli: &Cli) {
    if let Some(seed) = cli.seed {
        spec.enkf.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        if let Some(section) = spec.experiment.as_mut() {
            section.out_dir = dir.display().to_string();
        }
    }
}

fn out_dir(spec: &ExperimentSpec, cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| {
        spec.experiment
            .as_ref()
            .map(|e| PathBuf::from(&e.out_dir))
            .unwrap_or_else(|| PathBuf::from("out"))
    })
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn write_trajectory(
    out_dir: &Path,
    name: &str,
    traj: &RiccatiTrajectory,
    format: Format,
) -> Result<(), BenchError> {
    match format {
        Format::Csv => {
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            std::fs::write(out_dir.join(format!("{name}.csv")), buf)?;
        }
        Format::Json => {
            let doc = serde_json::json!({
                "schema_version": 1,
                "times": traj.times(),
                "values": traj.values().iter().map(matrix_rows).collect::<Vec<_>>(),
            });
            std::fs::write(
                out_dir.join(format!("{name}.json")),
                serde_json::to_vec_pretty(&doc).unwrap(),
            )?;
        }
    }
    Ok(())
}

fn enkf_json(output: &dual_enkf::enkf::EnkfOutput) -> serde_json::Value {
    serde_json::json!({
        "schema_version": 1,
        "times": output.times(),
        "means": output.means().iter().map(|m| m.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        "covariances": output.covariances().iter().map(matrix_rows).collect::<Vec<_>>(),
        "primals": output.primals().iter().map(|p| p.as_ref().map(matrix_rows)).collect::<Vec<_>>(),
        "dynamics_inversions": output.dynamics_inversions(),
    })
}
