//! Experiment orchestration: oracle solves, ensemble sweeps, metrics, and
//! plot-ready data files.
//!
//! Runs fan out over `(variant, particle count, seed)` tuples with one
//! derived seed per tuple, so results do not depend on the worker count; all
//! file writes then go through a single writer.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{CostVariant, ExperimentKind, ExperimentSection, ExperimentSpec, X0Section};
use super::report::{BundleWriter, PhaseTimings, ReportBundle};
use super::{gen_random_canonical, BenchError, ProblemSection};
use crate::control::{
    closed_loop_rollout, gain_from_p, probe_control, ControlLaw, GainSchedule, OnlineConfig,
    PrimalSchedule,
};
use crate::enkf::{run_offline, EnkfConfig};
use crate::linalg;
use crate::metrics::{
    fit_decay_rate, fit_scaling, pre_plateau_window, summarize, ErrorSeries, NormKind,
    ScalingPoint, ScalingReport,
};
use crate::model::LqProblem;
use crate::riccati::{solve_are, solve_dre, solve_dual_dre};
use crate::rng::{self, Channel};

/// Tolerance for the oracle's algebraic solves inside experiments.
const ORACLE_TOL: f64 = 1e-9;

fn chain_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| rng::derive_seed(acc, p))
}

fn variant_problem(base: &LqProblem, variant: &CostVariant) -> Result<LqProblem, BenchError> {
    let p = base.clone().map_cost_kind(variant.kind);
    let report = p.validate();
    if !report.passed() {
        let lines: Vec<String> = report
            .failures()
            .map(|c| format!("{} (margin {:+.3e})", c.name, c.margin))
            .collect();
        return Err(BenchError::Validation(format!(
            "variant {}: {}",
            variant.label(),
            lines.join("; ")
        )));
    }
    Ok(p)
}

/// Orchestrate one experiment and persist its bundle.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ReportBundle, BenchError> {
    let section = spec
        .experiment
        .clone()
        .ok_or_else(|| BenchError::Config("missing [experiment] section".into()))?;
    let mut timings = PhaseTimings::default();
    let (summary, files, errors) = match section.kind {
        ExperimentKind::ConvergencePlot => {
            let out = convergence_plot(spec, &section, &mut timings)?;
            (
                serde_json::to_value(&out.0).expect("serializable"),
                out.1,
                out.2,
            )
        }
        ExperimentKind::ScalingSweep => {
            let out = scaling_sweep(spec, &section, &mut timings)?;
            (
                serde_json::to_value(&out.0).expect("serializable"),
                out.1,
                out.2,
            )
        }
        ExperimentKind::Stabilization => {
            let out = stabilization(spec, &section, &mut timings)?;
            (
                serde_json::to_value(&out.0).expect("serializable"),
                out.1,
                out.2,
            )
        }
        ExperimentKind::ClosedLoopEnergy => {
            let out = closed_loop_energy(spec, &section, &mut timings)?;
            (
                serde_json::to_value(&out.0).expect("serializable"),
                out.1,
                out.2,
            )
        }
        ExperimentKind::GainProbe => {
            let out = gain_probe(spec, &section, &mut timings)?;
            (
                serde_json::to_value(&out.0).expect("serializable"),
                out.1,
                out.2,
            )
        }
    };

    let io_start = Instant::now();
    let mut writer = BundleWriter::new(std::path::Path::new(&section.out_dir))?;
    for (name, bytes) in &files {
        writer.write(name, bytes)?;
    }
    timings.io_ms = io_start.elapsed().as_millis();
    writer.finish(section.kind, spec, summary, timings, errors)
}

type Produced<S> = (S, Vec<(String, Vec<u8>)>, Vec<String>);

// ---------------------------------------------------------------------------
// Convergence plot: filter trajectory vs the deterministic flows.

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceVariant {
    pub label: String,
    /// `‖P_0^(N) − P̄‖_F / ‖P̄‖_F`.
    pub final_rel_error: f64,
    /// Fitted decay rate of the filter error over its pre-plateau window.
    pub enkf_rate: f64,
    /// Fitted decay rate of the deterministic dual flow toward stationarity.
    pub dual_rate: f64,
    pub enkf_window: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSummary {
    pub variants: Vec<ConvergenceVariant>,
}

pub fn convergence_plot(
    spec: &ExperimentSpec,
    _section: &ExperimentSection,
    timings: &mut PhaseTimings,
) -> Result<Produced<ConvergenceSummary>, BenchError> {
    let base = spec.build_problem()?;
    let variants = spec.variants()?;
    let cfg = spec.enkf_config();
    let tau_ref = cfg.tau / 10.0;
    let mut files = Vec::new();
    let mut out = Vec::new();

    for (vi, variant) in variants.iter().enumerate() {
        let problem = variant_problem(&base, variant)?;

        let oracle_start = Instant::now();
        let primal = solve_dre(&problem, cfg.horizon, tau_ref)?;
        let dual = solve_dual_dre(&problem, cfg.horizon, tau_ref)?;
        let are = solve_are(&problem, ORACLE_TOL, tau_ref)?;
        timings.oracle_ms += oracle_start.elapsed().as_millis();

        let ensemble_start = Instant::now();
        let run_cfg = EnkfConfig {
            seed: chain_seed(cfg.seed, &[vi as u64]),
            ..cfg.clone()
        };
        let output = run_offline(&problem, &run_cfg)?;
        timings.ensemble_ms += ensemble_start.elapsed().as_millis();

        let metrics_start = Instant::now();
        let d = problem.dim_state();
        let mut csv = String::new();
        writeln!(csv, "t,i,j,p_enkf,p_dre,p_are").unwrap();
        for k in 0..output.len() {
            let t = output.times()[k];
            let p_ref = primal.at_index(k * 10);
            for i in 0..d {
                for j in 0..d {
                    let enkf_cell = match output.primal_at(k) {
                        Some(p) => format!("{}", p[(i, j)]),
                        None => String::new(),
                    };
                    writeln!(
                        csv,
                        "{t},{i},{j},{enkf_cell},{},{}",
                        p_ref[(i, j)],
                        are.p_bar[(i, j)]
                    )
                    .unwrap();
                }
            }
        }
        files.push((
            format!("convergence_{}.csv", variant.label()),
            csv.into_bytes(),
        ));

        // Error series of the recovered primal against the stationary matrix.
        let defined: Vec<(f64, &DMatrix<f64>)> = (0..output.len())
            .filter_map(|k| output.primal_at(k).map(|p| (output.times()[k], p)))
            .collect();
        let series = ErrorSeries {
            times: defined.iter().map(|(t, _)| *t).collect(),
            values: defined
                .iter()
                .map(|(_, p)| (*p - &are.p_bar).norm())
                .collect(),
            norm: NormKind::Frobenius,
        };
        let window = pre_plateau_window(&series, cfg.horizon, 0.15, 1.5);
        let enkf_fit = fit_decay_rate(&series, cfg.horizon, false, window)?;

        let s_bar = are.s_bar(&problem)?;
        let dual_series = ErrorSeries::against_constant(
            dual.times(),
            dual.values(),
            &s_bar,
            NormKind::Frobenius,
        )?;
        let dual_fit = fit_decay_rate(&dual_series, cfg.horizon, false, None)?;

        let final_rel_error = match output.primal_at(0) {
            Some(p0) => (p0 - &are.p_bar).norm() / are.p_bar.norm(),
            None => f64::NAN,
        };
        timings.metrics_ms += metrics_start.elapsed().as_millis();

        out.push(ConvergenceVariant {
            label: variant.label(),
            final_rel_error,
            enkf_rate: enkf_fit.rate,
            dual_rate: dual_fit.rate,
            enkf_window: enkf_fit.window,
        });
    }
    Ok((ConvergenceSummary { variants: out }, files, Vec::new()))
}

// ---------------------------------------------------------------------------
// Scaling sweep: MSE of the stationary estimates against particle count.

#[derive(Debug, Clone, Serialize)]
pub struct ScalingVariant {
    pub label: String,
    pub dual_report: ScalingReport,
    pub primal_report: ScalingReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingSummary {
    pub variants: Vec<ScalingVariant>,
}

pub fn scaling_sweep(
    spec: &ExperimentSpec,
    section: &ExperimentSection,
    timings: &mut PhaseTimings,
) -> Result<Produced<ScalingSummary>, BenchError> {
    if section.n_sweep.len() < 3 {
        return Err(BenchError::Config(
            "scaling_sweep needs n_sweep with >= 3 values".into(),
        ));
    }
    if section.runs < 2 {
        return Err(BenchError::Config("scaling_sweep needs runs >= 2".into()));
    }
    let base = spec.build_problem()?;
    let variants = spec.variants()?;
    let cfg = spec.enkf_config();
    let mut files = Vec::new();
    let mut errors = Vec::new();
    let mut out = Vec::new();

    for (vi, variant) in variants.iter().enumerate() {
        let problem = variant_problem(&base, variant)?;
        let oracle_start = Instant::now();
        let are = solve_are(&problem, ORACLE_TOL, cfg.tau / 10.0)?;
        let s_bar = are.s_bar(&problem)?;
        timings.oracle_ms += oracle_start.elapsed().as_millis();
        let s_norm_sq = s_bar.norm_squared();
        let p_norm_sq = are.p_bar.norm_squared();

        let mut dual_points = Vec::new();
        let mut primal_points = Vec::new();
        for &n in &section.n_sweep {
            let ensemble_start = Instant::now();
            let results: Vec<Result<(f64, f64), String>> = (0..section.runs)
                .into_par_iter()
                .map(|run| {
                    let run_cfg = EnkfConfig {
                        n_particles: n,
                        seed: chain_seed(cfg.seed, &[vi as u64, n as u64, run as u64]),
                        ..cfg.clone()
                    };
                    let output = run_offline(&problem, &run_cfg).map_err(|e| e.to_string())?;
                    let s_err = (output.covariance_at(0) - &s_bar).norm_squared() / s_norm_sq;
                    let p0 = output
                        .p_bar()
                        .ok_or_else(|| "singular covariance at t=0".to_string())?;
                    let p_err = (p0 - &are.p_bar).norm_squared() / p_norm_sq;
                    Ok((s_err, p_err))
                })
                .collect();
            timings.ensemble_ms += ensemble_start.elapsed().as_millis();

            let mut s_errs = Vec::new();
            let mut p_errs = Vec::new();
            let mut csv = String::new();
            writeln!(csv, "run,sq_rel_err_s,sq_rel_err_p").unwrap();
            for (run, res) in results.iter().enumerate() {
                match res {
                    Ok((s, p)) => {
                        writeln!(csv, "{run},{s},{p}").unwrap();
                        s_errs.push(*s);
                        p_errs.push(*p);
                    }
                    Err(e) => errors.push(format!("{} n={n} run={run}: {e}", variant.label())),
                }
            }
            files.push((
                format!("scaling_{}_n{n}.csv", variant.label()),
                csv.into_bytes(),
            ));
            if s_errs.len() >= 2 {
                let s_sum = summarize(&s_errs);
                let p_sum = summarize(&p_errs);
                dual_points.push(ScalingPoint {
                    n: n as f64,
                    mse: s_sum.mse,
                    std_error: s_sum.std_error,
                });
                primal_points.push(ScalingPoint {
                    n: n as f64,
                    mse: p_sum.mse,
                    std_error: p_sum.std_error,
                });
            }
        }

        let metrics_start = Instant::now();
        let dual_report = fit_scaling(&dual_points)?;
        let primal_report = fit_scaling(&primal_points)?;
        timings.metrics_ms += metrics_start.elapsed().as_millis();
        out.push(ScalingVariant {
            label: variant.label(),
            dual_report,
            primal_report,
        });
    }
    Ok((ScalingSummary { variants: out }, files, errors))
}

// ---------------------------------------------------------------------------
// Stabilization: learned stationary gains on unstable random plants.

#[derive(Debug, Clone, Serialize)]
pub struct StabilizationVariant {
    pub label: String,
    pub total: usize,
    pub stabilized: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilizationSummary {
    pub variants: Vec<StabilizationVariant>,
    /// System seeds that had at least one unstable open-loop eigenvalue.
    pub system_seeds: Vec<u64>,
}

pub fn stabilization(
    spec: &ExperimentSpec,
    section: &ExperimentSection,
    timings: &mut PhaseTimings,
) -> Result<Produced<StabilizationSummary>, BenchError> {
    let ProblemSection::RandomCanonical {
        dim,
        system_seed,
        sigma_scale,
    } = &spec.problem
    else {
        return Err(BenchError::Config(
            "stabilization experiment needs the random_canonical generator".into(),
        ));
    };
    let variants = spec.variants()?;
    let cfg = spec.enkf_config();

    // Filter system seeds to plants with at least one unstable pole.
    let mut candidates = Vec::new();
    let mut probe = *system_seed;
    while candidates.len() < section.runs && probe < system_seed + 100 * section.runs as u64 + 100 {
        let p = gen_random_canonical(*dim, probe, *sigma_scale);
        if !crate::metrics::spectrum_of(p.dynamics().a()).hurwitz {
            candidates.push(probe);
        }
        probe += 1;
    }
    if candidates.len() < section.runs {
        return Err(BenchError::Config(format!(
            "found only {} unstable plants in the scanned seed range",
            candidates.len()
        )));
    }

    let mut files = Vec::new();
    let mut errors = Vec::new();
    let mut out = Vec::new();
    // (system seed, open-loop poles, closed-loop poles, stabilized).
    type PlantPoles = (u64, Vec<(f64, f64)>, Vec<(f64, f64)>, bool);
    for (vi, variant) in variants.iter().enumerate() {
        let ensemble_start = Instant::now();
        let results: Vec<Result<PlantPoles, String>> = candidates
            .par_iter()
            .map(|&sys_seed| {
                let problem =
                    variant_problem(&gen_random_canonical(*dim, sys_seed, *sigma_scale), variant)
                        .map_err(|e| e.to_string())?;
                let run_cfg = EnkfConfig {
                    seed: chain_seed(cfg.seed, &[vi as u64, sys_seed]),
                    ..cfg.clone()
                };
                let output = run_offline(&problem, &run_cfg).map_err(|e| e.to_string())?;
                let p_bar = output
                    .p_bar()
                    .ok_or_else(|| "singular covariance".to_string())?;
                let gain = gain_from_p(p_bar, &problem).map_err(|e| e.to_string())?;
                let open = crate::metrics::spectrum_of(problem.dynamics().a());
                let closed = crate::metrics::closed_loop_spectrum(&problem, &gain);
                Ok((
                    sys_seed,
                    open.eigenvalues,
                    closed.eigenvalues,
                    closed.hurwitz,
                ))
            })
            .collect();
        timings.ensemble_ms += ensemble_start.elapsed().as_millis();

        let mut csv = String::new();
        writeln!(csv, "system_seed,loop,idx,re,im").unwrap();
        let mut stabilized = 0usize;
        let mut total = 0usize;
        for res in &results {
            match res {
                Ok((sys_seed, open, closed, hurwitz)) => {
                    total += 1;
                    if *hurwitz {
                        stabilized += 1;
                    }
                    for (idx, (re, im)) in open.iter().enumerate() {
                        writeln!(csv, "{sys_seed},open,{idx},{re},{im}").unwrap();
                    }
                    for (idx, (re, im)) in closed.iter().enumerate() {
                        writeln!(csv, "{sys_seed},closed,{idx},{re},{im}").unwrap();
                    }
                }
                Err(e) => errors.push(format!("{}: {e}", variant.label())),
            }
        }
        files.push((
            format!("stabilization_{}.csv", variant.label()),
            csv.into_bytes(),
        ));
        out.push(StabilizationVariant {
            label: variant.label(),
            total,
            stabilized,
            fraction: stabilized as f64 / total.max(1) as f64,
        });
    }
    Ok((
        StabilizationSummary {
            variants: out,
            system_seeds: candidates,
        },
        files,
        errors,
    ))
}

// ---------------------------------------------------------------------------
// Closed-loop energy: learned controllers driving the true system.

#[derive(Debug, Clone, Serialize)]
pub struct EnergyVariant {
    pub label: String,
    pub runs_ok: usize,
    pub initial_mean_energy: f64,
    pub terminal_mean_energy: f64,
    pub terminal_over_initial: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergySummary {
    pub variants: Vec<EnergyVariant>,
}

pub fn closed_loop_energy(
    spec: &ExperimentSpec,
    section: &ExperimentSection,
    timings: &mut PhaseTimings,
) -> Result<Produced<EnergySummary>, BenchError> {
    let base = spec.build_problem()?;
    let variants = spec.variants()?;
    let cfg = spec.enkf_config();
    let roll = &spec.rollout;
    if (roll.tau - cfg.tau).abs() > 1e-12 {
        return Err(BenchError::Config(
            "closed_loop_energy needs matching enkf and rollout steps".into(),
        ));
    }
    if roll.t > cfg.horizon + 1e-9 {
        return Err(BenchError::Config(
            "rollout horizon exceeds the filter horizon".into(),
        ));
    }
    let use_probe = match roll.law.as_str() {
        "gain" => false,
        "probe" => true,
        other => return Err(BenchError::Config(format!("unknown rollout law '{other}'"))),
    };
    let online = spec.online_config();
    let steps = (roll.t / roll.tau).round() as usize;
    let d = base.dim_state();

    let mut files = Vec::new();
    let mut errors = Vec::new();
    let mut out = Vec::new();
    for (vi, variant) in variants.iter().enumerate() {
        let problem = variant_problem(&base, variant)?;
        let ensemble_start = Instant::now();
        let results: Vec<Result<Vec<f64>, String>> = (0..section.runs)
            .into_par_iter()
            .map(|run| {
                let run_seed = chain_seed(cfg.seed, &[vi as u64, run as u64]);
                let run_cfg = EnkfConfig {
                    seed: run_seed,
                    ..cfg.clone()
                };
                let output = run_offline(&problem, &run_cfg).map_err(|e| e.to_string())?;
                let x0 = match &roll.x0 {
                    X0Section::Named(name) if name == "gaussian" => {
                        let mut stream = rng::substream(run_seed, 1, 0, Channel::Rollout);
                        let mut buf = vec![0.0f64; d];
                        rng::fill_standard_normal(&mut stream, &mut buf);
                        DVector::from_column_slice(&buf)
                    }
                    X0Section::Named(other) => {
                        return Err(format!("unknown x0 spec '{other}'"));
                    }
                    X0Section::Values(values) => {
                        if values.len() != d {
                            return Err(format!(
                                "x0 has {} entries for a {d}-dimensional state",
                                values.len()
                            ));
                        }
                        DVector::from_column_slice(values)
                    }
                };
                let rollout = if use_probe {
                    let primals = PrimalSchedule::from_enkf(&output).map_err(|e| e.to_string())?;
                    closed_loop_rollout(
                        &problem,
                        &ControlLaw::Probe {
                            primals: &primals,
                            config: online,
                        },
                        &x0,
                        roll.t,
                        roll.tau,
                        run_seed,
                    )
                } else {
                    let gains =
                        GainSchedule::from_enkf(&output, &problem).map_err(|e| e.to_string())?;
                    closed_loop_rollout(
                        &problem,
                        &ControlLaw::Gains(&gains),
                        &x0,
                        roll.t,
                        roll.tau,
                        run_seed,
                    )
                }
                .map_err(|e| e.to_string())?;
                Ok(rollout.energy)
            })
            .collect();
        timings.ensemble_ms += ensemble_start.elapsed().as_millis();

        let metrics_start = Instant::now();
        let ok: Vec<&Vec<f64>> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        for (run, res) in results.iter().enumerate() {
            if let Err(e) = res {
                errors.push(format!("{} run={run}: {e}", variant.label()));
            }
        }
        if ok.is_empty() {
            return Err(BenchError::Validation(format!(
                "no successful rollouts for variant {}",
                variant.label()
            )));
        }
        let mut csv = String::new();
        writeln!(csv, "t,mean_energy,std_error").unwrap();
        let mut means = vec![0.0f64; steps + 1];
        for k in 0..=steps {
            let sample: Vec<f64> = ok.iter().map(|e| e[k]).collect();
            let s = summarize(&sample);
            means[k] = s.mse;
            writeln!(csv, "{},{},{}", k as f64 * roll.tau, s.mse, s.std_error).unwrap();
        }
        timings.metrics_ms += metrics_start.elapsed().as_millis();
        files.push((format!("energy_{}.csv", variant.label()), csv.into_bytes()));
        out.push(EnergyVariant {
            label: variant.label(),
            runs_ok: ok.len(),
            initial_mean_energy: means[0],
            terminal_mean_energy: means[steps],
            terminal_over_initial: means[steps] / means[0],
        });
    }
    Ok((EnergySummary { variants: out }, files, errors))
}

// ---------------------------------------------------------------------------
// Gain probe: simulator-only control extraction and its error scaling.

#[derive(Debug, Clone, Serialize)]
pub struct GainProbePoint {
    pub evals: usize,
    pub mse: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GainProbeSweep {
    pub n_particles: usize,
    pub points: Vec<GainProbePoint>,
    /// Log-log slope of MSE against evaluation count before the floor.
    pub early_slope: f64,
    /// MSE at the largest evaluation count: the particle-limited floor.
    pub floor: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GainProbeSummary {
    /// Largest probe-vs-gain error over noise-free spot checks.
    pub exactness_max_err: f64,
    pub sweeps: Vec<GainProbeSweep>,
    /// `floor(n_i) / floor(n_{i+1})` for consecutive sweep sizes.
    pub floor_ratios: Vec<f64>,
}

pub fn gain_probe(
    spec: &ExperimentSpec,
    section: &ExperimentSection,
    timings: &mut PhaseTimings,
) -> Result<Produced<GainProbeSummary>, BenchError> {
    if section.n_sweep.is_empty() || section.n_e_sweep.is_empty() {
        return Err(BenchError::Config(
            "gain_probe needs n_sweep and n_e_sweep".into(),
        ));
    }
    if section.runs < 2 {
        return Err(BenchError::Config("gain_probe needs runs >= 2".into()));
    }
    let problem = spec.build_problem()?;
    let cfg = spec.enkf_config();
    let online = spec.online_config();
    let d = problem.dim_state();

    let oracle_start = Instant::now();
    let are = solve_are(&problem, ORACLE_TOL, cfg.tau / 10.0)?;
    let k_opt = gain_from_p(&are.p_bar, &problem)?;
    timings.oracle_ms += oracle_start.elapsed().as_millis();

    // Noise-free spot checks pin the sign and step conventions.
    let metrics_start = Instant::now();
    let noiseless = {
        let dynamics = crate::model::LinearDynamics::new(
            problem.dynamics().a().clone(),
            problem.dynamics().b().clone(),
            DMatrix::zeros(d, problem.dynamics().dim_noise()),
        )?;
        LqProblem::new(dynamics, problem.cost().clone(), problem.horizon())?
    };
    let mut exactness_max_err = 0.0f64;
    for i in 0..100u64 {
        let mut stream = rng::substream(cfg.seed, i, 0, Channel::Probe);
        let mut buf = vec![0.0f64; d * (d + 1)];
        rng::fill_standard_normal(&mut stream, &mut buf);
        let x = DVector::from_column_slice(&buf[..d]);
        let m = DMatrix::from_column_slice(d, d, &buf[d..]);
        let p = linalg::symmetrized(&m * m.transpose() + DMatrix::identity(d, d) * 0.1);
        let want = gain_from_p(&p, &noiseless)? * &x;
        let got = probe_control(
            &x,
            &p,
            &online,
            chain_seed(cfg.seed, &[i]),
            0,
            noiseless.dynamics(),
            noiseless.cost(),
        )?;
        exactness_max_err = exactness_max_err.max((got - want).norm() / (1.0 + x.norm()));
    }
    timings.metrics_ms += metrics_start.elapsed().as_millis();

    let mut files = Vec::new();
    let mut sweeps = Vec::new();
    for &n in &section.n_sweep {
        let ensemble_start = Instant::now();
        let per_run: Vec<Result<Vec<f64>, String>> = (0..section.runs)
            .into_par_iter()
            .map(|run| {
                let run_seed = chain_seed(cfg.seed, &[n as u64, run as u64]);
                let run_cfg = EnkfConfig {
                    n_particles: n,
                    seed: run_seed,
                    ..cfg.clone()
                };
                let output = run_offline(&problem, &run_cfg).map_err(|e| e.to_string())?;
                let p_bar = output
                    .p_bar()
                    .ok_or_else(|| "singular covariance".to_string())?
                    .clone();
                let mut errs = Vec::with_capacity(section.n_e_sweep.len());
                for (ei, &evals) in section.n_e_sweep.iter().enumerate() {
                    let probe_cfg = OnlineConfig::new(evals, online.tau);
                    let mut k_hat = DMatrix::zeros(problem.dim_input(), d);
                    for j in 0..d {
                        let mut x = DVector::zeros(d);
                        x[j] = 1.0;
                        let u = probe_control(
                            &x,
                            &p_bar,
                            &probe_cfg,
                            chain_seed(run_seed, &[ei as u64]),
                            j as u64,
                            problem.dynamics(),
                            problem.cost(),
                        )
                        .map_err(|e| e.to_string())?;
                        k_hat.set_column(j, &u);
                    }
                    errs.push((&k_hat - &k_opt).norm_squared());
                }
                Ok(errs)
            })
            .collect();
        timings.ensemble_ms += ensemble_start.elapsed().as_millis();

        let ok: Vec<&Vec<f64>> = per_run.iter().filter_map(|r| r.as_ref().ok()).collect();
        if ok.len() < 2 {
            return Err(BenchError::Validation(format!(
                "gain_probe: too few successful runs at n = {n}"
            )));
        }
        let mut csv = String::new();
        writeln!(csv, "n_e,mse,std_error").unwrap();
        let mut points = Vec::new();
        for (ei, &evals) in section.n_e_sweep.iter().enumerate() {
            let sample: Vec<f64> = ok.iter().map(|errs| errs[ei]).collect();
            let s = summarize(&sample);
            writeln!(csv, "{evals},{},{}", s.mse, s.std_error).unwrap();
            points.push(GainProbePoint {
                evals,
                mse: s.mse,
                std_error: s.std_error,
            });
        }
        files.push((format!("probe_n{n}.csv"), csv.into_bytes()));

        let metrics_start = Instant::now();
        let floor = points.last().map(|p| p.mse).unwrap_or(f64::NAN);
        let early: Vec<ScalingPoint> = points
            .iter()
            .filter(|p| p.mse >= 10.0 * floor)
            .map(|p| ScalingPoint::new(p.evals as f64, p.mse))
            .collect();
        let early_slope = if early.len() >= 3 {
            fit_scaling(&early)?.slope
        } else {
            let all: Vec<ScalingPoint> = points
                .iter()
                .map(|p| ScalingPoint::new(p.evals as f64, p.mse))
                .collect();
            fit_scaling(&all)?.slope
        };
        timings.metrics_ms += metrics_start.elapsed().as_millis();
        sweeps.push(GainProbeSweep {
            n_particles: n,
            points,
            early_slope,
            floor,
        });
    }
    let floor_ratios = sweeps.windows(2).map(|w| w[0].floor / w[1].floor).collect();
    Ok((
        GainProbeSummary {
            exactness_max_err,
            sweeps,
            floor_ratios,
        },
        files,
        Vec::new(),
    ))
}
