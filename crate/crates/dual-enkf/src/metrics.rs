//! Error metrics, Monte Carlo aggregation, scaling fits, spectral
//! diagnostics, and closed-loop cost evaluation.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::control::{closed_loop_rollout, ControlError, ControlLaw, GainSchedule};
use crate::linalg;
use crate::model::{CostKind, Horizon, LqProblem};
use crate::riccati::{RiccatiError, RiccatiTrajectory};
use crate::rng;

#[derive(Debug)]
pub enum MetricsError {
    /// Relative error against a zero-norm baseline.
    UndefinedBaseline,
    /// Mismatched matrix shapes.
    ShapeMismatch,
    TooFewPoints {
        need: usize,
        got: usize,
    },
    /// Log-domain fit fed a nonpositive value.
    NonPositive,
    /// Closed loop is not Hurwitz; carries the offending eigenvalues.
    NotHurwitz {
        eigenvalues: Vec<(f64, f64)>,
    },
    /// Lyapunov cost evaluation only applies to LQG.
    LqgOnly,
    /// Monte Carlo evaluation requested without a configuration.
    MissingMonteCarlo,
    /// Gain schedules of different shapes cannot be compared.
    ScheduleShapeMismatch,
    Riccati(RiccatiError),
    Control(ControlError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::UndefinedBaseline => write!(f, "relative error baseline has zero norm"),
            MetricsError::ShapeMismatch => write!(f, "matrix shapes do not match"),
            MetricsError::TooFewPoints { need, got } => {
                write!(f, "need at least {need} points, got {got}")
            }
            MetricsError::NonPositive => write!(f, "log-domain fit needs positive values"),
            MetricsError::NotHurwitz { eigenvalues } => {
                write!(f, "closed loop not Hurwitz; eigenvalues {eigenvalues:?}")
            }
            MetricsError::LqgOnly => write!(f, "Lyapunov cost is defined for LQG only"),
            MetricsError::MissingMonteCarlo => {
                write!(f, "Monte Carlo cost required but no configuration given")
            }
            MetricsError::ScheduleShapeMismatch => {
                write!(
                    f,
                    "cannot compare stationary and finite-horizon gain schedules"
                )
            }
            MetricsError::Riccati(e) => write!(f, "{e}"),
            MetricsError::Control(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<RiccatiError> for MetricsError {
    fn from(e: RiccatiError) -> Self {
        MetricsError::Riccati(e)
    }
}

impl From<ControlError> for MetricsError {
    fn from(e: ControlError) -> Self {
        MetricsError::Control(e)
    }
}

/// Which norm an [`ErrorSeries`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NormKind {
    Frobenius,
    RelativeFrobenius,
}

/// Per-time nonnegative error values on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub norm: NormKind,
}

impl ErrorSeries {
    /// Elementwise error between a matrix series and a fixed reference.
    pub fn against_constant(
        times: &[f64],
        series: &[DMatrix<f64>],
        reference: &DMatrix<f64>,
        norm: NormKind,
    ) -> Result<ErrorSeries, MetricsError> {
        let values = series
            .iter()
            .map(|m| frob_error(m, reference, norm == NormKind::RelativeFrobenius))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ErrorSeries {
            times: times.to_vec(),
            values,
            norm,
        })
    }

    /// Error between a matrix series and a reference trajectory sampled at a
    /// coarser multiple of its grid.
    pub fn against_trajectory(
        times: &[f64],
        series: &[DMatrix<f64>],
        reference: &RiccatiTrajectory,
        norm: NormKind,
    ) -> Result<ErrorSeries, MetricsError> {
        let ratio = ((times[1] - times[0]) / reference.step()).round() as usize;
        let values = series
            .iter()
            .enumerate()
            .map(|(k, m)| {
                frob_error(
                    m,
                    reference.at_index(k * ratio),
                    norm == NormKind::RelativeFrobenius,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ErrorSeries {
            times: times.to_vec(),
            values,
            norm,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,error")?;
        for (t, v) in self.times.iter().zip(self.values.iter()) {
            writeln!(w, "{t},{v}")?;
        }
        Ok(())
    }
}

/// `‖M̂ − M‖_F`, divided by `‖M‖_F` in relative mode.
pub fn frob_error(
    m_hat: &DMatrix<f64>,
    m_ref: &DMatrix<f64>,
    relative: bool,
) -> Result<f64, MetricsError> {
    if m_hat.shape() != m_ref.shape() {
        return Err(MetricsError::ShapeMismatch);
    }
    let err = (m_hat - m_ref).norm();
    if relative {
        let base = m_ref.norm();
        if base == 0.0 {
            return Err(MetricsError::UndefinedBaseline);
        }
        Ok(err / base)
    } else {
        Ok(err)
    }
}

/// Sample mean of squared Frobenius errors with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MseSummary {
    pub mse: f64,
    pub std_error: f64,
    pub runs: usize,
}

pub fn mse_over_runs(
    runs: &[DMatrix<f64>],
    reference: &DMatrix<f64>,
) -> Result<MseSummary, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewPoints {
            need: 2,
            got: runs.len(),
        });
    }
    let sq: Vec<f64> = runs
        .iter()
        .map(|m| {
            if m.shape() != reference.shape() {
                return Err(MetricsError::ShapeMismatch);
            }
            Ok((m - reference).norm_squared())
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(&sq))
}

/// Mean and standard error of a sample of scalars.
pub fn summarize(values: &[f64]) -> MseSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MseSummary {
        mse: mean,
        std_error: (var / n).sqrt(),
        runs: values.len(),
    }
}

/// One point of a particle-count sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingPoint {
    pub n: f64,
    pub mse: f64,
    pub std_error: f64,
}

impl ScalingPoint {
    pub fn new(n: f64, mse: f64) -> Self {
        Self {
            n,
            mse,
            std_error: 0.0,
        }
    }
}

/// Log-log least-squares fit of MSE against particle count.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub intercept: f64,
    /// Two standard errors of the slope estimate.
    pub slope_half_width: f64,
}

/// Ordinary least squares on `(log N, log MSE)`.
pub fn fit_scaling(points: &[ScalingPoint]) -> Result<ScalingReport, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::TooFewPoints {
            need: 3,
            got: points.len(),
        });
    }
    if points.iter().any(|p| p.mse <= 0.0 || p.n <= 0.0) {
        return Err(MetricsError::NonPositive);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mse.ln()).collect();
    let (slope, intercept, slope_se) = ols(&xs, &ys);
    Ok(ScalingReport {
        points: points.to_vec(),
        slope,
        intercept,
        slope_half_width: 2.0 * slope_se,
    })
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let slope_se = (rss / dof / sxx).sqrt();
    (slope, intercept, slope_se)
}

/// Exponential-decay fit of an error series against time-to-go.
#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    /// Raw e-folding rate of the series (`−slope` of the log-linear fit).
    pub rate: f64,
    /// Spectral-constant estimate: `rate/2` for squared series, `rate` for
    /// unsquared ones.
    pub lambda_hat: f64,
    pub r_squared: f64,
    /// Window in time-to-go actually used by the fit.
    pub window: (f64, f64),
    /// True when a non-monotone default window forced a fallback to the
    /// widest monotone sub-window.
    pub fallback_window: bool,
}

/// Fit `log error` against time-to-go `T − t` by least squares.
///
/// The window defaults to the middle 60% of the time-to-go range, which
/// excludes both the terminal transient and any sampling-noise plateau. A
/// non-monotone window falls back to its widest monotone sub-window (judged
/// on ten coarse block means, so per-sample noise does not trigger it).
pub fn fit_decay_rate(
    series: &ErrorSeries,
    horizon: f64,
    squared: bool,
    window: Option<(f64, f64)>,
) -> Result<DecayFit, MetricsError> {
    let mut pairs: Vec<(f64, f64)> = series
        .times
        .iter()
        .zip(series.values.iter())
        .map(|(&t, &v)| (horizon - t, v))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let span_lo = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let span_hi = pairs.last().map(|p| p.0).unwrap_or(0.0);
    let span = span_hi - span_lo;
    let (mut lo, mut hi) = window.unwrap_or((span_lo + 0.2 * span, span_lo + 0.8 * span));

    let select = |lo: f64, hi: f64| -> Vec<(f64, f64)> {
        pairs
            .iter()
            .copied()
            .filter(|(x, _)| *x >= lo && *x <= hi)
            .collect()
    };
    let mut chosen = select(lo, hi);
    if chosen.len() < 10 {
        return Err(MetricsError::TooFewPoints {
            need: 10,
            got: chosen.len(),
        });
    }
    if chosen.iter().any(|(_, v)| *v <= 0.0) {
        return Err(MetricsError::NonPositive);
    }

    // Coarse monotonicity screen: ten block means must not increase.
    let mut fallback = false;
    let blocks = 10usize;
    let per = chosen.len() / blocks;
    if per >= 1 {
        let means: Vec<f64> = (0..blocks)
            .map(|b| {
                let s = &chosen[b * per..((b + 1) * per).min(chosen.len())];
                s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64
            })
            .collect();
        if means.windows(2).any(|w| w[1] > w[0]) {
            // Widest run of non-increasing block means.
            let (mut best_s, mut best_e) = (0usize, 0usize);
            let mut s = 0usize;
            for e in 1..blocks {
                if means[e] > means[e - 1] {
                    s = e;
                }
                if e - s > best_e - best_s {
                    best_s = s;
                    best_e = e;
                }
            }
            let x_at = |b: usize| chosen[(b * per).min(chosen.len() - 1)].0;
            lo = x_at(best_s);
            hi = if best_e + 1 >= blocks {
                chosen.last().unwrap().0
            } else {
                x_at(best_e + 1)
            };
            fallback = true;
            chosen = select(lo, hi);
            if chosen.len() < 10 {
                return Err(MetricsError::TooFewPoints {
                    need: 10,
                    got: chosen.len(),
                });
            }
        }
    }

    let xs: Vec<f64> = chosen.iter().map(|(x, _)| *x).collect();
    let ys: Vec<f64> = chosen.iter().map(|(_, v)| v.ln()).collect();
    let (slope, intercept, _) = ols(&xs, &ys);
    let y_mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    let rate = -slope;
    Ok(DecayFit {
        rate,
        lambda_hat: if squared { rate / 2.0 } else { rate },
        r_squared,
        window: (lo, hi),
        fallback_window: fallback,
    })
}

/// Locate the exponential-decay flank of an error series: the log-band below
/// any saturated head (values above a third of the peak) and above
/// `multiple` times the tail level, where the tail level is the mean over
/// the last `plateau_fraction` of the time-to-go range.
///
/// Head saturation appears when the reference is much larger than the
/// terminal value (the error sits at the reference norm while the flow
/// climbs); the tail level is the sampling-noise plateau when one exists,
/// or the still-decaying end of the series otherwise. Either way the band
/// in between is the part that decays.
pub fn pre_plateau_window(
    series: &ErrorSeries,
    horizon: f64,
    plateau_fraction: f64,
    multiple: f64,
) -> Option<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = series
        .times
        .iter()
        .zip(series.values.iter())
        .map(|(&t, &v)| (horizon - t, v))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let span_hi = pairs.last()?.0;
    let span_lo = pairs.first()?.0;
    let cut = span_hi - plateau_fraction * (span_hi - span_lo);
    let tail: Vec<f64> = pairs
        .iter()
        .filter(|(x, _)| *x >= cut)
        .map(|(_, v)| *v)
        .collect();
    if tail.is_empty() {
        return None;
    }
    let floor = tail.iter().sum::<f64>() / tail.len() as f64;
    let width = (pairs.len() / 50).max(1);
    let smoothed: Vec<(f64, f64)> = pairs
        .windows(width)
        .map(|w| {
            (
                w[w.len() / 2].0,
                w.iter().map(|(_, v)| v).sum::<f64>() / w.len() as f64,
            )
        })
        .collect();
    let peak = smoothed.iter().map(|(_, v)| *v).fold(0.0f64, f64::max);
    let hi_val = peak / 3.0;
    let lo_val = multiple * floor;
    if lo_val >= hi_val {
        return None;
    }
    let lo = smoothed
        .iter()
        .find(|(_, v)| *v <= hi_val)
        .map(|(x, _)| *x)?;
    let hi = smoothed
        .iter()
        .find(|(x, v)| *x > lo && *v <= lo_val)
        .map(|(x, _)| *x)
        .unwrap_or(span_hi);
    if hi <= lo {
        return None;
    }
    Some((lo, hi))
}

/// Long-run average cost of a stabilizing stationary gain, from the Lyapunov
/// equation `(A+BK)ᵀX + X(A+BK) + CᵀC + KᵀRK = 0`: the cost is `Tr(XΣ)`.
///
/// Solved by Kronecker vectorization; `O(d⁶)` but dependency-free and exact
/// to solver precision at the dimensions in use.
pub fn average_cost_lyapunov(problem: &LqProblem, k: &DMatrix<f64>) -> Result<f64, MetricsError> {
    if !matches!(problem.cost().kind(), CostKind::Lqg) {
        return Err(MetricsError::LqgOnly);
    }
    let spectrum = closed_loop_spectrum(problem, k);
    if !spectrum.hurwitz {
        return Err(MetricsError::NotHurwitz {
            eigenvalues: spectrum
                .eigenvalues
                .into_iter()
                .filter(|(re, _)| *re >= 0.0)
                .collect(),
        });
    }
    let a_cl = problem.dynamics().a() + problem.dynamics().b() * k;
    let q =
        linalg::symmetrized(problem.cost().state_weight() + k.transpose() * problem.cost().r() * k);
    let x = solve_lyapunov(&a_cl, &q)?;
    Ok((x * problem.dynamics().noise_covariance()).trace())
}

/// Solve `Aᵀ X + X A + Q = 0` for symmetric `X` by vectorization.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let d = a.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let a_t = a.transpose();
    // vec(A^T X) = (I (x) A^T) vec X, vec(X A) = (A^T (x) I) vec X.
    let big = eye.kronecker(&a_t) + a_t.kronecker(&eye);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = big.lu().solve(&(-rhs)).ok_or(MetricsError::NotHurwitz {
        eigenvalues: vec![],
    })?;
    Ok(linalg::symmetrized(DMatrix::from_column_slice(
        d,
        d,
        sol.as_slice(),
    )))
}

/// Eigenvalues of `A + BK` and the Hurwitz verdict.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    /// `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub hurwitz: bool,
}

pub fn closed_loop_spectrum(problem: &LqProblem, k: &DMatrix<f64>) -> SpectrumReport {
    let a_cl = problem.dynamics().a() + problem.dynamics().b() * k;
    spectrum_of(&a_cl)
}

/// Eigenvalues of an arbitrary square matrix with the Hurwitz verdict.
pub fn spectrum_of(m: &DMatrix<f64>) -> SpectrumReport {
    let eigs = m.complex_eigenvalues();
    let eigenvalues: Vec<(f64, f64)> = eigs.iter().map(|z| (z.re, z.im)).collect();
    let hurwitz = eigenvalues.iter().all(|(re, _)| *re < 0.0);
    SpectrumReport {
        eigenvalues,
        hurwitz,
    }
}

/// How the closed-loop cost is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostMethod {
    Lyapunov,
    MonteCarlo,
}

/// Monte Carlo rollout parameters for cost evaluation.
#[derive(Debug, Clone)]
pub struct MonteCarloCostConfig {
    pub runs: usize,
    pub horizon: f64,
    pub tau: f64,
    pub seed: u64,
    /// Initial state shared by all rollouts.
    pub x0: DVector<f64>,
}

/// Monte Carlo estimate of the problem's cost under a control law.
///
/// Finite-horizon problems accumulate the stage cost plus the terminal
/// weight. Average-horizon problems divide by the rollout horizon, drop the
/// terminal weight, and use the unhalved quadratic rate
/// `xᵀCᵀCx + uᵀRu` — the same normalization as the Lyapunov route, so the
/// two estimators agree on stabilizing gains.
///
/// LQG averages the totals; LEQG uses the exponential-of-integral estimator
/// evaluated in the log domain with running-max subtraction, so moderate
/// horizons do not overflow.
pub fn monte_carlo_cost(
    problem: &LqProblem,
    law: &ControlLaw<'_>,
    cfg: &MonteCarloCostConfig,
) -> Result<f64, MetricsError> {
    let with_terminal = matches!(problem.horizon(), Horizon::Finite(_));
    let mut totals = Vec::with_capacity(cfg.runs);
    for i in 0..cfg.runs {
        let seed = rng::derive_seed(cfg.seed, i as u64);
        let out = closed_loop_rollout(problem, law, &cfg.x0, cfg.horizon, cfg.tau, seed)?;
        let total = if with_terminal {
            out.total_cost_with_terminal(problem.cost().g())
        } else {
            2.0 * out.cumulative_cost.last().unwrap()
        };
        totals.push(total);
    }
    let value = match problem.cost().kind() {
        CostKind::Lqg => totals.iter().sum::<f64>() / totals.len() as f64,
        CostKind::Leqg { theta } => {
            // theta^-1 log mean exp(theta * total), max-shifted.
            let scaled: Vec<f64> = totals.iter().map(|c| theta * c).collect();
            let peak = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean_exp =
                scaled.iter().map(|z| (z - peak).exp()).sum::<f64>() / scaled.len() as f64;
            (peak + mean_exp.ln()) / theta
        }
    };
    Ok(match problem.horizon() {
        Horizon::Finite(_) => value,
        Horizon::Average => value / cfg.horizon,
    })
}

/// Relative cost and gain errors against a reference controller.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub average_cost_alg: f64,
    pub average_cost_opt: f64,
    pub method: CostMethod,
    pub eps_cost: f64,
    pub eps_gain: f64,
}

/// Relative gain error: a single Frobenius ratio for stationary schedules,
/// or the time average of per-step ratios for finite-horizon ones.
pub fn relative_gain_error(alg: &GainSchedule, opt: &GainSchedule) -> Result<f64, MetricsError> {
    match (alg, opt) {
        (GainSchedule::Stationary(ka), GainSchedule::Stationary(ko)) => frob_error(ka, ko, true),
        (GainSchedule::Finite { gains: ga, .. }, GainSchedule::Finite { gains: go, .. }) => {
            if ga.len() != go.len() {
                return Err(MetricsError::ScheduleShapeMismatch);
            }
            let ratios: Vec<f64> = ga
                .iter()
                .zip(go.iter())
                .map(|(a, o)| frob_error(a, o, true))
                .collect::<Result<_, _>>()?;
            // Trapezoidal time average over the uniform grid.
            let n = ratios.len();
            if n == 1 {
                return Ok(ratios[0]);
            }
            let inner: f64 = ratios[1..n - 1].iter().sum();
            Ok((0.5 * ratios[0] + inner + 0.5 * ratios[n - 1]) / (n as f64 - 1.0))
        }
        _ => Err(MetricsError::ScheduleShapeMismatch),
    }
}

/// Evaluate `ε^cost` and `ε^gain` of a learned controller against the
/// reference one. LQG average-cost problems use the Lyapunov route; all
/// others need a Monte Carlo configuration.
pub fn relative_cost_and_gain(
    alg: &GainSchedule,
    problem: &LqProblem,
    opt: &GainSchedule,
    mc: Option<&MonteCarloCostConfig>,
) -> Result<CostReport, MetricsError> {
    let eps_gain = relative_gain_error(alg, opt)?;
    let lyapunov_ok = matches!(problem.cost().kind(), CostKind::Lqg)
        && matches!(problem.horizon(), Horizon::Average)
        && matches!(alg, GainSchedule::Stationary(_));
    let (c_alg, c_opt, method) = if lyapunov_ok {
        let (GainSchedule::Stationary(ka), GainSchedule::Stationary(ko)) = (alg, opt) else {
            return Err(MetricsError::ScheduleShapeMismatch);
        };
        (
            average_cost_lyapunov(problem, ka)?,
            average_cost_lyapunov(problem, ko)?,
            CostMethod::Lyapunov,
        )
    } else {
        let cfg = mc.ok_or(MetricsError::MissingMonteCarlo)?;
        (
            monte_carlo_cost(problem, &ControlLaw::Gains(alg), cfg)?,
            monte_carlo_cost(problem, &ControlLaw::Gains(opt), cfg)?,
            CostMethod::MonteCarlo,
        )
    };
    if c_opt == 0.0 {
        return Err(MetricsError::UndefinedBaseline);
    }
    Ok(CostReport {
        average_cost_alg: c_alg,
        average_cost_opt: c_opt,
        method,
        eps_cost: (c_alg - c_opt) / c_opt,
        eps_gain,
    })
}
