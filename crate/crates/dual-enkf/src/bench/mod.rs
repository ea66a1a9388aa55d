//! Benchmark generators, experiment orchestration and report output.

mod config;
mod experiments;
mod report;

pub use config::{
    CostSection, CostVariant, EnkfSection, ExperimentKind, ExperimentSection, ExperimentSpec,
    HorizonSection, OnlineSection, ProblemSection, RolloutSection, X0Section,
};
pub use experiments::{
    closed_loop_energy, convergence_plot, gain_probe, run_experiment, scaling_sweep, stabilization,
    ConvergenceSummary, ConvergenceVariant, EnergySummary, EnergyVariant, GainProbePoint,
    GainProbeSummary, GainProbeSweep, ScalingSummary, ScalingVariant, StabilizationSummary,
    StabilizationVariant,
};
pub use report::{FileRecord, PhaseTimings, ReportBundle, RunStatus};

use std::fmt;

use nalgebra::DMatrix;

use crate::control::ControlError;
use crate::enkf::EnkfError;
use crate::metrics::MetricsError;
use crate::model::{CostKind, CostModel, Horizon, LinearDynamics, LqProblem, ModelError};
use crate::riccati::RiccatiError;
use crate::rng::{self, Channel};

#[derive(Debug)]
pub enum BenchError {
    /// Unusable configuration; the message carries field/line diagnostics.
    Config(String),
    /// The configured problem failed validation.
    Validation(String),
    Io(std::io::Error),
    Model(ModelError),
    Riccati(RiccatiError),
    Enkf(EnkfError),
    Control(ControlError),
    Metrics(MetricsError),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::Config(msg) => write!(f, "config error: {msg}"),
            BenchError::Validation(msg) => write!(f, "validation failed: {msg}"),
            BenchError::Io(e) => write!(f, "io error: {e}"),
            BenchError::Model(e) => write!(f, "{e}"),
            BenchError::Riccati(e) => write!(f, "{e}"),
            BenchError::Enkf(e) => write!(f, "{e}"),
            BenchError::Control(e) => write!(f, "{e}"),
            BenchError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e)
    }
}

impl From<ModelError> for BenchError {
    fn from(e: ModelError) -> Self {
        BenchError::Model(e)
    }
}

impl From<RiccatiError> for BenchError {
    fn from(e: RiccatiError) -> Self {
        BenchError::Riccati(e)
    }
}

impl From<EnkfError> for BenchError {
    fn from(e: EnkfError) -> Self {
        BenchError::Enkf(e)
    }
}

impl From<ControlError> for BenchError {
    fn from(e: ControlError) -> Self {
        BenchError::Control(e)
    }
}

impl From<MetricsError> for BenchError {
    fn from(e: MetricsError) -> Self {
        BenchError::Metrics(e)
    }
}

/// Whether the error indicates bad input (usage) or a numerical failure,
/// which the CLI maps to different exit codes.
impl BenchError {
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            BenchError::Config(_) | BenchError::Validation(_) | BenchError::Model(_)
        )
    }
}

/// Chain-of-masses benchmark: `d_s` unit masses coupled by springs and
/// dampers, forced on the velocity block.
///
/// `A = [[0, I], [−𝕋, −𝕋]]` with `𝕋` the tridiagonal Toeplitz matrix having
/// 2 on the diagonal and −1 off it; `B = [[0], [I]]`, `C = R = G = I`,
/// `σ = sigma_scale · B`. `flip_stability` negates `A`, which makes the
/// uncontrolled system unstable.
pub fn gen_spring_mass_damper(masses: usize, sigma_scale: f64, flip_stability: bool) -> LqProblem {
    assert!(masses >= 1, "need at least one mass");
    let d = 2 * masses;
    let mut toeplitz = DMatrix::zeros(masses, masses);
    for i in 0..masses {
        toeplitz[(i, i)] = 2.0;
        if i + 1 < masses {
            toeplitz[(i, i + 1)] = -1.0;
            toeplitz[(i + 1, i)] = -1.0;
        }
    }
    let mut a = DMatrix::zeros(d, d);
    a.view_mut((0, masses), (masses, masses))
        .copy_from(&DMatrix::identity(masses, masses));
    a.view_mut((masses, 0), (masses, masses))
        .copy_from(&(-&toeplitz));
    a.view_mut((masses, masses), (masses, masses))
        .copy_from(&(-&toeplitz));
    if flip_stability {
        a = -a;
    }
    let mut b = DMatrix::zeros(d, masses);
    b.view_mut((masses, 0), (masses, masses))
        .copy_from(&DMatrix::identity(masses, masses));
    let sigma = sigma_scale * &b;

    let dynamics = LinearDynamics::new(a, b, sigma).expect("consistent by construction");
    let cost = CostModel::new(
        DMatrix::identity(d, d),
        DMatrix::identity(masses, masses),
        DMatrix::identity(d, d),
        CostKind::Lqg,
    )
    .expect("consistent by construction");
    LqProblem::new(dynamics, cost, Horizon::Average).expect("consistent by construction")
}

/// Random system in controllable canonical form: companion `A` whose bottom
/// row is i.i.d. standard normal, `B` the last basis vector,
/// `C = R = G = I`, `σ = sigma_scale · B`.
pub fn gen_random_canonical(dim: usize, seed: u64, sigma_scale: f64) -> LqProblem {
    assert!(dim >= 1, "need a positive dimension");
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    let mut stream = rng::substream(seed, 0, 0, Channel::Generator);
    let mut row = vec![0.0f64; dim];
    rng::fill_standard_normal(&mut stream, &mut row);
    for (j, v) in row.iter().enumerate() {
        a[(dim - 1, j)] = *v;
    }
    let mut b = DMatrix::zeros(dim, 1);
    b[(dim - 1, 0)] = 1.0;
    let sigma = sigma_scale * &b;

    let dynamics = LinearDynamics::new(a, b, sigma).expect("consistent by construction");
    let cost = CostModel::new(
        DMatrix::identity(dim, dim),
        DMatrix::identity(1, 1),
        DMatrix::identity(dim, dim),
        CostKind::Lqg,
    )
    .expect("consistent by construction");
    LqProblem::new(dynamics, cost, Horizon::Average).expect("consistent by construction")
}
