//! Experiment configuration: a flat, human-editable TOML schema.
//!
//! Matrices appear inline as nested bracket lists or by generator name plus
//! parameters. Unknown fields are rejected so typos surface as parse errors
//! with line/column diagnostics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{gen_random_canonical, gen_spring_mass_damper, BenchError};
use crate::control::OnlineConfig;
use crate::enkf::EnkfConfig;
use crate::model::{CostKind, CostModel, Horizon, LinearDynamics, LqProblem};

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_sigma_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub problem: ProblemSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub horizon: HorizonSection,
    #[serde(default)]
    pub enkf: EnkfSection,
    #[serde(default)]
    pub online: OnlineSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSection>,
}

/// Problem source: a named generator with parameters, or inline matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSection {
    SpringMassDamper {
        masses: usize,
        #[serde(default = "default_sigma_scale")]
        sigma_scale: f64,
        #[serde(default)]
        flip_stability: bool,
    },
    RandomCanonical {
        dim: usize,
        #[serde(default)]
        system_seed: u64,
        #[serde(default = "default_sigma_scale")]
        sigma_scale: f64,
    },
    Inline {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// `"lqg"` or `"leqg"`.
    pub kind: String,
    /// Risk parameter, required (and nonzero) for LEQG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Inline cost matrices; identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            kind: "lqg".into(),
            theta: None,
            c: None,
            r: None,
            g: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    /// `"finite"` or `"average"`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

impl Default for HorizonSection {
    fn default() -> Self {
        Self {
            mode: "average".into(),
            t: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnkfSection {
    pub particles: usize,
    /// Simulation horizon in seconds.
    pub t: f64,
    pub tau: f64,
    pub seed: u64,
    pub jitter: f64,
}

impl Default for EnkfSection {
    fn default() -> Self {
        Self {
            particles: 500,
            t: 10.0,
            tau: 0.02,
            seed: 0,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    pub evals: usize,
    pub tau: f64,
}

impl Default for OnlineSection {
    fn default() -> Self {
        Self {
            evals: 1,
            tau: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub t: f64,
    pub tau: f64,
    /// `"gain"` (schedule from the filter) or `"probe"` (Q-function probing).
    pub law: String,
    /// `"gaussian"` for a standard normal draw per run, or an inline vector.
    pub x0: X0Section,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            t: 5.0,
            tau: 0.02,
            law: "gain".into(),
            x0: X0Section::Named("gaussian".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum X0Section {
    Named(String),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ConvergencePlot,
    ScalingSweep,
    Stabilization,
    ClosedLoopEnergy,
    GainProbe,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ConvergencePlot => "convergence_plot",
            ExperimentKind::ScalingSweep => "scaling_sweep",
            ExperimentKind::Stabilization => "stabilization",
            ExperimentKind::ClosedLoopEnergy => "closed_loop_energy",
            ExperimentKind::GainProbe => "gain_probe",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    /// Monte Carlo repetitions (seeds) per configuration.
    pub runs: usize,
    /// Particle counts for sweep-style experiments.
    #[serde(default)]
    pub n_sweep: Vec<usize>,
    /// Averaging-evaluation counts for the gain-probe experiment.
    #[serde(default)]
    pub n_e_sweep: Vec<usize>,
    /// Cost variants to run, e.g. `["lqg", "leqg:1.1", "leqg:-0.8"]`.
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    pub out_dir: String,
}

fn default_variants() -> Vec<String> {
    vec!["lqg".into()]
}

/// One parsed cost variant with a filesystem-safe label.
#[derive(Debug, Clone, Copy)]
pub struct CostVariant {
    pub kind: CostKind,
}

impl CostVariant {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        if text == "lqg" {
            return Ok(Self {
                kind: CostKind::Lqg,
            });
        }
        if let Some(rest) = text.strip_prefix("leqg:") {
            let theta: f64 = rest
                .parse()
                .map_err(|_| BenchError::Config(format!("bad theta in variant '{text}'")))?;
            if theta == 0.0 {
                return Err(BenchError::Config("LEQG theta must be nonzero".into()));
            }
            return Ok(Self {
                kind: CostKind::Leqg { theta },
            });
        }
        Err(BenchError::Config(format!(
            "unknown variant '{text}' (expected 'lqg' or 'leqg:<theta>')"
        )))
    }

    pub fn label(&self) -> String {
        match self.kind {
            CostKind::Lqg => "lqg".into(),
            CostKind::Leqg { theta } => format!("leqg_{theta}").replace('-', "m"),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Config(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(BenchError::Config(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        if spec.schema_version != SCHEMA_VERSION {
            return Err(BenchError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                spec.schema_version
            )));
        }
        Ok(spec)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Base cost kind from the `[cost]` section.
    pub fn cost_kind(&self) -> Result<CostKind, BenchError> {
        match self.cost.kind.as_str() {
            "lqg" => {
                if self.cost.theta.is_some() {
                    return Err(BenchError::Config("theta given for LQG cost".into()));
                }
                Ok(CostKind::Lqg)
            }
            "leqg" => {
                let theta = self
                    .cost
                    .theta
                    .ok_or_else(|| BenchError::Config("LEQG cost needs theta".into()))?;
                if theta == 0.0 {
                    return Err(BenchError::Config("LEQG theta must be nonzero".into()));
                }
                Ok(CostKind::Leqg { theta })
            }
            other => Err(BenchError::Config(format!("unknown cost kind '{other}'"))),
        }
    }

    pub fn horizon(&self) -> Result<Horizon, BenchError> {
        match self.horizon.mode.as_str() {
            "average" => Ok(Horizon::Average),
            "finite" => {
                let t = self
                    .horizon
                    .t
                    .ok_or_else(|| BenchError::Config("finite horizon needs t".into()))?;
                if t <= 0.0 {
                    return Err(BenchError::Config("horizon t must be positive".into()));
                }
                Ok(Horizon::Finite(t))
            }
            other => Err(BenchError::Config(format!(
                "unknown horizon mode '{other}'"
            ))),
        }
    }

    /// Build the configured problem. The result is validated; assumption
    /// failures are reported as validation errors.
    pub fn build_problem(&self) -> Result<LqProblem, BenchError> {
        let problem = self.build_problem_raw()?;
        let report = problem.validate();
        if !report.passed() {
            let lines: Vec<String> = report
                .failures()
                .map(|c| format!("{} (margin {:+.3e})", c.name, c.margin))
                .collect();
            return Err(BenchError::Validation(lines.join("; ")));
        }
        Ok(problem)
    }

    /// Build the configured problem without the validation gate, so callers
    /// can inspect the full check report themselves.
    pub fn build_problem_raw(&self) -> Result<LqProblem, BenchError> {
        let kind = self.cost_kind()?;
        let horizon = self.horizon()?;
        let base = match &self.problem {
            ProblemSection::SpringMassDamper {
                masses,
                sigma_scale,
                flip_stability,
            } => {
                if *masses == 0 {
                    return Err(BenchError::Config("masses must be positive".into()));
                }
                gen_spring_mass_damper(*masses, *sigma_scale, *flip_stability)
            }
            ProblemSection::RandomCanonical {
                dim,
                system_seed,
                sigma_scale,
            } => {
                if *dim == 0 {
                    return Err(BenchError::Config("dim must be positive".into()));
                }
                gen_random_canonical(*dim, *system_seed, *sigma_scale)
            }
            ProblemSection::Inline { a, b, sigma } => {
                let a = matrix_from_rows(a, "problem.a")?;
                let b = matrix_from_rows(b, "problem.b")?;
                let sigma = matrix_from_rows(sigma, "problem.sigma")?;
                let d = a.nrows();
                let m = b.ncols();
                let dynamics = LinearDynamics::new(a, b, sigma)?;
                let cost = CostModel::new(
                    DMatrix::identity(d, d),
                    DMatrix::identity(m, m),
                    DMatrix::identity(d, d),
                    CostKind::Lqg,
                )?;
                LqProblem::new(dynamics, cost, Horizon::Average)?
            }
        };

        // Cost overrides on top of the generator's identity defaults.
        let d = base.dim_state();
        let m = base.dim_input();
        let c = match &self.cost.c {
            Some(rows) => matrix_from_rows(rows, "cost.c")?,
            None => base.cost().c().clone(),
        };
        let r = match &self.cost.r {
            Some(rows) => matrix_from_rows(rows, "cost.r")?,
            None => DMatrix::identity(m, m),
        };
        let g = match &self.cost.g {
            Some(rows) => matrix_from_rows(rows, "cost.g")?,
            None => DMatrix::identity(d, d),
        };
        let cost = CostModel::new(c, r, g, kind)?;
        Ok(LqProblem::new(base.dynamics().clone(), cost, horizon)?)
    }

    pub fn enkf_config(&self) -> EnkfConfig {
        EnkfConfig {
            n_particles: self.enkf.particles,
            horizon: self.enkf.t,
            tau: self.enkf.tau,
            seed: self.enkf.seed,
            jitter: self.enkf.jitter,
        }
    }

    pub fn online_config(&self) -> OnlineConfig {
        OnlineConfig::new(self.online.evals.max(1), self.online.tau)
    }

    pub fn variants(&self) -> Result<Vec<CostVariant>, BenchError> {
        let section = self
            .experiment
            .as_ref()
            .ok_or_else(|| BenchError::Config("missing [experiment] section".into()))?;
        section
            .variants
            .iter()
            .map(|v| CostVariant::parse(v))
            .collect()
    }
}
