//! Deterministic Riccati solvers: the ground-truth oracle.
//!
//! The primal operator is
//! `𝒟(Λ) = AᵀΛ + ΛA + CᵀC − Λ Q Λ` with `Q = B R⁻¹ Bᵀ` for LQG and
//! `Q = B R⁻¹ Bᵀ − θ σσᵀ` for LEQG. The matrix differential equation
//! `−dP/dt = 𝒟(P)`, `P_T = G` is integrated backward in time with classical
//! fourth-order Runge–Kutta steps on the time-to-go variable.
//!
//! The dual trajectory `S_t` (`P_t⁻¹` for LQG, `(|θ|P_t)⁻¹` for LEQG)
//! satisfies `dS/dt = 𝒟†(S)` with
//! `𝒟†(Λ) = AΛ + ΛAᵀ − Q† + κ Λ CᵀC Λ`
//! (`Q† = B R⁻¹ Bᵀ`, `κ = 1` for LQG; `Q† = (D − θΣ)/|θ|`, `κ = |θ|` for
//! LEQG), again integrated backward from its terminal value. Note the sign:
//! differentiating `S = P⁻¹` along the primal flow gives `+𝒟†(S)` for the
//! forward-time derivative, which is what makes the two solvers mutual
//! inverses on the grid.
//!
//! The algebraic equation `𝒟(P̄) = 0` is solved by integrating the backward
//! equation with horizon doubling until the residual falls below tolerance;
//! no stabilizing initial gain is needed.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;

use crate::linalg;
use crate::model::{CostKind, LqProblem, ModelError};

/// How many integration steps between SPD spot checks.
const SPD_CHECK_EVERY: usize = 100;

/// Default horizon cap for the algebraic solver, in time units.
const ARE_HORIZON_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub enum RiccatiError {
    /// Step does not divide the horizon within rounding.
    BadGrid {
        horizon: f64,
        step: f64,
    },
    /// The integrated matrix lost positive definiteness.
    IntegrationFailure {
        time: f64,
    },
    /// Horizon doubling hit the cap before the residual met tolerance.
    NonConvergence {
        last_residual: f64,
        horizon: f64,
    },
    /// Input matrix expected SPD was not invertible by Cholesky.
    NotPositiveDefinite {
        what: &'static str,
    },
    Model(ModelError),
}

impl fmt::Display for RiccatiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiccatiError::BadGrid { horizon, step } => {
                write!(f, "step {step} does not divide horizon {horizon}")
            }
            RiccatiError::IntegrationFailure { time } => {
                write!(f, "matrix lost positive definiteness at t = {time}")
            }
            RiccatiError::NonConvergence {
                last_residual,
                horizon,
            } => write!(
                f,
                "no convergence by horizon {horizon}; last residual {last_residual:.3e}"
            ),
            RiccatiError::NotPositiveDefinite { what } => {
                write!(f, "{what} is not positive definite")
            }
            RiccatiError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RiccatiError {}

impl From<ModelError> for RiccatiError {
    fn from(e: ModelError) -> Self {
        RiccatiError::Model(e)
    }
}

/// Which Riccati flow a trajectory samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Primal,
    Dual,
}

/// Uniform time grid plus one symmetric matrix per grid point.
#[derive(Debug, Clone)]
pub struct RiccatiTrajectory {
    times: Vec<f64>,
    values: Vec<DMatrix<f64>>,
    kind: TrajectoryKind,
    step: f64,
}

impl RiccatiTrajectory {
    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    /// Value at grid index `k` (time `k * step`).
    pub fn at_index(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    /// Value at the grid point nearest to `t`; panics if `t` is off-grid by
    /// more than a tenth of a step.
    pub fn at_time(&self, t: f64) -> &DMatrix<f64> {
        let k = (t / self.step).round() as usize;
        assert!(
            (t - self.times[k]).abs() <= 0.1 * self.step,
            "time {t} is not on the trajectory grid"
        );
        &self.values[k]
    }

    /// Initial-time value (`t = 0`).
    pub fn initial(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    /// Terminal-time value (`t = T`).
    pub fn terminal(&self) -> &DMatrix<f64> {
        self.values.last().expect("empty trajectory")
    }

    /// Write the trajectory as CSV rows `(t, i, j, value)` in row-major order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,i,j,value")?;
        for (t, m) in self.times.iter().zip(self.values.iter()) {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    writeln!(w, "{t},{i},{j},{}", m[(i, j)])?;
                }
            }
        }
        Ok(())
    }
}

/// Precomputed coefficient matrices for both Riccati operators.
///
/// Building one of these performs the only matrix inversion involved, so the
/// solvers construct it once per run.
pub struct RiccatiOperators {
    a: DMatrix<f64>,
    a_t: DMatrix<f64>,
    ctc: DMatrix<f64>,
    /// Quadratic-term weight of the primal operator: `D` or `D − θΣ`.
    quad_primal: DMatrix<f64>,
    /// Constant term of the dual operator: `D` or `(D − θΣ)/|θ|`.
    constant_dual: DMatrix<f64>,
    /// Coefficient of `Λ CᵀC Λ` in the dual operator: `1` or `|θ|`.
    kappa: f64,
}

impl RiccatiOperators {
    pub fn new(problem: &LqProblem) -> Result<Self, RiccatiError> {
        let (d_eff, sigma) = problem.effective_matrices()?;
        let (quad_primal, constant_dual, kappa) = match problem.cost().kind() {
            CostKind::Lqg => (d_eff.clone(), d_eff, 1.0),
            CostKind::Leqg { theta } => {
                let risk = linalg::symmetrized(&d_eff - theta * &sigma);
                let scaled = &risk / theta.abs();
                (risk, scaled, theta.abs())
            }
        };
        Ok(Self {
            a: problem.dynamics().a().clone(),
            a_t: problem.dynamics().a().transpose(),
            ctc: problem.cost().state_weight(),
            quad_primal,
            constant_dual,
            kappa,
        })
    }

    /// Primal operator `𝒟(Λ)`.
    pub fn primal(&self, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        let out =
            &self.a_t * lambda + lambda * &self.a + &self.ctc - lambda * &self.quad_primal * lambda;
        linalg::symmetrized(out)
    }

    /// Dual operator `𝒟†(Λ)`.
    pub fn dual(&self, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        let out = &self.a * lambda + lambda * &self.a_t - &self.constant_dual
            + self.kappa * lambda * &self.ctc * lambda;
        linalg::symmetrized(out)
    }
}

/// `𝒟(Λ)` for the problem's cost kind; output symmetrized.
pub fn ricc_op(lambda: &DMatrix<f64>, problem: &LqProblem) -> Result<DMatrix<f64>, RiccatiError> {
    Ok(RiccatiOperators::new(problem)?.primal(lambda))
}

/// `𝒟†(Λ)` for the problem's cost kind; output symmetrized.
pub fn dual_ricc_op(
    lambda: &DMatrix<f64>,
    problem: &LqProblem,
) -> Result<DMatrix<f64>, RiccatiError> {
    Ok(RiccatiOperators::new(problem)?.dual(lambda))
}

/// Terminal value of the dual flow: `G⁻¹` for LQG, `(|θ|G)⁻¹` for LEQG.
pub fn dual_terminal(problem: &LqProblem) -> Result<DMatrix<f64>, RiccatiError> {
    let g_inv = linalg::spd_inverse(problem.cost().g())
        .ok_or(RiccatiError::NotPositiveDefinite { what: "G" })?;
    Ok(match problem.cost().kind() {
        CostKind::Lqg => g_inv,
        CostKind::Leqg { theta } => g_inv / theta.abs(),
    })
}

/// Map a dual matrix to the primal one: `S⁻¹`, or `(|θ|S)⁻¹` for LEQG.
pub fn s_to_p(s: &DMatrix<f64>, problem: &LqProblem) -> Result<DMatrix<f64>, RiccatiError> {
    let inv = linalg::spd_inverse(s).ok_or(RiccatiError::NotPositiveDefinite { what: "S" })?;
    Ok(match problem.cost().kind() {
        CostKind::Lqg => inv,
        CostKind::Leqg { theta } => inv / theta.abs(),
    })
}

/// Map a primal matrix to the dual one: `P⁻¹`, or `(|θ|P)⁻¹` for LEQG.
pub fn p_to_s(p: &DMatrix<f64>, problem: &LqProblem) -> Result<DMatrix<f64>, RiccatiError> {
    let inv = linalg::spd_inverse(p).ok_or(RiccatiError::NotPositiveDefinite { what: "P" })?;
    Ok(match problem.cost().kind() {
        CostKind::Lqg => inv,
        CostKind::Leqg { theta } => inv / theta.abs(),
    })
}

fn grid_steps(horizon: f64, step: f64) -> Result<usize, RiccatiError> {
    if !(horizon.is_finite() && horizon > 0.0 && step.is_finite() && step > 0.0) {
        return Err(RiccatiError::BadGrid { horizon, step });
    }
    let steps = (horizon / step).round();
    if steps < 1.0 || (steps * step - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(RiccatiError::BadGrid { horizon, step });
    }
    Ok(steps as usize)
}

/// One classical RK4 step of `dM/ds = f(M)`, symmetrized.
fn rk4_step<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(m: &DMatrix<f64>, h: f64, f: F) -> DMatrix<f64> {
    let k1 = f(m);
    let k2 = f(&(m + (0.5 * h) * &k1));
    let k3 = f(&(m + (0.5 * h) * &k2));
    let k4 = f(&(m + h * &k3));
    linalg::symmetrized(m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

fn integrate_backward<F>(
    terminal: DMatrix<f64>,
    horizon: f64,
    step: f64,
    f: F,
) -> Result<Vec<DMatrix<f64>>, RiccatiError>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let steps = grid_steps(horizon, step)?;
    // Integrate on the time-to-go variable and store in time order.
    let mut values = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut current = terminal;
    values[steps] = current.clone();
    for j in 1..=steps {
        current = rk4_step(&current, step, &f);
        if (j % SPD_CHECK_EVERY == 0 || j == steps) && !linalg::is_spd(&current) {
            let t = (steps - j) as f64 * step;
            return Err(RiccatiError::IntegrationFailure { time: t });
        }
        values[steps - j] = current.clone();
    }
    Ok(values)
}

/// Solve the backward matrix equation `−dP/dt = 𝒟(P)`, `P_T = G`.
pub fn solve_dre(
    problem: &LqProblem,
    horizon: f64,
    tau_ref: f64,
) -> Result<RiccatiTrajectory, RiccatiError> {
    let ops = RiccatiOperators::new(problem)?;
    let values = integrate_backward(problem.cost().g().clone(), horizon, tau_ref, |m| {
        ops.primal(m)
    })?;
    Ok(RiccatiTrajectory {
        times: (0..values.len()).map(|k| k as f64 * tau_ref).collect(),
        values,
        kind: TrajectoryKind::Primal,
        step: tau_ref,
    })
}

/// Solve the backward dual equation from `S_T` (see module docs for the sign).
pub fn solve_dual_dre(
    problem: &LqProblem,
    horizon: f64,
    tau_ref: f64,
) -> Result<RiccatiTrajectory, RiccatiError> {
    let ops = RiccatiOperators::new(problem)?;
    let terminal = dual_terminal(problem)?;
    // dS/ds = -D\u{2020}(S) on time-to-go s.
    let values = integrate_backward(terminal, horizon, tau_ref, |m| -ops.dual(m))?;
    Ok(RiccatiTrajectory {
        times: (0..values.len()).map(|k| k as f64 * tau_ref).collect(),
        values,
        kind: TrajectoryKind::Dual,
        step: tau_ref,
    })
}

/// Stationary solution of `𝒟(P̄) = 0` with its certified residual.
#[derive(Debug, Clone)]
pub struct AreSolution {
    pub p_bar: DMatrix<f64>,
    /// Frobenius norm of `𝒟(P̄)` at return.
    pub residual: f64,
    /// Total backward horizon integrated to reach the residual.
    pub horizon_used: f64,
    /// Residuals observed at each horizon-doubling checkpoint.
    pub residual_history: Vec<f64>,
}

impl AreSolution {
    /// The stationary dual matrix `S̄`.
    pub fn s_bar(&self, problem: &LqProblem) -> Result<DMatrix<f64>, RiccatiError> {
        p_to_s(&self.p_bar, problem)
    }
}

/// Solve the algebraic equation by horizon-doubling backward integration.
///
/// Starts from `P = G`, integrates the backward flow and checks the residual
/// at horizons 1, 2, 4, ... until `‖𝒟(P)‖_F < tol` or the cap of 10³ time
/// units is reached.
pub fn solve_are(problem: &LqProblem, tol: f64, tau_ref: f64) -> Result<AreSolution, RiccatiError> {
    let ops = RiccatiOperators::new(problem)?;
    let mut current = problem.cost().g().clone();
    let mut next_checkpoint = 1.0f64;
    let mut history = Vec::new();
    let mut steps_done = 0usize;
    loop {
        let target_steps = (next_checkpoint / tau_ref).round() as usize;
        while steps_done < target_steps {
            current = rk4_step(&current, tau_ref, |m| ops.primal(m));
            steps_done += 1;
            if steps_done.is_multiple_of(SPD_CHECK_EVERY) && !linalg::is_spd(&current) {
                return Err(RiccatiError::IntegrationFailure {
                    time: steps_done as f64 * tau_ref,
                });
            }
        }
        let horizon = next_checkpoint;
        let residual = linalg::frobenius(&ops.primal(&current));
        history.push(residual);
        if residual < tol {
            return Ok(AreSolution {
                p_bar: current,
                residual,
                horizon_used: horizon,
                residual_history: history,
            });
        }
        if horizon >= ARE_HORIZON_CAP {
            return Err(RiccatiError::NonConvergence {
                last_residual: residual,
                horizon,
            });
        }
        next_checkpoint = (2.0 * next_checkpoint).min(ARE_HORIZON_CAP);
    }
}
