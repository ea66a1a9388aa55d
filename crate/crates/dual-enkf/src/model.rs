//! Linear-quadratic problem definitions and validation.
//!
//! A problem couples linear Gaussian dynamics
//! `dX = (A X + B U) dt + σ dW` with a quadratic cost
//! `c(x, a) = ½|Cx|² + ½ aᵀR a`, a terminal weight `G`, and either a finite
//! horizon or the long-run average objective. The risk-sensitive (LEQG)
//! variant exponentiates the accumulated cost with risk parameter θ.
//!
//! Validation covers the standing assumptions the solvers rely on:
//! controllability of `(A, B)`, strict positive definiteness of `CᵀC`, `R`
//! and `G`, and for LEQG feasibility of `B R⁻¹ Bᵀ − θ σσᵀ`.

use std::fmt;

use nalgebra::DMatrix;

use crate::linalg;

/// Relative singular-value cutoff for matrix rank tests.
const RANK_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Structural shape problem, distinct from an assumption failure.
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A matrix that must be invertible is singular to working precision.
    SingularMatrix { what: &'static str },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(
                f,
                "dimension mismatch for {what}: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            ModelError::SingularMatrix { what } => write!(f, "{what} is singular"),
        }
    }
}

impl std::error::Error for ModelError {}

/// Drift, input and noise-gain matrices of the linear SDE.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

impl LinearDynamics {
    /// Build dynamics from `A` (d×d), `B` (d×m) and `σ` (d×q).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self, ModelError> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(ModelError::DimensionMismatch {
                what: "A",
                expected: (d, d),
                got: (a.nrows(), a.ncols()),
            });
        }
        if b.nrows() != d {
            return Err(ModelError::DimensionMismatch {
                what: "B",
                expected: (d, b.ncols()),
                got: (b.nrows(), b.ncols()),
            });
        }
        if sigma.nrows() != d {
            return Err(ModelError::DimensionMismatch {
                what: "sigma",
                expected: (d, sigma.ncols()),
                got: (sigma.nrows(), sigma.ncols()),
            });
        }
        Ok(Self { a, b, sigma })
    }

    pub fn dim_state(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim_input(&self) -> usize {
        self.b.ncols()
    }

    pub fn dim_noise(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Process-noise covariance `Σ = σσᵀ`, symmetrized.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        linalg::symmetrized(&self.sigma * self.sigma.transpose())
    }
}

/// Which objective the cost model encodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostKind {
    Lqg,
    /// Risk-sensitive objective; θ > 0 is risk-averse, θ < 0 risk-seeking.
    Leqg {
        theta: f64,
    },
}

impl CostKind {
    pub fn theta(&self) -> Option<f64> {
        match self {
            CostKind::Lqg => None,
            CostKind::Leqg { theta } => Some(*theta),
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Lqg => write!(f, "lqg"),
            CostKind::Leqg { theta } => write!(f, "leqg(theta={theta})"),
        }
    }
}

/// Quadratic stage and terminal cost: `½|Cx|² + ½ aᵀR a`, terminal `½ xᵀG x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    c: DMatrix<f64>,
    r: DMatrix<f64>,
    g: DMatrix<f64>,
    kind: CostKind,
}

impl CostModel {
    pub fn new(
        c: DMatrix<f64>,
        r: DMatrix<f64>,
        g: DMatrix<f64>,
        kind: CostKind,
    ) -> Result<Self, ModelError> {
        if r.nrows() != r.ncols() {
            return Err(ModelError::DimensionMismatch {
                what: "R",
                expected: (r.nrows(), r.nrows()),
                got: (r.nrows(), r.ncols()),
            });
        }
        if g.nrows() != g.ncols() {
            return Err(ModelError::DimensionMismatch {
                what: "G",
                expected: (g.nrows(), g.nrows()),
                got: (g.nrows(), g.ncols()),
            });
        }
        Ok(Self { c, r, g, kind })
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    /// `CᵀC`, symmetrized.
    pub fn state_weight(&self) -> DMatrix<f64> {
        linalg::symmetrized(self.c.transpose() * &self.c)
    }

    /// Stage cost `½|Cx|² + ½ aᵀR a`.
    pub fn stage_cost(&self, x: &nalgebra::DVector<f64>, a: &nalgebra::DVector<f64>) -> f64 {
        let cx = &self.c * x;
        0.5 * cx.norm_squared() + 0.5 * (a.transpose() * &self.r * a)[(0, 0)]
    }
}

/// Horizon mode of the optimal control objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    /// Finite horizon of the given length in seconds.
    Finite(f64),
    /// Long-run average cost.
    Average,
}

/// A complete linear-quadratic problem; the single source of model truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    dynamics: LinearDynamics,
    cost: CostModel,
    horizon: Horizon,
}

impl LqProblem {
    pub fn new(
        dynamics: LinearDynamics,
        cost: CostModel,
        horizon: Horizon,
    ) -> Result<Self, ModelError> {
        let d = dynamics.dim_state();
        let m = dynamics.dim_input();
        if cost.c.ncols() != d {
            return Err(ModelError::DimensionMismatch {
                what: "C",
                expected: (cost.c.nrows(), d),
                got: (cost.c.nrows(), cost.c.ncols()),
            });
        }
        if cost.r.nrows() != m {
            return Err(ModelError::DimensionMismatch {
                what: "R",
                expected: (m, m),
                got: (cost.r.nrows(), cost.r.ncols()),
            });
        }
        if cost.g.nrows() != d {
            return Err(ModelError::DimensionMismatch {
                what: "G",
                expected: (d, d),
                got: (cost.g.nrows(), cost.g.ncols()),
            });
        }
        Ok(Self {
            dynamics,
            cost,
            horizon,
        })
    }

    /// Convenience constructor for scalar problems, used heavily in tests.
    pub fn scalar(a: f64, b: f64, sigma: f64, c: f64, r: f64, g: f64, kind: CostKind) -> Self {
        let dm = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(
            LinearDynamics::new(dm(a), dm(b), dm(sigma)).unwrap(),
            CostModel::new(dm(c), dm(r), dm(g), kind).unwrap(),
            Horizon::Average,
        )
        .unwrap()
    }

    pub fn dynamics(&self) -> &LinearDynamics {
        &self.dynamics
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn with_horizon(mut self, horizon: Horizon) -> Self {
        self.horizon = horizon;
        self
    }

    /// Same problem with a different cost kind (LQG vs LEQG θ).
    pub fn map_cost_kind(mut self, kind: CostKind) -> Self {
        self.cost.kind = kind;
        self
    }

    pub fn dim_state(&self) -> usize {
        self.dynamics.dim_state()
    }

    pub fn dim_input(&self) -> usize {
        self.dynamics.dim_input()
    }

    /// `D = B R⁻¹ Bᵀ` and `Σ = σσᵀ`, both symmetrized.
    pub fn effective_matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let r_inv =
            linalg::spd_inverse(&self.cost.r).ok_or(ModelError::SingularMatrix { what: "R" })?;
        let d = linalg::symmetrized(&self.dynamics.b * r_inv * self.dynamics.b.transpose());
        Ok((d, self.dynamics.noise_covariance()))
    }

    /// Run every standing-assumption check and collect the outcomes.
    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();
        let d = self.dim_state();

        let ctc = self.cost.state_weight();
        checks.push(Check::definite("ctc_positive_definite", &ctc));
        checks.push(Check::definite("r_positive_definite", &self.cost.r));
        checks.push(Check::definite("g_positive_definite", &self.cost.g));

        // Controllability of (A, B) via singular values of [B, AB, ..., A^{d-1}B].
        // Each Krylov block is normalized before stacking: block scaling leaves
        // the rank unchanged but stops high powers of A from drowning the
        // small singular values at larger dimensions.
        let mut blocks = Vec::with_capacity(d);
        let mut block = self.dynamics.b.clone();
        for _ in 0..d {
            blocks.push(normalized_block(&block));
            block = &self.dynamics.a * block;
        }
        let ctrb = stack_columns(&blocks);
        let (rank, smallest) = effective_rank(&ctrb, d);
        checks.push(Check {
            name: "controllability".into(),
            passed: rank == d,
            margin: smallest,
            severity: Severity::Fail,
            detail: format!("controllability matrix rank {rank} of {d}"),
        });

        // Observability of (A, C): implied by CᵀC ≻ 0, so a rank deficiency
        // here is reported as a warning rather than a failure.
        let mut blocks = Vec::with_capacity(d);
        let mut block = self.cost.c.clone();
        for _ in 0..d {
            blocks.push(normalized_block(&block.transpose()));
            block = &block * &self.dynamics.a;
        }
        let obsv = stack_columns(&blocks);
        let (rank, smallest) = effective_rank(&obsv, d);
        checks.push(Check {
            name: "observability".into(),
            passed: rank == d,
            margin: smallest,
            severity: Severity::Warn,
            detail: format!("observability matrix rank {rank} of {d}"),
        });

        if let CostKind::Leqg { theta } = self.cost.kind {
            match self.effective_matrices() {
                Ok((dmat, sigma)) => {
                    // Benchmarks with sigma proportional to B sit exactly on
                    // the boundary of this condition (the matrix is PSD with
                    // a null space outside the input range), so the check
                    // rejects genuinely negative directions only.
                    let feas = linalg::symmetrized(&dmat - theta * &sigma);
                    let margin = linalg::min_symmetric_eigenvalue(&feas);
                    let scale = feas.norm().max(1.0);
                    let singular = margin.abs() <= 1e-10 * scale;
                    checks.push(Check {
                        name: "leqg_feasibility".into(),
                        passed: margin >= -1e-10 * scale,
                        margin,
                        severity: Severity::Fail,
                        detail: if singular {
                            format!(
                                "B R^-1 B^T - theta Sigma, theta = {theta}; \
                                 positive semidefinite (singular)"
                            )
                        } else {
                            format!("B R^-1 B^T - theta Sigma, theta = {theta}")
                        },
                    });
                }
                Err(_) => checks.push(Check {
                    name: "leqg_feasibility".into(),
                    passed: false,
                    margin: f64::NEG_INFINITY,
                    severity: Severity::Fail,
                    detail: "R not invertible; feasibility matrix undefined".into(),
                }),
            }
        }

        ValidationReport { checks }
    }
}

/// Whether a failed check blocks use of the problem or only warns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Fail,
    Warn,
}

/// Outcome of one named assumption check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Smallest eigenvalue or singular value of the tested matrix.
    pub margin: f64,
    pub severity: Severity,
    pub detail: String,
}

impl Check {
    /// Positive-definiteness check: Cholesky for the verdict, smallest
    /// eigenvalue for the margin.
    fn definite(name: &str, m: &DMatrix<f64>) -> Check {
        let passed = linalg::is_spd(m);
        let margin = linalg::min_symmetric_eigenvalue(m);
        Check {
            name: name.into(),
            passed,
            margin,
            severity: Severity::Fail,
            detail: String::new(),
        }
    }
}

/// List of named pass/fail checks with margins.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    /// Overall verdict: every `Fail`-severity clause passed. Warnings do not
    /// block.
    pub fn passed(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| c.severity == Severity::Fail)
            .all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| c.severity == Severity::Fail && !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = match (c.passed, c.severity) {
                (true, _) => "pass",
                (false, Severity::Warn) => "WARN",
                (false, Severity::Fail) => "FAIL",
            };
            write!(f, "{status}  {:<24} margin {:+.3e}", c.name, c.margin)?;
            if !c.detail.is_empty() {
                write!(f, "  ({})", c.detail)?;
            }
            writeln!(f)?;
        }
        writeln!(
            f,
            "overall: {}",
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn normalized_block(block: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = block.norm();
    if norm > 0.0 {
        block / norm
    } else {
        block.clone()
    }
}

fn stack_columns(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((0, at), (rows, b.ncols())).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Rank by singular values above `RANK_REL_TOL` times the largest, together
/// with the `want`-th singular value as the margin.
fn effective_rank(m: &DMatrix<f64>, want: usize) -> (usize, f64) {
    let svals = m.clone().svd(false, false).singular_values;
    let largest = svals.iter().copied().fold(0.0f64, f64::max);
    let tol = RANK_REL_TOL * largest;
    let rank = svals.iter().filter(|&&s| s > tol).count();
    let mut sorted: Vec<f64> = svals.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let margin = sorted.get(want - 1).copied().unwrap_or(0.0);
    (rank.min(want), margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_problem_passes_all_checks() {
        let p = LqProblem::scalar(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, CostKind::Lqg);
        let report = p.validate();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn zero_input_matrix_fails_controllability_with_rank_zero() {
        let dyn_ = LinearDynamics::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let cost = CostModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            CostKind::Lqg,
        )
        .unwrap();
        let p = LqProblem::new(dyn_, cost, Horizon::Average).unwrap();
        let report = p.validate();
        assert!(!report.passed());
        let c = report.get("controllability").unwrap();
        assert!(!c.passed);
        assert!(c.detail.contains("rank 0"));
    }

    #[test]
    fn leqg_feasibility_fails_with_expected_margin() {
        // B = R = sigma = 1, theta = 1.5: D - theta*Sigma = 1 - 1.5 = -0.5.
        let p = LqProblem::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, CostKind::Leqg { theta: 1.5 });
        let report = p.validate();
        assert!(!report.passed());
        let c = report.get("leqg_feasibility").unwrap();
        assert!(!c.passed);
        assert!((c.margin - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn validate_is_pure() {
        let p = LqProblem::scalar(1.0, 1.0, 0.5, 1.0, 1.0, 1.0, CostKind::Lqg);
        let a = p.validate();
        let b = p.validate();
        for (x, y) in a.checks.iter().zip(b.checks.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.passed, y.passed);
            assert_eq!(x.margin.to_bits(), y.margin.to_bits());
        }
    }

    #[test]
    fn effective_matrices_diagonal_case() {
        let dyn_ = LinearDynamics::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let cost = CostModel::new(
            DMatrix::identity(2, 2),
            2.0 * DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            CostKind::Lqg,
        )
        .unwrap();
        let p = LqProblem::new(dyn_, cost, Horizon::Average).unwrap();
        let (d, sigma) = p.effective_matrices().unwrap();
        assert!((d - 0.5 * DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        assert_eq!(sigma, DMatrix::zeros(2, 2));
    }

    #[test]
    fn effective_matrices_rank_one_input() {
        // B = [1, 0]^T, R = 1: D = [[1, 0], [0, 0]].
        let dyn_ = LinearDynamics::new(
            DMatrix::zeros(2, 2),
            dm(2, 1, &[1.0, 0.0]),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let cost = CostModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            CostKind::Lqg,
        )
        .unwrap();
        let p = LqProblem::new(dyn_, cost, Horizon::Average).unwrap();
        let (d, _) = p.effective_matrices().unwrap();
        assert_eq!(d, dm(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn dimension_mismatch_is_a_structural_error() {
        let err = LinearDynamics::new(
            DMatrix::zeros(2, 3),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ModelError::DimensionMismatch { what: "A", .. }
        ));

        let dyn_ = LinearDynamics::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let cost = CostModel::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(1, 1),
            DMatrix::identity(3, 3),
            CostKind::Lqg,
        )
        .unwrap();
        assert!(LqProblem::new(dyn_, cost, Horizon::Average).is_err());
    }

    #[test]
    fn leqg_feasible_problem_has_spd_risk_matrix() {
        let p = LqProblem::scalar(0.0, 1.0, 0.5, 1.0, 1.0, 1.0, CostKind::Leqg { theta: 1.1 });
        let report = p.validate();
        assert!(report.passed(), "{report}");
        // Restate assumption at matrix level: D - theta*Sigma admits Cholesky.
        let (d, sigma) = p.effective_matrices().unwrap();
        let feas = d - 1.1 * sigma;
        assert!(linalg::is_spd(&feas));
    }
}
