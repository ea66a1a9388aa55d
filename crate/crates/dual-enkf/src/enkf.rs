//! Offline dual ensemble Kalman filter.
//!
//! A cloud of `N` particles is sampled at the terminal time with covariance
//! `S_T` (the inverse of the terminal cost weight, risk-scaled for LEQG) and
//! simulated backward in time. Each particle is a copy of the model driven by
//! an exploration input `η` (a Brownian motion with covariance tied to `R`)
//! plus a mean-field coupling that depends only on the ensemble's empirical
//! mean and covariance. By construction the empirical covariance tracks the
//! dual Riccati flow, so inverting it recovers the Riccati solution itself —
//! using nothing but simulator calls.
//!
//! Per-particle noise comes from counter-based substreams keyed by
//! `(seed, particle id, step index, channel)`, so results are bit-identical
//! for any worker count and particles can be permuted without changing the
//! ensemble statistics.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha8Rng;

use crate::linalg;
use crate::model::{CostKind, LinearDynamics, LqProblem, ModelError};
use crate::riccati::{self, RiccatiError};
use crate::rng::{self, Channel};

/// Covariance rescue jitter relative to `trace(S)/d`, applied once on a
/// failed inversion before giving up.
const RESCUE_JITTER: f64 = 1e-8;

const SNAPSHOT_MAGIC: &[u8; 4] = b"DENK";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum EnkfError {
    /// Fewer particles than the `N ≥ d + 1` precondition allows.
    TooFewParticles {
        n: usize,
        min: usize,
    },
    /// Fewer than two particles; moments are undefined.
    DegenerateEnsemble,
    /// Step does not divide the horizon within rounding.
    BadGrid {
        horizon: f64,
        step: f64,
    },
    /// Terminal covariance is not SPD.
    TerminalNotSpd,
    /// Empirical covariance could not be inverted, even after jitter.
    SingularCovariance {
        step_index: usize,
    },
    /// Particle states left the representable range.
    Diverged {
        step_index: usize,
    },
    /// Snapshot bytes do not parse.
    BadSnapshot(String),
    Io(std::io::Error),
    Riccati(RiccatiError),
    Model(ModelError),
}

impl fmt::Display for EnkfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnkfError::TooFewParticles { n, min } => {
                write!(f, "need at least {min} particles, got {n}")
            }
            EnkfError::DegenerateEnsemble => write!(f, "ensemble has fewer than two particles"),
            EnkfError::BadGrid { horizon, step } => {
                write!(f, "step {step} does not divide horizon {horizon}")
            }
            EnkfError::TerminalNotSpd => write!(f, "terminal covariance is not SPD"),
            EnkfError::SingularCovariance { step_index } => {
                write!(f, "empirical covariance singular at step {step_index}")
            }
            EnkfError::Diverged { step_index } => {
                write!(f, "particle states diverged at step {step_index}")
            }
            EnkfError::BadSnapshot(why) => write!(f, "bad snapshot: {why}"),
            EnkfError::Io(e) => write!(f, "io error: {e}"),
            EnkfError::Riccati(e) => write!(f, "{e}"),
            EnkfError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EnkfError {}

impl From<RiccatiError> for EnkfError {
    fn from(e: RiccatiError) -> Self {
        EnkfError::Riccati(e)
    }
}

impl From<ModelError> for EnkfError {
    fn from(e: ModelError) -> Self {
        EnkfError::Model(e)
    }
}

impl From<std::io::Error> for EnkfError {
    fn from(e: std::io::Error) -> Self {
        EnkfError::Io(e)
    }
}

/// Particle states at one time index.
///
/// Each particle carries the id that keys its noise substreams, so permuting
/// particles (states and ids together) only relabels them.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// One particle per column, `d × N`.
    states: DMatrix<f64>,
    particle_ids: Vec<u64>,
    step_index: usize,
}

impl Ensemble {
    pub fn new(
        states: DMatrix<f64>,
        particle_ids: Vec<u64>,
        step_index: usize,
    ) -> Result<Self, EnkfError> {
        let (d, n) = (states.nrows(), states.ncols());
        if n < d + 1 {
            return Err(EnkfError::TooFewParticles { n, min: d + 1 });
        }
        assert_eq!(particle_ids.len(), n, "one id per particle");
        Ok(Self {
            states,
            particle_ids,
            step_index,
        })
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn particle_ids(&self) -> &[u64] {
        &self.particle_ids
    }

    /// Relabel particles by `perm`: new particle `j` is old particle
    /// `perm[j]`, keeping its id (and therefore its noise substreams).
    pub fn permuted(&self, perm: &[usize]) -> Ensemble {
        assert_eq!(perm.len(), self.len());
        let mut states = DMatrix::zeros(self.dim(), self.len());
        let mut ids = vec![0u64; self.len()];
        for (j, &src) in perm.iter().enumerate() {
            states.set_column(j, &self.states.column(src));
            ids[j] = self.particle_ids[src];
        }
        Ensemble {
            states,
            particle_ids: ids,
            step_index: self.step_index,
        }
    }
}

/// Run parameters for the offline filter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkfConfig {
    pub n_particles: usize,
    /// Simulation horizon in seconds.
    pub horizon: f64,
    /// Simulation step in seconds.
    pub tau: f64,
    pub seed: u64,
    /// Extra covariance regularization added as `jitter · I` before every
    /// inversion. Zero by default; the rescue jitter still applies.
    pub jitter: f64,
}

impl EnkfConfig {
    pub fn new(n_particles: usize, horizon: f64, tau: f64, seed: u64) -> Self {
        Self {
            n_particles,
            horizon,
            tau,
            seed,
            jitter: 0.0,
        }
    }

    fn grid_steps(&self) -> Result<usize, EnkfError> {
        if !(self.horizon.is_finite()
            && self.horizon > 0.0
            && self.tau.is_finite()
            && self.tau > 0.0)
        {
            return Err(EnkfError::BadGrid {
                horizon: self.horizon,
                step: self.tau,
            });
        }
        let steps = (self.horizon / self.tau).round();
        if steps < 1.0 || (steps * self.tau - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(EnkfError::BadGrid {
                horizon: self.horizon,
                step: self.tau,
            });
        }
        Ok(steps as usize)
    }
}

/// Recorded trajectories of the empirical moments and the recovered primal
/// matrix, plus the ensemble left at the initial time.
#[derive(Debug, Clone)]
pub struct EnkfOutput {
    times: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    /// `P_k` recovered from `S_k`; `None` where `S_k` was not invertible.
    primals: Vec<Option<DMatrix<f64>>>,
    final_ensemble: Ensemble,
    /// Covariance inversions performed by the particle dynamics. Stays zero
    /// on paths whose coupling never needs `S⁻¹` (risk-seeking LEQG, or
    /// noise-free models).
    dynamics_inversions: u64,
}

impl EnkfOutput {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mean_at(&self, k: usize) -> &DVector<f64> {
        &self.means[k]
    }

    pub fn covariance_at(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    pub fn primal_at(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.primals[k].as_ref()
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn primals(&self) -> &[Option<DMatrix<f64>>] {
        &self.primals
    }

    /// Recovered average-cost matrix: the initial-time primal.
    pub fn p_bar(&self) -> Option<&DMatrix<f64>> {
        self.primal_at(0)
    }

    pub fn final_ensemble(&self) -> &Ensemble {
        &self.final_ensemble
    }

    pub fn dynamics_inversions(&self) -> u64 {
        self.dynamics_inversions
    }

    /// Wide CSV: per step `t`, mean components, covariance entries, primal
    /// entries (blank when the primal is undefined).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.means[0].len();
        write!(w, "t")?;
        for i in 0..d {
            write!(w, ",n_{i}")?;
        }
        for i in 0..d {
            for j in 0..d {
                write!(w, ",s_{i}_{j}")?;
            }
        }
        for i in 0..d {
            for j in 0..d {
                write!(w, ",p_{i}_{j}")?;
            }
        }
        writeln!(w)?;
        for k in 0..self.len() {
            write!(w, "{}", self.times[k])?;
            for i in 0..d {
                write!(w, ",{}", self.means[k][i])?;
            }
            let s = &self.covariances[k];
            for i in 0..d {
                for j in 0..d {
                    write!(w, ",{}", s[(i, j)])?;
                }
            }
            match &self.primals[k] {
                Some(p) => {
                    for i in 0..d {
                        for j in 0..d {
                            write!(w, ",{}", p[(i, j)])?;
                        }
                    }
                }
                None => {
                    for _ in 0..d * d {
                        write!(w, ",")?;
                    }
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Compact little-endian binary snapshot, suitable for resuming online
    /// control without rerunning the filter.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.means[0].len() as u32;
        let k = self.len() as u32;
        let n = self.final_ensemble.len() as u32;
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        w.write_all(&k.to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&self.dynamics_inversions.to_le_bytes())?;
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        for m in &self.means {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for s in &self.covariances {
            for v in s.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for p in &self.primals {
            match p {
                Some(p) => {
                    w.write_all(&[1u8])?;
                    for v in p.iter() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                None => w.write_all(&[0u8])?,
            }
        }
        w.write_all(&(self.final_ensemble.step_index as u64).to_le_bytes())?;
        for id in &self.final_ensemble.particle_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for v in self.final_ensemble.states.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, EnkfError> {
        fn read_u32<R: Read>(r: &mut R) -> Result<u32, EnkfError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn read_u64<R: Read>(r: &mut R) -> Result<u64, EnkfError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn read_f64<R: Read>(r: &mut R) -> Result<f64, EnkfError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(EnkfError::BadSnapshot("magic mismatch".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(EnkfError::BadSnapshot(format!(
                "unsupported version {version}"
            )));
        }
        let d = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let dynamics_inversions = read_u64(&mut r)?;
        let mut times = Vec::with_capacity(k);
        for _ in 0..k {
            times.push(read_f64(&mut r)?);
        }
        let mut means = Vec::with_capacity(k);
        for _ in 0..k {
            let mut m = DVector::zeros(d);
            for i in 0..d {
                m[i] = read_f64(&mut r)?;
            }
            means.push(m);
        }
        let mut covariances = Vec::with_capacity(k);
        for _ in 0..k {
            let mut s = DMatrix::zeros(d, d);
            for idx in 0..d * d {
                s[idx] = read_f64(&mut r)?;
            }
            covariances.push(s);
        }
        let mut primals = Vec::with_capacity(k);
        for _ in 0..k {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            if flag[0] == 1 {
                let mut p = DMatrix::zeros(d, d);
                for idx in 0..d * d {
                    p[idx] = read_f64(&mut r)?;
                }
                primals.push(Some(p));
            } else {
                primals.push(None);
            }
        }
        let step_index = read_u64(&mut r)? as usize;
        let mut particle_ids = Vec::with_capacity(n);
        for _ in 0..n {
            particle_ids.push(read_u64(&mut r)?);
        }
        let mut states = DMatrix::zeros(d, n);
        for idx in 0..d * n {
            states[idx] = read_f64(&mut r)?;
        }
        Ok(EnkfOutput {
            times,
            means,
            covariances,
            primals,
            final_ensemble: Ensemble {
                states,
                particle_ids,
                step_index,
            },
            dynamics_inversions,
        })
    }
}

/// Draw `n` i.i.d. particles from `N(0, S_T)` via the Cholesky factor of
/// `S_T`, one substream per particle.
pub fn sample_terminal(
    n: usize,
    s_terminal: &DMatrix<f64>,
    seed: u64,
    step_index: usize,
) -> Result<Ensemble, EnkfError> {
    let d = s_terminal.nrows();
    if n < d + 1 {
        return Err(EnkfError::TooFewParticles { n, min: d + 1 });
    }
    let chol = linalg::try_cholesky(s_terminal).ok_or(EnkfError::TerminalNotSpd)?;
    let l = chol.l();
    let mut states = DMatrix::zeros(d, n);
    let mut z = vec![0.0f64; d];
    for i in 0..n {
        let mut stream = rng::substream(seed, i as u64, step_index as u64, Channel::Terminal);
        rng::fill_standard_normal(&mut stream, &mut z);
        let zv = DVector::from_column_slice(&z);
        states.set_column(i, &(&l * zv));
    }
    Ensemble::new(states, (0..n as u64).collect(), step_index)
}

/// Empirical mean and unbiased covariance of the particle columns.
///
/// The mean uses fixed-order pairwise summation; the covariance is a single
/// deterministic rank-`N` product. Neither depends on the worker count.
pub fn mean_and_covariance(
    states: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), EnkfError> {
    let n = states.ncols();
    if n < 2 {
        return Err(EnkfError::DegenerateEnsemble);
    }
    let mean = linalg::column_mean(states);
    let mut centered = states.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = DMatrix::zeros(states.nrows(), states.nrows());
    cov.gemm(
        1.0 / (n as f64 - 1.0),
        &centered,
        &centered.transpose(),
        0.0,
    );
    linalg::symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Mean, covariance `S`, and state-output cross moment `L` of an ensemble.
pub type EnsembleMoments = (DVector<f64>, DMatrix<f64>, DMatrix<f64>);

/// Empirical mean, covariance `S`, and state-output cross moment `L`.
///
/// `L` is accumulated independently from its own sum; the algebraic identity
/// `L = S Cᵀ` then holds to rounding and is asserted in debug builds.
pub fn empirical_moments(
    ensemble: &Ensemble,
    c: &DMatrix<f64>,
) -> Result<EnsembleMoments, EnkfError> {
    let (mean, cov) = mean_and_covariance(&ensemble.states)?;
    let n = ensemble.len();
    let mut centered = ensemble.states.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let out_centered = c * &centered;
    let mut cross = DMatrix::zeros(ensemble.dim(), c.nrows());
    cross.gemm(
        1.0 / (n as f64 - 1.0),
        &centered,
        &out_centered.transpose(),
        0.0,
    );
    debug_assert!({
        let direct = &cov * c.transpose();
        (&cross - &direct).norm() <= 1e-10 * (1.0 + direct.norm())
    });
    Ok((mean, cov, cross))
}

/// Covariance of the exploration input: `R⁻¹` for LQG, `(|θ|R)⁻¹` for LEQG.
///
/// The LEQG scaling is what makes the injected control energy match the
/// `(D − θΣ)/|θ|` constant term of the dual flow.
pub fn exploration_covariance(problem: &LqProblem) -> Result<DMatrix<f64>, EnkfError> {
    let r_inv = linalg::spd_inverse(problem.cost().r())
        .ok_or(EnkfError::Model(ModelError::SingularMatrix { what: "R" }))?;
    Ok(match problem.cost().kind() {
        CostKind::Lqg => r_inv,
        CostKind::Leqg { theta } => r_inv / theta.abs(),
    })
}

/// The two coefficient matrices of the mean-field coupling at one step.
///
/// The coupling applied to a particle at `z` is
/// `M_cost (z + n) + M_noise (z − n)` where `M_cost = κ/2 · S CᵀC` and
/// `M_noise` is `½ Σ S⁻¹` (LQG), `Σ S⁻¹` (LEQG θ>0) or zero (LEQG θ<0).
/// Only `M_noise` needs the covariance inverse; constructing it is the one
/// instrumented inversion site of the particle dynamics.
pub struct MeanFieldOperator {
    m_cost: DMatrix<f64>,
    m_noise: Option<DMatrix<f64>>,
}

impl MeanFieldOperator {
    pub fn new(
        problem: &LqProblem,
        s: &DMatrix<f64>,
        jitter: f64,
        step_index: usize,
        inversions: &mut u64,
    ) -> Result<Self, EnkfError> {
        let ctc = problem.cost().state_weight();
        let sigma_cov = problem.dynamics().noise_covariance();
        Self::from_parts(
            problem.cost().kind(),
            &ctc,
            &sigma_cov,
            s,
            jitter,
            step_index,
            inversions,
        )
    }

    /// As `new`, but with `CᵀC` and `Σ` already formed (the hot path).
    pub fn from_parts(
        kind: CostKind,
        ctc: &DMatrix<f64>,
        sigma_cov: &DMatrix<f64>,
        s: &DMatrix<f64>,
        jitter: f64,
        step_index: usize,
        inversions: &mut u64,
    ) -> Result<Self, EnkfError> {
        let (cost_coef, noise_coef) = match kind {
            CostKind::Lqg => (0.5, 0.5),
            CostKind::Leqg { theta } if theta > 0.0 => (theta / 2.0, 1.0),
            CostKind::Leqg { theta } => (theta.abs() / 2.0, 0.0),
        };
        let m_cost = cost_coef * s * ctc;
        let noise_is_zero = noise_coef == 0.0 || sigma_cov.iter().all(|&v| v == 0.0);
        let m_noise = if noise_is_zero {
            None
        } else {
            let s_inv = invert_covariance(s, jitter, step_index, inversions)?;
            Some(noise_coef * sigma_cov * s_inv)
        };
        Ok(Self { m_cost, m_noise })
    }

    /// Coupling vector for a particle at `z` given the ensemble mean `n`.
    pub fn apply(&self, z: &DVector<f64>, mean: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.m_cost * (z + mean);
        if let Some(m_noise) = &self.m_noise {
            out += m_noise * (z - mean);
        }
        out
    }

    /// Split the affine coupling `M_cost(z+n) + M_noise(z−n)` into the matrix
    /// applied to `z` and the constant vector, for batched propagation.
    fn affine_parts(&self, mean: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        match &self.m_noise {
            Some(m_noise) => (&self.m_cost + m_noise, (&self.m_cost - m_noise) * mean),
            None => (self.m_cost.clone(), &self.m_cost * mean),
        }
    }
}

fn invert_covariance(
    s: &DMatrix<f64>,
    jitter: f64,
    step_index: usize,
    inversions: &mut u64,
) -> Result<DMatrix<f64>, EnkfError> {
    let d = s.nrows();
    let base = if jitter > 0.0 {
        s + DMatrix::from_diagonal_element(d, d, jitter)
    } else {
        s.clone()
    };
    *inversions += 1;
    if let Some(inv) = linalg::spd_inverse(&base) {
        return Ok(inv);
    }
    // One rescue attempt with trace-scaled jitter before giving up.
    let rescue = RESCUE_JITTER * base.trace() / d as f64;
    *inversions += 1;
    linalg::spd_inverse(&(base + DMatrix::from_diagonal_element(d, d, rescue)))
        .ok_or(EnkfError::SingularCovariance { step_index })
}

/// Mean-field coupling at a single point (see [`MeanFieldOperator`]).
pub fn mean_field_term(
    z: &DVector<f64>,
    mean: &DVector<f64>,
    s: &DMatrix<f64>,
    problem: &LqProblem,
) -> Result<DVector<f64>, EnkfError> {
    let mut scratch = 0;
    let op = MeanFieldOperator::new(problem, s, 0.0, 0, &mut scratch)?;
    Ok(op.apply(z, mean))
}

/// One black-box simulator call: the state increment
/// `(A x + B a) τ + σ ΔW` with `ΔW ~ N(0, 𝕀 τ)` drawn from `rng`.
pub fn simulator_step(
    x: &DVector<f64>,
    a: &DVector<f64>,
    tau: f64,
    rng: &mut ChaCha8Rng,
    dynamics: &LinearDynamics,
) -> DVector<f64> {
    let mut z = vec![0.0f64; dynamics.dim_noise()];
    rng::fill_standard_normal(rng, &mut z);
    let dw = tau.sqrt() * DVector::from_column_slice(&z);
    (dynamics.a() * x + dynamics.b() * a) * tau + dynamics.sigma() * dw
}

/// Everything the backward recursion needs per run, precomputed.
struct Propagation {
    kind: CostKind,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    ctc: DMatrix<f64>,
    sigma_cov: DMatrix<f64>,
    /// Cholesky factor of the exploration covariance.
    eta_factor: DMatrix<f64>,
    tau: f64,
    jitter: f64,
    seed: u64,
}

impl Propagation {
    fn new(problem: &LqProblem, config: &EnkfConfig) -> Result<Self, EnkfError> {
        let cov_eta = exploration_covariance(problem)?;
        let eta_factor: Cholesky<f64, Dyn> =
            linalg::try_cholesky(&cov_eta).ok_or(EnkfError::TerminalNotSpd)?;
        Ok(Self {
            kind: problem.cost().kind(),
            a: problem.dynamics().a().clone(),
            b: problem.dynamics().b().clone(),
            sigma: problem.dynamics().sigma().clone(),
            ctc: problem.cost().state_weight(),
            sigma_cov: problem.dynamics().noise_covariance(),
            eta_factor: eta_factor.l(),
            tau: config.tau,
            jitter: config.jitter,
            seed: config.seed,
        })
    }

    /// Backward step `Y_{k−1} = Y_k − ΔY` for the whole ensemble at once.
    ///
    /// `ΔY` column `i` equals `𝒮(Y^i, Δη^i/τ, τ) + 𝒜(Y^i) τ`; the division
    /// by `τ` inside the simulator call cancels the `τ` it applies to the
    /// control, so the exploration enters as the Brownian increment `B Δη`.
    fn step_back(
        &self,
        ensemble: &mut Ensemble,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        inversions: &mut u64,
    ) -> Result<(), EnkfError> {
        let k = ensemble.step_index;
        assert!(k > 0, "already at the initial time");
        let op = MeanFieldOperator::from_parts(
            self.kind,
            &self.ctc,
            &self.sigma_cov,
            cov,
            self.jitter,
            k,
            inversions,
        )?;
        let (coupling, constant) = op.affine_parts(mean);

        let d = ensemble.dim();
        let n = ensemble.len();
        let m = self.b.ncols();
        let q = self.sigma.ncols();
        let sqrt_tau = self.tau.sqrt();

        // Per-particle noise, keyed by (seed, id, step, channel).
        let mut z_eta = DMatrix::zeros(m, n);
        let mut z_w = DMatrix::zeros(q, n);
        let mut buf = vec![0.0f64; m.max(q)];
        for (i, &id) in ensemble.particle_ids.iter().enumerate() {
            let mut stream = rng::substream(self.seed, id, k as u64, Channel::Exploration);
            rng::fill_standard_normal(&mut stream, &mut buf[..m]);
            for r in 0..m {
                z_eta[(r, i)] = buf[r];
            }
            let mut stream = rng::substream(self.seed, id, k as u64, Channel::Process);
            rng::fill_standard_normal(&mut stream, &mut buf[..q]);
            for r in 0..q {
                z_w[(r, i)] = buf[r];
            }
        }

        // Delta = tau*(A + coupling)·Y + tau·constant·1ᵀ + B·Δη + σ·ΔW.
        let drift = &self.a + &coupling;
        let mut delta = DMatrix::zeros(d, n);
        delta.gemm(self.tau, &drift, &ensemble.states, 0.0);
        let eta = &self.eta_factor * z_eta * sqrt_tau;
        delta.gemm(1.0, &self.b, &eta, 1.0);
        delta.gemm(sqrt_tau, &self.sigma, &z_w, 1.0);
        for mut col in delta.column_iter_mut() {
            col.axpy(self.tau, &constant, 1.0);
        }

        ensemble.states -= delta;
        ensemble.step_index = k - 1;
        if !ensemble
            .states
            .iter()
            .all(|v| v.is_finite() && v.abs() < 1e12)
        {
            return Err(EnkfError::Diverged { step_index: k - 1 });
        }
        Ok(())
    }
}

/// Run the backward recursion from a terminal ensemble sampled from the
/// problem's dual terminal covariance.
pub fn run_offline(problem: &LqProblem, config: &EnkfConfig) -> Result<EnkfOutput, EnkfError> {
    let steps = config.grid_steps()?;
    let s_terminal = riccati::dual_terminal(problem)?;
    let ensemble = sample_terminal(config.n_particles, &s_terminal, config.seed, steps)?;
    run_offline_from(problem, config, ensemble)
}

/// Run the backward recursion from the given terminal ensemble. The
/// ensemble's step index must match the grid implied by the config.
pub fn run_offline_from(
    problem: &LqProblem,
    config: &EnkfConfig,
    mut ensemble: Ensemble,
) -> Result<EnkfOutput, EnkfError> {
    let steps = config.grid_steps()?;
    assert_eq!(
        ensemble.step_index(),
        steps,
        "terminal ensemble step index must equal the grid step count"
    );
    let d = problem.dim_state();
    if ensemble.dim() != d {
        return Err(EnkfError::Model(ModelError::DimensionMismatch {
            what: "ensemble",
            expected: (d, ensemble.len()),
            got: (ensemble.dim(), ensemble.len()),
        }));
    }
    let prop = Propagation::new(problem, config)?;
    let mut inversions = 0u64;

    let mut times = vec![0.0f64; steps + 1];
    let mut means = vec![DVector::zeros(0); steps + 1];
    let mut covariances = vec![DMatrix::zeros(0, 0); steps + 1];
    for (k, t) in times.iter_mut().enumerate() {
        *t = k as f64 * config.tau;
    }

    for k in (1..=steps).rev() {
        debug_assert_eq!(ensemble.step_index(), k);
        let (mean, cov) = mean_and_covariance(&ensemble.states)?;
        prop.step_back(&mut ensemble, &mean, &cov, &mut inversions)?;
        means[k] = mean;
        covariances[k] = cov;
    }
    let (mean, cov) = mean_and_covariance(&ensemble.states)?;
    means[0] = mean;
    covariances[0] = cov;

    // Primal recovery is output post-processing, separate from the dynamics
    // (and from its inversion counter): the risk-seeking path must complete
    // even if some S_k cannot be inverted.
    let primals = covariances
        .iter()
        .map(|s| riccati::s_to_p(s, problem).ok())
        .collect();

    Ok(EnkfOutput {
        times,
        means,
        covariances,
        primals,
        final_ensemble: ensemble,
        dynamics_inversions: inversions,
    })
}
