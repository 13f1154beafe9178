//! Step schedules, ADAGRAD, natural-parameter blending, PSD projection and
//! guarded Cholesky steps.

use alloc::vec::Vec;
use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::expfam::GaussianNatural;
use crate::linalg::{self, Matrix, Vector};
#[allow(unused_imports)]
use num_traits::Float;

/// Maximum number of step halvings before a Cholesky step is rejected.
pub const MAX_HALVINGS: usize = 30;
pub const ADAGRAD_EPSILON: f64 = 1e-8;
pub const ADAGRAD_LEARNING_RATE: f64 = 1.0;

/// Update engine for the global variational parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Engine {
    /// Natural-gradient steps on mean and covariance.
    McSsvi,
    /// Standard-gradient steps on the mean and Cholesky factor.
    SDsvi,
    /// Natural-gradient covariance, standard-gradient mean.
    HMcSsvi,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::McSsvi, Engine::SDsvi, Engine::HMcSsvi];

    pub fn name(&self) -> &'static str {
        match self {
            Engine::McSsvi => "mcssvi",
            Engine::SDsvi => "sdsvi",
            Engine::HMcSsvi => "hmcssvi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Engine::ALL.into_iter().find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScheduleKind {
    /// `ρ_t = 1/(t + offset)`, `t = 1, 2, ...`.
    OneOverT { offset: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepSchedule {
    kind: ScheduleKind,
    t: u64,
}

impl StepSchedule {
    pub fn one_over_t(offset: f64) -> Result<Self> {
        if !(offset >= 0.0) {
            return Err(Error::InvalidParameter("schedule offset must be nonnegative"));
        }
        Ok(StepSchedule { kind: ScheduleKind::OneOverT { offset }, t: 0 })
    }

    pub fn constant(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidParameter("constant step must lie in (0, 1]"));
        }
        Ok(StepSchedule { kind: ScheduleKind::Constant(rho), t: 0 })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps emitted so far.
    pub fn count(&self) -> u64 {
        self.t
    }

    /// Emit the next step size.
    pub fn next_rho(&mut self) -> f64 {
        self.t += 1;
        match self.kind {
            ScheduleKind::OneOverT { offset } => (1.0 / (self.t as f64 + offset)).min(1.0),
            ScheduleKind::Constant(rho) => rho,
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { kind: ScheduleKind::OneOverT { offset: 0.0 }, t: 0 }
    }
}

/// Settings shared by the stochastic trainers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub engine: Engine,
    /// Examples per minibatch; values ≥ N give full-batch updates.
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub schedule: StepSchedule,
    pub learning_rate: f64,
}

impl TrainConfig {
    pub fn new(engine: Engine, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            engine,
            batch_size,
            mc_samples: crate::likelihoods::DEFAULT_MC_SAMPLES,
            seed,
            schedule: StepSchedule::default(),
            learning_rate: ADAGRAD_LEARNING_RATE,
        }
    }
}

/// Per-coordinate ADAGRAD accumulator for an ascent direction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdagradState {
    acc: Vec<f64>,
    learning_rate: f64,
    epsilon: f64,
}

impl AdagradState {
    pub fn new(dim: usize) -> Self {
        Self::with_rate(dim, ADAGRAD_LEARNING_RATE, ADAGRAD_EPSILON)
    }

    pub fn with_rate(dim: usize, learning_rate: f64, epsilon: f64) -> Self {
        AdagradState { acc: alloc::vec![0.0; dim], learning_rate, epsilon }
    }

    pub fn dim(&self) -> usize {
        self.acc.len()
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.acc
    }

    /// Returns `δ_j = η g_j / (ε + √(acc_j + g_j²))` and folds `g` into the
    /// accumulator. Non-finite gradients leave the state untouched.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.acc.len() {
            return Err(Error::DimensionMismatch { expected: self.acc.len(), found: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adagrad gradient"));
        }
        Ok(grad
            .iter()
            .zip(self.acc.iter_mut())
            .map(|(g, a)| {
                *a += g * g;
                if *g == 0.0 {
                    0.0
                } else {
                    self.learning_rate * g / (self.epsilon + a.sqrt())
                }
            })
            .collect())
    }

    pub fn step_vector(&mut self, grad: &Vector) -> Result<Vector> {
        Ok(Vector::from_vec(self.step(grad.as_slice())?))
    }
}

/// `(1−ρ)θ + ρF̂` on Gaussian natural parameters.
pub fn natural_blend(theta: &GaussianNatural, target: &GaussianNatural, rho: f64) -> Result<GaussianNatural> {
    check_rho(rho)?;
    if theta.shift.len() != target.shift.len() || theta.half_precision.shape() != target.half_precision.shape() {
        return Err(Error::DimensionMismatch { expected: theta.shift.len(), found: target.shift.len() });
    }
    Ok(GaussianNatural {
        shift: &theta.shift * (1.0 - rho) + &target.shift * rho,
        half_precision: linalg::symmetrized(&theta.half_precision * (1.0 - rho) + &target.half_precision * rho),
    })
}

/// Scalar blend, used for the Rayleigh natural parameter.
pub fn natural_blend_scalar(theta: f64, target: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok((1.0 - rho) * theta + rho * target)
}

/// Blend of two symmetric matrices (precision-style updates).
pub fn blend_matrix(current: &Matrix, target: &Matrix, rho: f64) -> Result<Matrix> {
    check_rho(rho)?;
    if current.shape() != target.shape() {
        return Err(Error::DimensionMismatch { expected: current.nrows(), found: target.nrows() });
    }
    Ok(linalg::symmetrized(current * (1.0 - rho) + target * rho))
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::InvalidParameter("step size must lie in [0, 1]"))
    }
}

/// Eigenvalue clamp onto the PSD cone.
pub fn psd_project(m: &Matrix) -> Result<Matrix> {
    clamp_spectrum(m, 0.0)
}

/// Eigenvalue clamp at `floor`; used as the positive-definiteness guard.
pub fn clamp_spectrum(m: &Matrix, floor: f64) -> Result<Matrix> {
    if !linalg::all_finite(m) {
        return Err(Error::NonFinite("matrix to project"));
    }
    let mut eig = SymmetricEigen::new(linalg::symmetrized(m.clone()));
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(linalg::symmetrized(m.clone()));
    }
    eig.eigenvalues.apply(|l| *l = l.max(floor));
    Ok(linalg::symmetrized(eig.recompose()))
}

/// Smallest eigenvalue allowed on a precision after a natural step, relative
/// to the prior precision scale.
pub const PRECISION_FLOOR: f64 = 1e-10;

/// Enforces positive definiteness on an updated precision; returns the
/// (possibly projected) matrix and whether the guard fired.
pub fn guard_precision(p: Matrix) -> Result<(Matrix, bool)> {
    if !linalg::all_finite(&p) {
        return Err(Error::NonFinite("precision"));
    }
    if linalg::lower_cholesky(&p).is_ok() {
        return Ok((p, false));
    }
    let scale = p.diagonal().iter().fold(0.0f64, |a, &d| a.max(d.abs())).max(1.0);
    log::warn!("precision lost positive definiteness; projecting");
    Ok((clamp_spectrum(&p, PRECISION_FLOOR * scale)?, true))
}

/// `C + ρ·triu(G)`, halving `ρ` while any diagonal entry of the result is
/// nonpositive or the factor is too ill-conditioned to be accepted as a
/// covariance factor. Returns the new factor and the step actually taken.
pub fn cholesky_grad_step(c: &Matrix, grad: &Matrix, rho: f64) -> Result<(Matrix, f64)> {
    if c.shape() != grad.shape() {
        return Err(Error::DimensionMismatch { expected: c.nrows(), found: grad.nrows() });
    }
    if !linalg::all_finite(grad) {
        return Err(Error::NonFinite("cholesky gradient"));
    }
    let step = linalg::triu(grad);
    let mut r = rho;
    for _ in 0..=MAX_HALVINGS {
        let next = c + &step * r;
        if next.diagonal().iter().all(|&d| d > 0.0) && linalg::condition_estimate(&next) <= linalg::CONDITION_LIMIT {
            return Ok((next, r));
        }
        r *= 0.5;
    }
    Err(Error::StepRejected { halvings: MAX_HALVINGS })
}
