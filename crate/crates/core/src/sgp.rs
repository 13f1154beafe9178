//! Sparse GP regression with inducing values `w` at inputs `Z`.
//!
//! Every solver produces `q(w) = N(m, S)` in the form `S = K B⁻¹ K`,
//! `m = K α` with `K = K_ww`, so predictions and bounds are computed from
//! `α = K⁻¹m` and `B⁻¹ = K⁻¹SK⁻¹` without forming `K⁻¹`.

use alloc::vec::Vec;

use nalgebra::{Cholesky, Dyn, SymmetricEigen};

use crate::data::DesignData;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::optim;
use crate::special::LN_2PI;
#[allow(unused_imports)]
use num_traits::Float;

/// Relative jitter added to `K_ww`.
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelSpec {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl KernelSpec {
    pub fn new(length_scale: f64, signal_var: f64, noise_var: f64) -> Result<Self> {
        for v in [length_scale, signal_var, noise_var] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter("kernel parameters must be positive"));
            }
        }
        Ok(KernelSpec { length_scale, signal_var, noise_var })
    }

    /// `s² exp(−‖a − b‖² / 2ℓ²)` between rows `i` of `a` and `j` of `b`.
    pub fn eval(&self, a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
        let d2: f64 = (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum();
        self.signal_var * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }

    pub fn cross(&self, a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.nrows(), b.nrows(), |i, j| self.eval(a, i, b, j))
    }

    fn jitter(&self) -> f64 {
        JITTER * self.signal_var
    }
}

/// Kernel blocks shared by all solvers for one `(X, Z, kernel)` triple.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub kernel: KernelSpec,
    pub z: Matrix,
    /// `K_ww` with jitter.
    pub kww: Matrix,
    kww_chol: Cholesky<f64, Dyn>,
    /// `K_wf`, `M × N`.
    pub kwf: Matrix,
    /// `K_ii − Q_ii`, clamped at zero.
    pub residual_diag: Vec<f64>,
}

impl Blocks {
    pub fn new(x: &Matrix, z: &Matrix, kernel: KernelSpec) -> Result<Self> {
        if x.ncols() != z.ncols() {
            return Err(Error::DimensionMismatch { expected: z.ncols(), found: x.ncols() });
        }
        let mut kww = kernel.cross(z, z);
        for i in 0..kww.nrows() {
            kww[(i, i)] += kernel.jitter();
        }
        let kww_chol = kww.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let kwf = kernel.cross(z, x);
        let v = kww_chol.l().solve_lower_triangular(&kwf).ok_or(Error::NotPositiveDefinite)?;
        let residual_diag = (0..x.nrows())
            .map(|i| (kernel.signal_var - v.column(i).norm_squared()).max(0.0))
            .collect();
        Ok(Blocks { kernel, z: z.clone(), kww, kww_chol, kwf, residual_diag })
    }

    pub fn n_inducing(&self) -> usize {
        self.kww.nrows()
    }

    pub fn len(&self) -> usize {
        self.kwf.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.kwf.ncols() == 0
    }

    /// `cᵢ = K_ii − Q_ii + σ²`.
    pub fn site_variance(&self, i: usize) -> f64 {
        self.residual_diag[i] + self.kernel.noise_var
    }

    pub fn log_det_kww(&self) -> f64 {
        2.0 * self.kww_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// State from `B = K + G` and `g`, with `S = K B⁻¹ K`, `m = K B⁻¹ g`.
    fn state_from_system(&self, b: Matrix, g: &Vector) -> Result<SgpState> {
        let mut b = linalg::symmetrized(b);
        let chol = match b.clone().cholesky() {
            Some(c) => c,
            None => {
                let scale = b.diagonal().iter().fold(0.0f64, |a, &d| a.max(d.abs())).max(1.0);
                log::warn!("sgp system lost positive definiteness; projecting");
                b = optim::clamp_spectrum(&b, optim::PRECISION_FLOOR * scale)?;
                b.clone().cholesky().ok_or(Error::NotPositiveDefinite)?
            }
        };
        let alpha = chol.solve(g);
        let inner = linalg::symmetrized(chol.inverse());
        let log_det_b = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(SgpState {
            z: self.z.clone(),
            kernel: self.kernel,
            mean: &self.kww * &alpha,
            cov: linalg::symmetrized(&self.kww * &inner * &self.kww),
            alpha,
            inner,
            log_det_cov: 2.0 * self.log_det_kww() - log_det_b,
        })
    }

    /// Solution for diagonal site precisions `wᵢ` and pseudo-targets `tᵢ`:
    /// `S = (K⁻¹ + Σ wᵢ hᵢhᵢᵀ)⁻¹`, `m = S Σ wᵢ tᵢ hᵢ` with `hᵢ = K⁻¹k_i`.
    pub fn diagonal_solve(&self, weights: &[f64], targets: &[f64]) -> Result<SgpState> {
        let mut b = self.kww.clone();
        let mut g = Vector::zeros(self.n_inducing());
        for i in 0..self.len() {
            let k = self.kwf.column(i).into_owned();
            linalg::add_outer(&mut b, &k, weights[i]);
            g.axpy(weights[i] * targets[i], &k, 1.0);
        }
        self.state_from_system(b, &g)
    }

    /// `q(w)` given explicit moments; used for evaluating arbitrary states.
    pub fn state_from_moments(&self, mean: Vector, cov: Matrix) -> Result<SgpState> {
        let alpha = self.kww_chol.solve(&mean);
        let inner = linalg::symmetrized(self.kww_chol.solve(&self.kww_chol.solve(&cov).transpose()));
        let log_det_cov = linalg::log_det_spd(&cov)?;
        Ok(SgpState { z: self.z.clone(), kernel: self.kernel, mean, cov, alpha, inner, log_det_cov })
    }

    fn site_moments(&self, state: &SgpState, i: usize) -> (f64, f64) {
        let k = self.kwf.column(i);
        (k.dot(&state.alpha), k.dot(&(&state.inner * k)))
    }

    /// `KL(N(m, S) ‖ N(0, K_ww))`.
    pub fn kl(&self, state: &SgpState) -> f64 {
        let m = self.n_inducing() as f64;
        let trace = (&state.inner * &self.kww).trace();
        0.5 * (trace + state.mean.dot(&state.alpha) - m + self.log_det_kww() - state.log_det_cov)
    }

    /// `Λ = K_ff − Q_ff + σ²I`; `σ²` already bounds its spectrum away from zero.
    pub fn full_site_cov(&self, x: &Matrix) -> Result<Matrix> {
        let kff = self.kernel.cross(x, x);
        let v = self.kww_chol.l().solve_lower_triangular(&self.kwf).ok_or(Error::NotPositiveDefinite)?;
        let mut lambda = kff - v.transpose() * v;
        for i in 0..lambda.nrows() {
            lambda[(i, i)] += self.kernel.noise_var;
        }
        Ok(linalg::symmetrized(lambda))
    }
}

/// `q(w)` over the inducing values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgpState {
    pub z: Matrix,
    pub kernel: KernelSpec,
    pub mean: Vector,
    pub cov: Matrix,
    /// `K⁻¹m`.
    pub alpha: Vector,
    /// `K⁻¹SK⁻¹`.
    pub inner: Matrix,
    pub log_det_cov: f64,
}

impl SgpState {
    /// Predictive mean and variance of `y*` at each row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<(f64, f64)>> {
        if x.ncols() != self.z.ncols() {
            return Err(Error::DimensionMismatch { expected: self.z.ncols(), found: x.ncols() });
        }
        let blocks = Blocks::new(x, &self.z, self.kernel)?;
        Ok((0..x.nrows())
            .map(|i| {
                let (mu, v) = blocks.site_moments(self, i);
                (mu, v + blocks.site_variance(i))
            })
            .collect())
    }
}

/// Which solution to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Suboptimal,
    Optimal,
    V1,
    V2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Suboptimal, Method::Optimal, Method::V1, Method::V2];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Suboptimal => "suboptimal",
            Method::Optimal => "optimal",
            Method::V1 => "v1",
            Method::V2 => "v2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Standard collapsed solution: `A = Σ hᵢhᵢᵀ/σ²`, `b = Σ yᵢhᵢ/σ²`.
pub fn suboptimal_solve(blocks: &Blocks, y: &[f64]) -> Result<SgpState> {
    check_len(blocks, y)?;
    let w = alloc::vec![1.0 / blocks.kernel.noise_var; y.len()];
    blocks.diagonal_solve(&w, y)
}

/// Per-point variant: `A = Σ hᵢhᵢᵀ/cᵢ`, `b = Σ yᵢhᵢ/cᵢ`.
pub fn v1_solve(blocks: &Blocks, y: &[f64]) -> Result<SgpState> {
    check_len(blocks, y)?;
    let w: Vec<f64> = (0..y.len()).map(|i| 1.0 / blocks.site_variance(i)).collect();
    blocks.diagonal_solve(&w, y)
}

/// Optimal bound: `A = K⁻¹K_wf Λ⁻¹ K_fw K⁻¹`, `b = K⁻¹K_wf Λ⁻¹ y`. Cubic in `N`.
pub fn optimal_solve(blocks: &Blocks, x: &Matrix, y: &[f64]) -> Result<SgpState> {
    check_len(blocks, y)?;
    let lambda = blocks.full_site_cov(x)?;
    let chol = lambda.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let lw = chol.solve(&blocks.kwf.transpose());
    let b = &blocks.kww + &blocks.kwf * &lw;
    let g = lw.transpose() * Vector::from_column_slice(y);
    blocks.state_from_system(b, &g)
}

/// Coordinate ascent on the per-point predictive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct V2Outcome {
    pub state: SgpState,
    pub objective: f64,
    pub iterations: usize,
    /// Criterion value after each coordinate sweep.
    pub trace: Vec<f64>,
    pub regressions: usize,
    pub converged: bool,
}

pub fn v2_solve(blocks: &Blocks, y: &[f64], max_iters: usize, tol: f64) -> Result<V2Outcome> {
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be at least one"));
    }
    let mut state = v1_solve(blocks, y)?;
    let mut objective = v2_objective(blocks, &state, y);
    let mut best = (state.clone(), objective);
    let mut trace = alloc::vec![objective];
    let mut regressions = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let next = v2_sweep(blocks, &state, y)?;
        let change = (&next.mean - &state.mean).norm() / state.mean.norm().max(1.0)
            + linalg::frobenius_distance(&next.cov, &state.cov) / state.cov.norm().max(1.0);
        let value = v2_objective(blocks, &next, y);
        if value < objective - 1e-12 * objective.abs().max(1.0) {
            regressions += 1;
            log::debug!("v2 objective decreased at sweep {iterations}");
        }
        state = next;
        objective = value;
        trace.push(value);
        if value > best.1 {
            best = (state.clone(), value);
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("v2 coordinate ascent stopped after {max_iters} sweeps without converging");
    }
    Ok(V2Outcome { state: best.0, objective: best.1, iterations, trace, regressions, converged })
}

/// One sweep: the precision moves toward `K⁻¹ + A(m, S)`, halving the step
/// until it stays positive definite and the objective does not drop, then
/// `m` is maximized exactly given `S`.
pub fn v2_sweep(blocks: &Blocks, state: &SgpState, y: &[f64]) -> Result<SgpState> {
    let n = y.len();
    let mut target = blocks.kww.clone();
    for i in 0..n {
        let (mu, s) = blocks.site_moments(state, i);
        let v = blocks.site_variance(i) + s;
        let r = y[i] - mu;
        linalg::add_outer(&mut target, &blocks.kwf.column(i).into_owned(), (v - r * r) / (v * v));
    }
    let target = linalg::symmetrized(target);
    let current = linalg::spd_inverse(&state.inner)?;
    let base = v2_objective(blocks, state, y);
    let mut rho = 1.0;
    for _ in 0..V2_MAX_HALVINGS {
        let b = &current * (1.0 - rho) + &target * rho;
        if b.clone().cholesky().is_some() {
            let next = v2_mean_step(blocks, blocks.state_from_system(b, &Vector::zeros(blocks.n_inducing()))?, y)?;
            if v2_objective(blocks, &next, y) >= base - 1e-12 * base.abs().max(1.0) {
                return Ok(next);
            }
        }
        rho *= 0.5;
    }
    v2_mean_step(blocks, state.clone(), y)
}

const V2_MAX_HALVINGS: usize = 40;

fn v2_mean_step(blocks: &Blocks, with_cov: SgpState, y: &[f64]) -> Result<SgpState> {
    let prec: Vec<f64> = (0..y.len())
        .map(|i| {
            let (_, s) = blocks.site_moments(&with_cov, i);
            1.0 / (blocks.site_variance(i) + s)
        })
        .collect();
    let with_mean = blocks.diagonal_solve(&prec, y)?;
    Ok(SgpState { mean: with_mean.mean, alpha: with_mean.alpha, ..with_cov })
}

fn check_len(blocks: &Blocks, y: &[f64]) -> Result<()> {
    if y.len() != blocks.len() {
        return Err(Error::DimensionMismatch { expected: blocks.len(), found: y.len() });
    }
    if blocks.n_inducing() > y.len() {
        return Err(Error::InvalidParameter("more inducing points than observations"));
    }
    Ok(())
}

fn log_normal(y: f64, mu: f64, v: f64) -> f64 {
    -0.5 * (LN_2PI + v.ln() + (y - mu) * (y - mu) / v)
}

/// Simple structured bound: `Σᵢ E[log N(yᵢ|fᵢ, σ²)] − KL`.
pub fn suboptimal_vlb(blocks: &Blocks, state: &SgpState, y: &[f64]) -> f64 {
    let s2 = blocks.kernel.noise_var;
    let loss: f64 = (0..y.len())
        .map(|i| {
            let (mu, v) = blocks.site_moments(state, i);
            log_normal(y[i], mu, s2) - (v + blocks.residual_diag[i]) / (2.0 * s2)
        })
        .sum();
    loss - blocks.kl(state)
}

/// Optimal structured bound: `E_q[log N(y | Hw, Λ)] − KL`.
pub fn optimal_vlb(blocks: &Blocks, state: &SgpState, x: &Matrix, y: &[f64]) -> Result<f64> {
    let lambda = blocks.full_site_cov(x)?;
    let chol = lambda.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let kfw = blocks.kwf.transpose();
    let r = Vector::from_column_slice(y) - &kfw * &state.alpha;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = y.len() as f64;
    let fit = -0.5 * (n * LN_2PI + log_det + r.dot(&chol.solve(&r)));
    let spread = -0.5 * (chol.solve(&(&kfw * &state.inner * &blocks.kwf))).trace();
    Ok(fit + spread - blocks.kl(state))
}

/// Per-point objective used by the first variant.
pub fn v1_objective(blocks: &Blocks, state: &SgpState, y: &[f64]) -> f64 {
    let loss: f64 = (0..y.len())
        .map(|i| {
            let (mu, v) = blocks.site_moments(state, i);
            let c = blocks.site_variance(i);
            log_normal(y[i], mu, c) - v / (2.0 * c)
        })
        .sum();
    loss - blocks.kl(state)
}

/// `Σᵢ log N(yᵢ | hᵢᵀm, cᵢ + hᵢᵀShᵢ) − KL`.
pub fn v2_objective(blocks: &Blocks, state: &SgpState, y: &[f64]) -> f64 {
    let loss: f64 = (0..y.len())
        .map(|i| {
            let (mu, v) = blocks.site_moments(state, i);
            log_normal(y[i], mu, blocks.site_variance(i) + v)
        })
        .sum();
    loss - blocks.kl(state)
}

/// `(∂/∂m, ∂/∂S)` of the second variant's objective, with `S` entries
/// treated as unconstrained: `−K⁻¹m + d` and `½(S⁻¹ − K⁻¹ − A)`.
pub fn v2_gradients(blocks: &Blocks, state: &SgpState, y: &[f64]) -> Result<(Vector, Matrix)> {
    let m = blocks.n_inducing();
    let mut d = Vector::zeros(m);
    let mut a = Matrix::zeros(m, m);
    for i in 0..y.len() {
        let (mu, s) = blocks.site_moments(state, i);
        let v = blocks.site_variance(i) + s;
        let r = y[i] - mu;
        let h = blocks.kww_chol.solve(&blocks.kwf.column(i).into_owned());
        d.axpy(r / v, &h, 1.0);
        linalg::add_outer(&mut a, &h, (v - r * r) / (v * v));
    }
    let s_inv = linalg::spd_inverse(&state.cov)?;
    let k_inv = blocks.kww_chol.inverse();
    Ok((d - &state.alpha, (s_inv - k_inv - a) * 0.5))
}

/// Test-set summary: mean negative log predictive density and mean squared error.
pub fn evaluate(state: &SgpState, test: &DesignData) -> Result<crate::glm::Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pred = state.predict(&test.x)?;
    let n = test.len() as f64;
    let nll = -pred.iter().zip(&test.y).map(|(&(mu, v), &y)| log_normal(y, mu, v)).sum::<f64>() / n;
    let mse = pred.iter().zip(&test.y).map(|(&(mu, _), &y)| (y - mu) * (y - mu)).sum::<f64>() / n;
    Ok(crate::glm::Evaluation { nll, error: mse })
}

pub fn solve(method: Method, blocks: &Blocks, x: &Matrix, y: &[f64]) -> Result<SgpState> {
    match method {
        Method::Suboptimal => suboptimal_solve(blocks, y),
        Method::Optimal => optimal_solve(blocks, x, y),
        Method::V1 => v1_solve(blocks, y),
        Method::V2 => Ok(v2_solve(blocks, y, DEFAULT_V2_ITERS, DEFAULT_V2_TOL)?.state),
    }
}

pub const DEFAULT_V2_ITERS: usize = 200;
pub const DEFAULT_V2_TOL: f64 = 1e-9;

/// Hyperparameter grid; every axis is scanned in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub length_scales: Vec<f64>,
    pub signal_vars: Vec<f64>,
    pub noise_vars: Vec<f64>,
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

impl Default for Grid {
    /// 20 log-spaced points over `ℓ ∈ [0.1, 50]`, `s² ∈ [0.01, 100]`,
    /// `σ² ∈ [0.01, 1]`.
    fn default() -> Self {
        Grid {
            length_scales: log_spaced(0.1, 50.0, 20),
            signal_vars: log_spaced(0.01, 100.0, 20),
            noise_vars: log_spaced(0.01, 1.0, 20),
        }
    }
}

/// Exact GP log marginal likelihood `log N(y | 0, K + σ²I)`.
pub fn log_marginal_likelihood(x: &Matrix, y: &[f64], kernel: &KernelSpec) -> Result<f64> {
    let mut k = kernel.cross(x, x);
    for i in 0..k.nrows() {
        k[(i, i)] += kernel.noise_var;
    }
    let chol = k.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let yv = Vector::from_column_slice(y);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (yv.dot(&chol.solve(&yv)) + log_det + y.len() as f64 * LN_2PI))
}

/// Grid point with the highest exact log marginal likelihood; ties go to the
/// first point in scan order (length scale outermost, noise innermost).
pub fn grid_search(x: &Matrix, y: &[f64], grid: &Grid) -> Result<KernelSpec> {
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    let n = y.len() as f64;
    let mut best: Option<(f64, KernelSpec)> = None;
    for &l in &grid.length_scales {
        let unit = KernelSpec::new(l, 1.0, 1.0)?.cross(x, x);
        let eig = SymmetricEigen::new(linalg::symmetrized(unit));
        let proj = eig.eigenvectors.transpose() * Vector::from_column_slice(y);
        for &s2 in &grid.signal_vars {
            for &n2 in &grid.noise_vars {
                let mut lml = -0.5 * n * LN_2PI;
                for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                    let v = s2 * lam.max(0.0) + n2;
                    lml -= 0.5 * (proj[k] * proj[k] / v + v.ln());
                }
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, KernelSpec::new(l, s2, n2)?));
                }
            }
        }
    }
    best.map(|(_, k)| k).ok_or(Error::InvalidParameter("empty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn instance(n: usize, m: usize, seed: u64) -> (Matrix, Vec<f64>, Matrix, KernelSpec) {
        let mut r = rng::stream(seed, 0);
        let x = Matrix::from_fn(n, 1, |_, _| 6.0 * rng::standard_normal(&mut r).tanh());
        let y: Vec<f64> = (0..n).map(|i| (x[(i, 0)]).sin() + 0.3 * rng::standard_normal(&mut r)).collect();
        let z = Matrix::from_fn(m, 1, |i, _| -5.0 + 10.0 * i as f64 / (m.max(2) - 1) as f64);
        (x, y, z, KernelSpec::new(1.0, 1.0, 0.1).unwrap())
    }

    #[test]
    fn zero_observations_give_prior() {
        let z = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let k = KernelSpec::new(1.0, 2.0, 0.5).unwrap();
        let b = Blocks::new(&Matrix::zeros(0, 1), &z, k).unwrap();
        let s = b.diagonal_solve(&[], &[]).unwrap();
        assert!(s.mean.norm() < 1e-14);
        assert!(linalg::frobenius_distance(&s.cov, &b.kww) < 1e-12);
        assert!(b.kl(&s).abs() < 1e-10);
    }

    #[test]
    fn scalar_case() {
        let k = KernelSpec::new(1.0, 2.0, 0.5).unwrap();
        let x = Matrix::from_row_slice(1, 1, &[0.3]);
        let z = Matrix::from_row_slice(1, 1, &[0.0]);
        let b = Blocks::new(&x, &z, k).unwrap();
        let kww = 2.0 * (1.0 + JITTER);
        let kwf = 2.0 * (-0.045f64).exp();
        let h = kwf / kww;
        let s = 1.0 / (1.0 / kww + h * h / 0.5);
        let m = s * h * 1.2 / 0.5;
        let st = suboptimal_solve(&b, &[1.2]).unwrap();
        assert!((st.cov[(0, 0)] - s).abs() < 1e-12);
        assert!((st.mean[0] - m).abs() < 1e-12);
        let opt = optimal_solve(&b, &x, &[1.2]).unwrap();
        let v1 = v1_solve(&b, &[1.2]).unwrap();
        assert!((opt.mean[0] - v1.mean[0]).abs() < 1e-10);
        assert!((opt.cov[(0, 0)] - v1.cov[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn large_noise_washes_out() {
        let (x, y, z, _) = instance(20, 4, 1);
        let b = Blocks::new(&x, &z, KernelSpec::new(1.0, 1.0, 1e12).unwrap()).unwrap();
        let s = optimal_solve(&b, &x, &y).unwrap();
        assert!(s.mean.norm() < 1e-9);
        assert!(linalg::frobenius_distance(&s.cov, &b.kww) < 1e-9);
    }

    #[test]
    fn bound_ordering_and_stationarity() {
        for seed in 0..5 {
            let (x, y, z, k) = instance(40, 6, seed);
            let b = Blocks::new(&x, &z, k).unwrap();
            let sub = suboptimal_solve(&b, &y).unwrap();
            let opt = optimal_solve(&b, &x, &y).unwrap();
            let lo = suboptimal_vlb(&b, &sub, &y);
            let hi = optimal_vlb(&b, &opt, &x, &y).unwrap();
            assert!(hi >= lo - 1e-8, "{hi} < {lo}");
            // Each solution maximizes its own objective.
            assert!(optimal_vlb(&b, &sub, &x, &y).unwrap() <= hi + 1e-9);
            assert!(suboptimal_vlb(&b, &opt, &y) <= lo + 1e-9);
            let v1 = v1_solve(&b, &y).unwrap();
            assert!(v1_objective(&b, &sub, &y) <= v1_objective(&b, &v1, &y) + 1e-9);
        }
    }

    #[test]
    fn v2_reaches_stationary_point() {
        let (x, y, z, k) = instance(30, 5, 7);
        let b = Blocks::new(&x, &z, k).unwrap();
        let out = v2_solve(&b, &y, 500, 1e-12).unwrap();
        assert!(out.converged);
        let (gm, gs) = v2_gradients(&b, &out.state, &y).unwrap();
        assert!(gm.norm() < 1e-6 * (1.0 + out.state.alpha.norm()), "{}", gm.norm());
        assert!(gs.norm() < 1e-4 * linalg::spd_inverse(&out.state.cov).unwrap().norm(), "{}", gs.norm());
    }

    #[test]
    fn grid_single_point_and_ties() {
        let (x, y, _, _) = instance(10, 2, 3);
        let g = Grid { length_scales: alloc::vec![0.7], signal_vars: alloc::vec![2.0], noise_vars: alloc::vec![0.3] };
        assert_eq!(grid_search(&x, &y, &g).unwrap(), KernelSpec::new(0.7, 2.0, 0.3).unwrap());
        let g = Grid { length_scales: alloc::vec![0.7, 0.7], signal_vars: alloc::vec![2.0], noise_vars: alloc::vec![0.3] };
        assert_eq!(grid_search(&x, &y, &g).unwrap().length_scale, 0.7);
        let k = KernelSpec::new(0.7, 2.0, 0.3).unwrap();
        let lml = log_marginal_likelihood(&x, &y, &k).unwrap();
        assert!(lml.is_finite());
    }

    #[test]
    fn log_spacing() {
        let g = log_spaced(0.01, 1.0, 3);
        assert!((g[1] - 0.1).abs() < 1e-15 && (g[2] - 1.0).abs() < 1e-15);
    }
}
