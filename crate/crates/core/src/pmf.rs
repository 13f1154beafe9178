//! Probabilistic matrix factorization with column-factorized Gaussian
//! posteriors `q(uᵢ)`, `q(vⱼ)` and any scalar likelihood on `fᵢⱼ = uᵢᵀvⱼ`.

use alloc::vec::Vec;

use crate::data::TripletData;
use crate::error::{Error, Result};
use crate::expfam::GaussianDist;
use crate::likelihoods::{self, Estimate, Expectation, Likelihood};
use crate::linalg::{self, Matrix, Vector};
use crate::optim::{self, AdagradState, Engine, StepSchedule, TrainConfig};
use crate::rng::{self, StreamRng};
use crate::special::LN_2PI;
#[allow(unused_imports)]
use num_traits::Float;

/// Default `k₁ = k₂`.
pub const DEFAULT_SAMPLES: usize = 10;
/// Floor on the conditional variance `uᵀS_v u` of `f`.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Side {
    U,
    V,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::U => Side::V,
            Side::V => Side::U,
        }
    }
}

/// How the per-entry `D`/`d` terms and the expected log-likelihood are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terms {
    /// `k₁` draws of the other column, `k₂` draws of `f` per draw.
    MonteCarlo { k1: usize, k2: usize },
    /// Closed form; Gaussian likelihood only.
    Exact,
}

impl Terms {
    pub fn default_mc() -> Self {
        Terms::MonteCarlo { k1: DEFAULT_SAMPLES, k2: DEFAULT_SAMPLES }
    }

    fn check(&self, lik: &Likelihood) -> Result<()> {
        match (*self, lik) {
            (Terms::Exact, Likelihood::Gaussian { .. }) => Ok(()),
            (Terms::Exact, _) => Err(Error::Unsupported("exact PMF terms need a Gaussian likelihood")),
            (Terms::MonteCarlo { k1, k2 }, _) if k1 == 0 || k2 == 0 => {
                Err(Error::InvalidParameter("k1 and k2 must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PmfState {
    pub rank: usize,
    pub u: Vec<GaussianDist>,
    pub v: Vec<GaussianDist>,
    pub prior_var_u: f64,
    pub prior_var_v: f64,
}

impl PmfState {
    /// Columns at `N(0, scale·I)`; prior variances 1.
    pub fn new(rows: usize, cols: usize, rank: usize, scale: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidParameter("rank must be positive"));
        }
        let q = GaussianDist::isotropic(Vector::zeros(rank), scale)?;
        Ok(PmfState { rank, u: alloc::vec![q.clone(); rows], v: alloc::vec![q; cols], prior_var_u: 1.0, prior_var_v: 1.0 })
    }

    /// `S = 10 I` with small random means so the two sides can break symmetry.
    pub fn initial(rows: usize, cols: usize, rank: usize, seed: u64) -> Result<Self> {
        let mut s = Self::new(rows, cols, rank, crate::glm::INIT_COV_SCALE)?;
        let mut r = rng::stream(seed, 0x1417);
        for q in s.u.iter_mut().chain(s.v.iter_mut()) {
            *q = q.with_mean(rng::normal_vector(&mut r, rank) * 0.1)?;
        }
        Ok(s)
    }

    pub fn columns(&self, side: Side) -> &[GaussianDist] {
        match side {
            Side::U => &self.u,
            Side::V => &self.v,
        }
    }

    fn columns_mut(&mut self, side: Side) -> &mut Vec<GaussianDist> {
        match side {
            Side::U => &mut self.u,
            Side::V => &mut self.v,
        }
    }

    pub fn prior_var(&self, side: Side) -> f64 {
        match side {
            Side::U => self.prior_var_u,
            Side::V => self.prior_var_v,
        }
    }

    fn check(&self, data: &TripletData) -> Result<()> {
        if data.rows != self.u.len() {
            return Err(Error::DimensionMismatch { expected: self.u.len(), found: data.rows });
        }
        if data.cols != self.v.len() {
            return Err(Error::DimensionMismatch { expected: self.v.len(), found: data.cols });
        }
        Ok(())
    }

    /// `σ² ← (1/(N·K)) Σ (tr S + mᵀm)` over one side's columns.
    pub fn hyper_update(&mut self, side: Side) {
        let cols = self.columns(side);
        if cols.is_empty() {
            return;
        }
        let total: f64 = cols.iter().map(|q| q.cov().trace() + q.mean().norm_squared()).sum();
        let value = total / (cols.len() * self.rank) as f64;
        match side {
            Side::U => self.prior_var_u = value,
            Side::V => self.prior_var_v = value,
        }
    }

    /// `(mᵢⱼ, Sᵢⱼ)`: mean and variance of `uᵢᵀvⱼ`.
    pub fn predict(&self, i: usize, j: usize) -> (f64, f64) {
        let (u, v) = (&self.u[i], &self.v[j]);
        let m = u.mean().dot(v.mean());
        let s = (u.cov() * v.cov()).trace() + linalg::quad_form(u.mean(), v.cov()) + linalg::quad_form(v.mean(), u.cov());
        (m, s)
    }
}

/// `KL(N(m, S) ‖ N(0, σ²I))`.
pub fn kl_isotropic(q: &GaussianDist, prior_var: f64) -> f64 {
    let k = q.dim() as f64;
    0.5 * ((q.cov().trace() + q.mean().norm_squared()) / prior_var - k + k * prior_var.ln() - q.log_det_cov())
}

/// Nested Monte Carlo `(D̂, d̂)` for one entry, with `own` the column being
/// updated and `other` the column sampled in the outer loop. `derivs` maps
/// `f` to `(∂ℓ/∂f, ∂²ℓ/∂f²)`.
pub fn dhat_with<F>(own: &GaussianDist, other: &GaussianDist, k1: usize, k2: usize, rng: &mut StreamRng, derivs: F) -> (Matrix, Vector)
where
    F: Fn(f64) -> (f64, f64),
{
    let k = own.dim();
    let mut big_d = Matrix::zeros(k, k);
    let mut small_d = Vector::zeros(k);
    for _ in 0..k1 {
        let a = rng::gaussian_draw(rng, other.mean(), other.chol());
        let mean = a.dot(own.mean());
        let sd = linalg::quad_form(&a, own.cov()).max(VARIANCE_FLOOR).sqrt();
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..k2 {
            let (d1, d2) = derivs(mean + sd * rng::standard_normal(rng));
            s1 += d1;
            s2 += d2;
        }
        linalg::add_outer(&mut big_d, &a, s2 / (2.0 * (k1 * k2) as f64));
        small_d.axpy(s1 / (k1 * k2) as f64, &a, 1.0);
    }
    (big_d, small_d)
}

pub fn dhat(lik: &Likelihood, y: f64, own: &GaussianDist, other: &GaussianDist, k1: usize, k2: usize, rng: &mut StreamRng) -> (Matrix, Vector) {
    dhat_with(own, other, k1, k2, rng, |f| {
        let d = lik.derivs(y, f);
        (d.d1, d.d2)
    })
}

/// Closed-form Gaussian terms `D = −(mmᵀ + S)/(2σ²)`, `d = (y m − (mmᵀ + S)m_own)/σ²`.
pub fn exact_gaussian_terms(variance: f64, y: f64, own: &GaussianDist, other: &GaussianDist) -> (Matrix, Vector) {
    let mut second = other.cov().clone();
    linalg::add_outer(&mut second, other.mean(), 1.0);
    let d = (other.mean() * y - &second * own.mean()) / variance;
    (second * (-0.5 / variance), d)
}

/// Summed `(ΣD, Σd)` over the given entries for one column.
pub fn column_terms(
    lik: &Likelihood,
    state: &PmfState,
    data: &TripletData,
    side: Side,
    col: usize,
    entries: &[usize],
    terms: Terms,
    seed: u64,
) -> Result<(Matrix, Vector)> {
    let k = state.rank;
    let own = &state.columns(side)[col];
    let mut big = Matrix::zeros(k, k);
    let mut small = Vector::zeros(k);
    for &e in entries {
        let (i, j, y) = data.entries[e];
        lik.validate(y)?;
        let other = match side {
            Side::U => &state.v[j],
            Side::V => &state.u[i],
        };
        let (bd, sd) = match (terms, lik) {
            (Terms::Exact, Likelihood::Gaussian { variance }) => exact_gaussian_terms(*variance, y, own, other),
            (Terms::MonteCarlo { k1, k2 }, _) => dhat(lik, y, own, other, k1, k2, &mut rng::stream(seed, e as u64)),
            _ => return Err(Error::Unsupported("exact PMF terms need a Gaussian likelihood")),
        };
        big += bd;
        small += sd;
    }
    Ok((big, small))
}

/// Per-column optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnOptimizer {
    pub schedule: StepSchedule,
    pub mean: AdagradState,
    pub chol: AdagradState,
}

impl ColumnOptimizer {
    pub fn new(rank: usize, schedule: StepSchedule, rate: f64) -> Self {
        ColumnOptimizer {
            schedule,
            mean: AdagradState::with_rate(rank, rate, optim::ADAGRAD_EPSILON),
            chol: AdagradState::with_rate(rank * rank, rate, optim::ADAGRAD_EPSILON),
        }
    }
}

/// Updates one column from its (sub-sampled) entries. Returns whether the
/// precision guard fired.
#[allow(clippy::too_many_arguments)]
pub fn column_update(
    lik: &Likelihood,
    state: &mut PmfState,
    data: &TripletData,
    side: Side,
    col: usize,
    observed: usize,
    batch: &[usize],
    engine: Engine,
    opt: &mut ColumnOptimizer,
    terms: Terms,
    seed: u64,
) -> Result<bool> {
    let (big, small) = column_terms(lik, state, data, side, col, batch, terms, seed)?;
    let scale = if batch.is_empty() { 0.0 } else { observed as f64 / batch.len() as f64 };
    let k = state.rank;
    let prior_p = Matrix::identity(k, k) / state.prior_var(side);
    let q = &state.columns(side)[col];
    let mut fired = false;
    let next = match engine {
        Engine::McSsvi | Engine::HMcSsvi => {
            let rho = opt.schedule.next_rho();
            let target = linalg::symmetrized(&prior_p - &big * (2.0 * scale));
            let (p, f) = optim::guard_precision(optim::blend_matrix(q.precision(), &target, rho)?)?;
            fired = f;
            if engine == Engine::McSsvi {
                let target_shift = (&small - &big * q.mean() * 2.0) * scale;
                let shift = (q.precision() * q.mean()) * (1.0 - rho) + target_shift * rho;
                GaussianDist::from_precision(linalg::spd_solve(&p, &shift)?, p)?
            } else {
                let grad = -(&prior_p * q.mean()) + &small * scale;
                GaussianDist::from_precision(q.mean() + opt.mean.step_vector(&grad)?, p)?
            }
        }
        Engine::SDsvi => {
            let grad_m = -(&prior_p * q.mean()) + &small * scale;
            let c = q.chol();
            let mut gc = -(c * &prior_p) + c * &big * (2.0 * scale);
            for d in 0..k {
                gc[(d, d)] += 1.0 / c[(d, d)];
            }
            let gc = linalg::triu(&gc);
            let dm = opt.mean.step_vector(&grad_m)?;
            let dc = Matrix::from_vec(k, k, opt.chol.step(gc.as_slice())?);
            let (c_new, _) = optim::cholesky_grad_step(c, &dc, 1.0)?;
            GaussianDist::from_cholesky(q.mean() + dm, c_new)?
        }
    };
    state.columns_mut(side)[col] = next;
    Ok(fired)
}

/// `Σ Ê[log p(yᵢⱼ|fᵢⱼ)] − Σ KL(q(uᵢ)) − Σ KL(q(vⱼ))`.
pub fn vlb(lik: &Likelihood, state: &PmfState, data: &TripletData, terms: Terms, seed: u64) -> Result<Estimate> {
    state.check(data)?;
    terms.check(lik)?;
    let kl: f64 = state.u.iter().map(|q| kl_isotropic(q, state.prior_var_u)).sum::<f64>()
        + state.v.iter().map(|q| kl_isotropic(q, state.prior_var_v)).sum::<f64>();
    let mut total = Estimate::exact(-kl);
    for (e, &(i, j, y)) in data.entries.iter().enumerate() {
        lik.validate(y)?;
        total = total.add(match (terms, lik) {
            (Terms::Exact, Likelihood::Gaussian { variance }) => {
                let (m, s) = state.predict(i, j);
                Estimate::exact(-0.5 * (LN_2PI + variance.ln() + ((y - m) * (y - m) + s) / variance))
            }
            (Terms::MonteCarlo { k1, k2 }, _) => {
                expected_log_lik_nested(lik, y, &state.u[i], &state.v[j], k1, k2, &mut rng::stream(seed, e as u64))
            }
            _ => unreachable!(),
        });
    }
    Ok(total)
}

/// Two-stage estimate of `E[log p(y|uᵀv)]`: `u` first, then `f | u`. The
/// standard error is taken across the `k₁` outer groups.
pub fn expected_log_lik_nested(
    lik: &Likelihood,
    y: f64,
    u: &GaussianDist,
    v: &GaussianDist,
    k1: usize,
    k2: usize,
    rng: &mut StreamRng,
) -> Estimate {
    let mut groups = Vec::with_capacity(k1);
    for _ in 0..k1 {
        let a = rng::gaussian_draw(rng, u.mean(), u.chol());
        let mean = a.dot(v.mean());
        let sd = linalg::quad_form(&a, v.cov()).max(VARIANCE_FLOOR).sqrt();
        let s: f64 = (0..k2).map(|_| lik.log_lik(y, mean + sd * rng::standard_normal(rng))).sum();
        groups.push(s / k2 as f64);
    }
    let n = k1 as f64;
    let mean = groups.iter().sum::<f64>() / n;
    let se = if k1 > 1 {
        (groups.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / ((n - 1.0) * n)).sqrt()
    } else {
        0.0
    };
    Estimate { value: mean, stderr: se }
}

/// Round-robin driver: strict alternation between a `U` column and a `V`
/// column, each side cycling through its columns in index order.
#[derive(Debug, Clone)]
pub struct PmfTrainer {
    pub lik: Likelihood,
    pub state: PmfState,
    pub terms: Terms,
    pub learn_prior: bool,
    engine: Engine,
    batch_size: usize,
    seed: u64,
    by_row: Vec<Vec<usize>>,
    by_col: Vec<Vec<usize>>,
    opt_u: Vec<ColumnOptimizer>,
    opt_v: Vec<ColumnOptimizer>,
    cursor_u: usize,
    cursor_v: usize,
    next_side: Side,
    updates: u64,
    pub guard_events: u64,
}

impl PmfTrainer {
    pub fn new(lik: Likelihood, state: PmfState, data: &TripletData, config: &TrainConfig) -> Result<Self> {
        lik.check_params()?;
        state.check(data)?;
        let (by_row, by_col) = data.index();
        let opt = ColumnOptimizer::new(state.rank, config.schedule.clone(), config.learning_rate);
        Ok(PmfTrainer {
            terms: Terms::default_mc(),
            learn_prior: true,
            engine: config.engine,
            batch_size: config.batch_size.max(1),
            seed: config.seed,
            opt_u: alloc::vec![opt.clone(); state.u.len()],
            opt_v: alloc::vec![opt; state.v.len()],
            by_row,
            by_col,
            cursor_u: 0,
            cursor_v: 0,
            next_side: Side::U,
            updates: 0,
            guard_events: 0,
            lik,
            state,
        })
    }

    pub fn set_terms(&mut self, terms: Terms) -> Result<()> {
        terms.check(&self.lik)?;
        self.terms = terms;
        Ok(())
    }

    /// Column updates performed so far.
    pub fn iteration(&self) -> u64 {
        self.updates
    }

    /// One epoch is `N_U + N_V` column updates.
    pub fn epoch(&self) -> u64 {
        self.updates / (self.state.u.len() + self.state.v.len()).max(1) as u64
    }

    /// The `(side, column)` the next call to [`step`](Self::step) updates.
    pub fn next_column(&self) -> (Side, usize) {
        match self.next_side {
            Side::U if !self.state.u.is_empty() => (Side::U, self.cursor_u),
            Side::V if !self.state.v.is_empty() => (Side::V, self.cursor_v),
            Side::U => (Side::V, self.cursor_v),
            Side::V => (Side::U, self.cursor_u),
        }
    }

    /// Updates the next column, then that side's prior variance.
    pub fn step(&mut self, data: &TripletData) -> Result<(Side, usize)> {
        self.state.check(data)?;
        let (side, col) = self.next_column();
        let observed = match side {
            Side::U => &self.by_row[col],
            Side::V => &self.by_col[col],
        };
        let step_seed = rng::mix(self.seed, self.updates);
        let batch: Vec<usize> = if observed.len() > self.batch_size {
            rng::sample_without_replacement(&mut rng::stream(step_seed, 0x5eed), observed.len(), self.batch_size)
                .into_iter()
                .map(|k| observed[k])
                .collect()
        } else {
            observed.clone()
        };
        let opt = match side {
            Side::U => &mut self.opt_u[col],
            Side::V => &mut self.opt_v[col],
        };
        let fired = column_update(
            &self.lik,
            &mut self.state,
            data,
            side,
            col,
            observed.len(),
            &batch,
            self.engine,
            opt,
            self.terms,
            rng::mix(step_seed, 1),
        )?;
        self.guard_events += fired as u64;
        if self.learn_prior {
            self.state.hyper_update(side);
        }
        match side {
            Side::U => self.cursor_u = (self.cursor_u + 1) % self.state.u.len(),
            Side::V => self.cursor_v = (self.cursor_v + 1) % self.state.v.len(),
        }
        self.next_side = side.other();
        self.updates += 1;
        Ok((side, col))
    }
}

/// Test metrics. `error` is the likelihood's primary metric; `secondary` is
/// the alternative binary rule or the count non-zero error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmfEvaluation {
    pub nll: f64,
    pub error: f64,
    pub secondary: Option<f64>,
}

/// Primary metrics: squared error (Gaussian), zero-one with the literal rule
/// `mᵢⱼ > ½` (binary), relative error on nonzero true counts (count),
/// absolute error (ordinal). Secondary: zero-one from the predictive
/// probability (binary), fraction of true zeros predicted nonzero (count).
pub fn evaluate(lik: &Likelihood, state: &PmfState, test: &TripletData, est: &Expectation) -> Result<PmfEvaluation> {
    state.check(test)?;
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = test.len() as f64;
    let (mut nll, mut err, mut alt) = (0.0, 0.0, 0.0);
    let (mut nonzero, mut zeros) = (0usize, 0usize);
    for &(i, j, y) in &test.entries {
        let (m, s) = state.predict(i, j);
        nll -= likelihoods::log_predictive(lik, y, m, s, est)?;
        match lik {
            Likelihood::Gaussian { .. } => err += (y - m) * (y - m),
            Likelihood::Logistic => {
                let literal = if m > 0.5 { 1.0 } else { 0.0 };
                err += (literal != y) as u8 as f64;
                let p1 = likelihoods::log_predictive(lik, 1.0, m, s, est)?.exp();
                let prob = if p1 >= 0.5 { 1.0 } else { 0.0 };
                alt += (prob != y) as u8 as f64;
            }
            Likelihood::PoissonLogistic { .. } => {
                let pred = likelihoods::point_estimate(lik, m, s, est)?;
                if y > 0.0 {
                    err += (pred - y).abs() / y;
                    nonzero += 1;
                } else {
                    alt += (pred > 0.0) as u8 as f64;
                    zeros += 1;
                }
            }
            Likelihood::Ordinal { .. } => err += (likelihoods::point_estimate(lik, m, s, est)? - y).abs(),
        }
    }
    Ok(match lik {
        Likelihood::Logistic => PmfEvaluation { nll: nll / n, error: err / n, secondary: Some(alt / n) },
        Likelihood::PoissonLogistic { .. } => PmfEvaluation {
            nll: nll / n,
            error: if nonzero > 0 { err / nonzero as f64 } else { 0.0 },
            secondary: if zeros > 0 { Some(alt / zeros as f64) } else { None },
        },
        _ => PmfEvaluation { nll: nll / n, error: err / n, secondary: None },
    })
}
