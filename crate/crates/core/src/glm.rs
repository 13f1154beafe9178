//! Bayesian generalized linear model with a Gaussian variational posterior
//! over the weights. Local marginals are `q(f_i) = N(hᵢᵀm, hᵢᵀShᵢ)`.

use alloc::vec::Vec;

use crate::data::DesignData;
use crate::error::{Error, Result};
use crate::expfam::{kl_gaussian, GaussianDist};
use crate::likelihoods::{self, alpha_gamma, Estimate, Expectation, Likelihood};
use crate::linalg::{self, Matrix, Vector};
use crate::optim::{self, AdagradState, Engine, StepSchedule, TrainConfig};
use crate::rng::{self, EpochSampler};

/// Initial variational covariance scale.
pub const INIT_COV_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GlmModel {
    pub prior: GaussianDist,
    pub lik: Likelihood,
}

impl GlmModel {
    pub fn new(prior: GaussianDist, lik: Likelihood) -> Result<Self> {
        lik.check_params()?;
        Ok(GlmModel { prior, lik })
    }

    /// `N(0, I)` prior.
    pub fn standard(dim: usize, lik: Likelihood) -> Result<Self> {
        Self::new(GaussianDist::standard(dim)?, lik)
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// `q(w) = N(0, 10 I)`.
    pub fn initial_posterior(&self) -> Result<GaussianDist> {
        GaussianDist::isotropic(Vector::zeros(self.dim()), INIT_COV_SCALE)
    }

    fn check(&self, q: &GaussianDist, data: &DesignData) -> Result<()> {
        if q.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: q.dim() });
        }
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: data.dim() });
        }
        Ok(())
    }
}

/// `(hᵀm, hᵀSh)`.
pub fn local_marginal(q: &GaussianDist, h: &Vector) -> (f64, f64) {
    let ch = q.chol() * h;
    (h.dot(q.mean()), ch.norm_squared())
}

/// `−KL(q‖p) + Σᵢ E_{q(fᵢ)}[log p(yᵢ|fᵢ)]`; example `i` uses the stream
/// `est.reseeded(i)`.
pub fn glm_vlb(model: &GlmModel, q: &GaussianDist, data: &DesignData, est: &Expectation) -> Result<Estimate> {
    model.check(q, data)?;
    let mut total = Estimate::exact(-kl_gaussian(q, &model.prior)?);
    for i in 0..data.len() {
        let (m, v) = local_marginal(q, &data.row(i));
        let (e, se) = likelihoods::expected_log_lik(&model.lik, data.y[i], m, v, &est.reseeded(i as u64))?;
        total = total.add(Estimate { value: e, stderr: se });
    }
    Ok(total)
}

/// `(α̂ᵢ, γ̂ᵢ)` for each example in `batch`, with a shared sample set per example.
pub fn site_terms(model: &GlmModel, q: &GaussianDist, data: &DesignData, batch: &[usize], est: &Expectation) -> Result<Vec<(f64, f64)>> {
    batch
        .iter()
        .map(|&i| {
            let (m, v) = local_marginal(q, &data.row(i));
            alpha_gamma(&model.lik, data.y[i], m, v, &est.reseeded(i as u64))
        })
        .collect()
}

/// Right-hand sides of the natural-parameter fixed point:
/// precision `Σ⁻¹ − 2s Σ γᵢhᵢhᵢᵀ` and shift `Σ⁻¹µ + s Σ (αᵢ − 2mᵀhᵢγᵢ)hᵢ`,
/// with `s = N/|M|`.
pub fn natural_targets(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    terms: &[(f64, f64)],
) -> (Matrix, Vector) {
    let scale = batch_scale(data.len(), batch.len());
    let mut precision = model.prior.precision().clone();
    let mut shift = model.prior.precision() * model.prior.mean();
    for (&i, &(a, g)) in batch.iter().zip(terms) {
        let h = data.row(i);
        linalg::add_outer(&mut precision, &h, -2.0 * scale * g);
        shift.axpy(scale * (a - 2.0 * h.dot(q.mean()) * g), &h, 1.0);
    }
    (linalg::symmetrized(precision), shift)
}

fn batch_scale(n: usize, m: usize) -> f64 {
    if m == 0 {
        0.0
    } else {
        n as f64 / m as f64
    }
}

/// Blended precision with the positive-definiteness guard applied.
fn blended_precision(q: &GaussianDist, target: &Matrix, rho: f64) -> Result<(Matrix, bool)> {
    let p = optim::blend_matrix(q.precision(), target, rho)?;
    optim::guard_precision(p)
}

/// Natural step on the covariance only; the mean is kept.
pub fn mcssvi_cov_update(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    rho: f64,
    est: &Expectation,
) -> Result<GaussianDist> {
    model.check(q, data)?;
    let terms = site_terms(model, q, data, batch, est)?;
    let (target, _) = natural_targets(model, q, data, batch, &terms);
    let (p, _) = blended_precision(q, &target, rho)?;
    GaussianDist::from_precision(q.mean().clone(), p)
}

/// Natural step on the shift `S⁻¹m` at fixed precision.
pub fn mcssvi_mean_update(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    rho: f64,
    est: &Expectation,
) -> Result<GaussianDist> {
    model.check(q, data)?;
    let terms = site_terms(model, q, data, batch, est)?;
    let (_, target) = natural_targets(model, q, data, batch, &terms);
    let shift = (q.precision() * q.mean()) * (1.0 - rho) + target * rho;
    q.with_mean(q.cov() * shift)
}

/// Joint natural step: both natural parameters are blended from terms
/// evaluated at the current `q`. Returns the new posterior and whether the
/// precision guard fired.
pub fn mcssvi_step(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    rho: f64,
    est: &Expectation,
) -> Result<(GaussianDist, bool)> {
    model.check(q, data)?;
    let terms = site_terms(model, q, data, batch, est)?;
    let (target_p, target_t) = natural_targets(model, q, data, batch, &terms);
    let (p, fired) = blended_precision(q, &target_p, rho)?;
    let shift = (q.precision() * q.mean()) * (1.0 - rho) + target_t * rho;
    let mean = linalg::spd_solve(&p, &shift)?;
    Ok((GaussianDist::from_precision(mean, p)?, fired))
}

/// Standard gradients of the bound in `m` and in the upper Cholesky factor
/// `C` (`S = CᵀC`):
/// `Σ⁻¹(µ−m) + sΣαᵢhᵢ` and `(C∘I)⁻¹ − CΣ⁻¹ + 2C·sΣγᵢhᵢhᵢᵀ`.
pub fn sdsvi_gradients(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    terms: &[(f64, f64)],
) -> (Vector, Matrix) {
    let scale = batch_scale(data.len(), batch.len());
    let prior_p = model.prior.precision();
    let mut grad_m = prior_p * (model.prior.mean() - q.mean());
    let mut curv = Matrix::zeros(model.dim(), model.dim());
    for (&i, &(a, g)) in batch.iter().zip(terms) {
        let h = data.row(i);
        grad_m.axpy(scale * a, &h, 1.0);
        linalg::add_outer(&mut curv, &h, 2.0 * scale * g);
    }
    let c = q.chol();
    let mut grad_c = -(c * prior_p) + c * curv;
    for k in 0..model.dim() {
        grad_c[(k, k)] += 1.0 / c[(k, k)];
    }
    (grad_m, linalg::triu(&grad_c))
}

/// Plain gradient step `m += ρ_m ∇m`, `C += ρ_C triu(∇C)` with backtracking.
pub fn sdsvi_update(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    rho_mean: f64,
    rho_chol: f64,
    est: &Expectation,
) -> Result<GaussianDist> {
    model.check(q, data)?;
    let terms = site_terms(model, q, data, batch, est)?;
    let (gm, gc) = sdsvi_gradients(model, q, data, batch, &terms);
    let (c, _) = optim::cholesky_grad_step(q.chol(), &gc, rho_chol)?;
    GaussianDist::from_cholesky(q.mean() + gm * rho_mean, c)
}

/// ADAGRAD-driven S-DSVI step.
pub fn sdsvi_adagrad_step(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    ada_m: &mut AdagradState,
    ada_c: &mut AdagradState,
    est: &Expectation,
) -> Result<GaussianDist> {
    model.check(q, data)?;
    let terms = site_terms(model, q, data, batch, est)?;
    let (gm, gc) = sdsvi_gradients(model, q, data, batch, &terms);
    let dm = ada_m.step_vector(&gm)?;
    let dc = Matrix::from_vec(gc.nrows(), gc.ncols(), ada_c.step(gc.as_slice())?);
    let (c, _) = optim::cholesky_grad_step(q.chol(), &dc, 1.0)?;
    GaussianDist::from_cholesky(q.mean() + dm, c)
}

/// Natural covariance step with step `rho`; ADAGRAD mean step. Both use terms
/// at the current `q`.
pub fn hmcssvi_step(
    model: &GlmModel,
    q: &GaussianDist,
    data: &DesignData,
    batch: &[usize],
    rho: f64,
    ada_m: &mut AdagradState,
    est: &Expectation,
) -> Result<(GaussianDist, bool)> {
    model.check(q, data)?;
    let terms = site_terms(model, q, data, batch, est)?;
    let (target_p, _) = natural_targets(model, q, data, batch, &terms);
    let (p, fired) = blended_precision(q, &target_p, rho)?;
    let (gm, _) = sdsvi_gradients(model, q, data, batch, &terms);
    let dm = ada_m.step_vector(&gm)?;
    Ok((GaussianDist::from_precision(q.mean() + dm, p)?, fired))
}

/// Test metrics under the predictive `N(f|hᵀm, hᵀSh)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean negative log predictive density per example.
    pub nll: f64,
    /// Mean of [`likelihoods::prediction_error`].
    pub error: f64,
}

pub fn evaluate(model: &GlmModel, q: &GaussianDist, data: &DesignData, est: &Expectation) -> Result<Evaluation> {
    model.check(q, data)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut nll = 0.0;
    let mut err = 0.0;
    for i in 0..data.len() {
        let (m, v) = local_marginal(q, &data.row(i));
        nll -= likelihoods::log_predictive(&model.lik, data.y[i], m, v, est)?;
        let pred = likelihoods::point_estimate(&model.lik, m, v, est)?;
        err += likelihoods::prediction_error(&model.lik, data.y[i], pred);
    }
    let n = data.len() as f64;
    Ok(Evaluation { nll: nll / n, error: err / n })
}

/// Minibatch driver for one engine.
#[derive(Debug, Clone)]
pub struct GlmTrainer {
    pub model: GlmModel,
    q: GaussianDist,
    engine: Engine,
    schedule: StepSchedule,
    ada_m: AdagradState,
    ada_c: AdagradState,
    sampler: EpochSampler,
    est: Expectation,
    iteration: u64,
    guard_events: u64,
}

impl GlmTrainer {
    pub fn new(model: GlmModel, n: usize, config: &TrainConfig) -> Result<Self> {
        let q = model.initial_posterior()?;
        Self::with_posterior(model, q, n, config)
    }

    pub fn with_posterior(model: GlmModel, q: GaussianDist, n: usize, config: &TrainConfig) -> Result<Self> {
        let d = model.dim();
        let rate = config.learning_rate;
        Ok(GlmTrainer {
            q,
            engine: config.engine,
            schedule: config.schedule.clone(),
            ada_m: AdagradState::with_rate(d, rate, optim::ADAGRAD_EPSILON),
            ada_c: AdagradState::with_rate(d * d, rate, optim::ADAGRAD_EPSILON),
            sampler: EpochSampler::new(n, config.batch_size, rng::mix(config.seed, 1)),
            est: Expectation::monte_carlo(config.mc_samples, rng::mix(config.seed, 2))?,
            iteration: 0,
            guard_events: 0,
            model,
        })
    }

    /// Replace the Monte Carlo estimator (e.g. with quadrature).
    pub fn set_expectation(&mut self, est: Expectation) {
        self.est = est;
    }

    pub fn posterior(&self) -> &GaussianDist {
        &self.q
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.sampler.epoch()
    }

    /// Number of updates where the precision guard had to project.
    pub fn guard_events(&self) -> u64 {
        self.guard_events
    }

    /// One minibatch update.
    pub fn step(&mut self, data: &DesignData) -> Result<()> {
        let batch = self.sampler.next_batch();
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let est = self.est.reseeded(self.iteration);
        self.q = match self.engine {
            Engine::McSsvi => {
                let rho = self.schedule.next_rho();
                let (q, fired) = mcssvi_step(&self.model, &self.q, data, &batch, rho, &est)?;
                self.guard_events += fired as u64;
                q
            }
            Engine::SDsvi => {
                sdsvi_adagrad_step(&self.model, &self.q, data, &batch, &mut self.ada_m, &mut self.ada_c, &est)?
            }
            Engine::HMcSsvi => {
                let rho = self.schedule.next_rho();
                let (q, fired) = hmcssvi_step(&self.model, &self.q, data, &batch, rho, &mut self.ada_m, &est)?;
                self.guard_events += fired as u64;
                q
            }
        };
        self.iteration += 1;
        Ok(())
    }
}
