//! Mixed-effects GLM: `fᵢ | w ~ N(w₁ᵀxᵢ, w₂)` with Gaussian `w₁` and
//! Rayleigh-distributed variance `w₂`. Posterior `q(w₁)q(w₂) = N(m, S)·Rayl(σ²)`.
//!
//! Two structured bounds share one estimator layout: outer samples of
//! `(w₁, w₂)` (with `w₂ = ασ`, `α` unit Rayleigh) and, for each outer sample
//! and example, an inner expectation over `f`. The optimal bound uses
//! `log E[p(y|f)]`, the suboptimal one `E[log p(y|f)]`. A mean-field variant
//! with `q(fᵢ) = N(βᵢ, γᵢ²)` is trained by coordinate updates.

use alloc::vec::Vec;

use crate::data::DesignData;
use crate::error::{Error, Result};
use crate::expfam::{kl_gaussian, kl_rayleigh, GaussianDist, RayleighDist};
use crate::likelihoods::{self, density_ratios, Estimate, Expectation, Likelihood};
use crate::linalg::{self, Matrix, Vector};
use crate::optim::{self, AdagradState, Engine, StepSchedule, TrainConfig};
use crate::quadrature::GaussHermite;
use crate::rng::{self, EpochSampler};
use crate::special::{self, LN_2PI};
#[allow(unused_imports)]
use num_traits::Float;

/// Default Rayleigh prior scale `τ`.
pub const DEFAULT_TAU: f64 = 5.0;
/// Outer `(w₁, w₂)` samples per gradient estimate.
pub const DEFAULT_OUTER_SAMPLES: usize = 10;
/// Inner `f` samples per outer sample.
pub const DEFAULT_INNER_SAMPLES: usize = 100;
/// Rayleigh quadrature points used for prediction.
pub const PREDICT_POINTS: usize = 200;
/// ADAGRAD iterations on `(βᵢ, γᵢ)` per mean-field pass.
pub const MEANFIELD_INNER_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Bound {
    /// `log E_{N(f|w₁ᵀx, w₂)}[p(y|f)]` per example.
    Optimal,
    /// `E_{N(f|w₁ᵀx, w₂)}[log p(y|f)]` per example.
    Suboptimal,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmeModel {
    pub prior: GaussianDist,
    pub prior_noise: RayleighDist,
    pub lik: Likelihood,
}

impl GmeModel {
    pub fn new(prior: GaussianDist, tau_sq: f64, lik: Likelihood) -> Result<Self> {
        lik.check_params()?;
        Ok(GmeModel { prior, prior_noise: RayleighDist::new(tau_sq)?, lik })
    }

    /// `N(0, I)` weights and `τ = 5`.
    pub fn standard(dim: usize, lik: Likelihood) -> Result<Self> {
        Self::new(GaussianDist::standard(dim)?, DEFAULT_TAU * DEFAULT_TAU, lik)
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// `m = 0`, `S = 10 I`, `σ = 1`.
    pub fn initial_posterior(&self) -> Result<GmePosterior> {
        Ok(GmePosterior {
            weights: GaussianDist::isotropic(Vector::zeros(self.dim()), crate::glm::INIT_COV_SCALE)?,
            noise: RayleighDist::new(1.0)?,
        })
    }

    fn check(&self, post: &GmePosterior, data: &DesignData) -> Result<()> {
        if post.weights.dim() != self.dim() || data.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: data.dim() });
        }
        Ok(())
    }

    /// `KL(q(w₁)‖p(w₁)) + KL(q(w₂)‖p(w₂))`.
    pub fn kl(&self, post: &GmePosterior) -> Result<f64> {
        Ok(kl_gaussian(&post.weights, &self.prior)? + kl_rayleigh(&post.noise, &self.prior_noise))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmePosterior {
    pub weights: GaussianDist,
    pub noise: RayleighDist,
}

/// Sample counts and the inner estimator template. The inner estimator is
/// reseeded per `(outer sample, example)`.
#[derive(Debug, Clone)]
pub struct Sampling {
    pub n_outer: usize,
    pub inner: Expectation,
}

impl Sampling {
    pub fn monte_carlo(n_outer: usize, n_inner: usize, seed: u64) -> Result<Self> {
        if n_outer == 0 {
            return Err(Error::InvalidParameter("need at least one outer sample"));
        }
        Ok(Sampling { n_outer, inner: Expectation::monte_carlo(n_inner, seed)? })
    }

    pub fn reseeded(&self, index: u64) -> Self {
        Sampling { n_outer: self.n_outer, inner: self.inner.reseeded(index) }
    }

    fn outer_seed(&self) -> u64 {
        match &self.inner {
            Expectation::MonteCarlo { seed, .. } => rng::mix(*seed, u64::MAX),
            Expectation::GaussHermite(_) => 0x6d65,
        }
    }
}

/// One outer draw `(w₁, w₂)` together with its unit Rayleigh factor.
#[derive(Debug, Clone)]
pub struct OuterDraw {
    pub w1: Vector,
    pub alpha: f64,
    pub w2: f64,
}

/// Outer draws with common random numbers: the same standard normals and unit
/// Rayleigh factors for any posterior, so finite differences are smooth.
pub fn outer_draws(post: &GmePosterior, sampling: &Sampling) -> Vec<OuterDraw> {
    let mut r = rng::stream(sampling.outer_seed(), 0);
    let sigma = post.noise.scale();
    (0..sampling.n_outer)
        .map(|_| {
            let z = rng::normal_vector(&mut r, post.weights.dim());
            let alpha = rng::unit_rayleigh(&mut r);
            OuterDraw { w1: post.weights.mean() + post.weights.chol().tr_mul(&z), alpha, w2: alpha * sigma }
        })
        .collect()
}

/// Per-example quantities at one `(w₁, w₂)`: the bound term and the
/// derivatives of that term in the linear predictor `a = w₁ᵀx` and in `w₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteValue {
    pub value: f64,
    pub d_a: f64,
    pub d2_a: f64,
    pub d_w2: f64,
}

/// Optimal: `log E`, `E′/E`, `E″/E − (E′/E)²`, `E″/(2E)`.
/// Suboptimal: `E[ℓ]`, `E[ℓ′]`, `E[ℓ″]`, `½E[ℓ″]`.
pub fn site_value(lik: &Likelihood, bound: Bound, y: f64, a: f64, w2: f64, est: &Expectation) -> Result<SiteValue> {
    match bound {
        Bound::Optimal => {
            let r = density_ratios(lik, y, a, w2, est)?;
            Ok(SiteValue { value: r.log_e, d_a: r.r1, d2_a: r.r2 - r.r1 * r.r1, d_w2: 0.5 * r.r2 })
        }
        Bound::Suboptimal => {
            lik.validate(y)?;
            let ([v, d1, d2], _) = est.expect(a, w2, |f| {
                let d = lik.derivs(y, f);
                [d.value, d.d1, d.d2]
            });
            Ok(SiteValue { value: v, d_a: d1, d2_a: d2, d_w2: 0.5 * d2 })
        }
    }
}

fn inner_for(sampling: &Sampling, s: usize, i: usize) -> Expectation {
    sampling.inner.reseeded(rng::mix(s as u64, i as u64))
}

/// Minibatch sums of the expected derivatives over `q(w₁)q(w₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmeTerms {
    /// `Σᵢ E[∇_{w₁} φᵢ]`.
    pub grad: Vector,
    /// `Σᵢ E[∇²_{w₁} φᵢ]`.
    pub curv: Matrix,
    /// `Σᵢ E[w₂ ∂φᵢ/∂w₂]`.
    pub noise: f64,
    /// Outer-sample/example pairs dropped because `E` underflowed.
    pub skipped: usize,
}

pub fn grad_terms(
    model: &GmeModel,
    post: &GmePosterior,
    data: &DesignData,
    batch: &[usize],
    bound: Bound,
    sampling: &Sampling,
) -> Result<GmeTerms> {
    model.check(post, data)?;
    let d = model.dim();
    let draws = outer_draws(post, sampling);
    let n = draws.len() as f64;
    let mut t = GmeTerms { grad: Vector::zeros(d), curv: Matrix::zeros(d, d), noise: 0.0, skipped: 0 };
    for &i in batch {
        let x = data.row(i);
        let (mut g1, mut g2, mut gn) = (0.0, 0.0, 0.0);
        for (s, draw) in draws.iter().enumerate() {
            let a = draw.w1.dot(&x);
            match site_value(&model.lik, bound, data.y[i], a, draw.w2, &inner_for(sampling, s, i)) {
                Ok(v) => {
                    g1 += v.d_a;
                    g2 += v.d2_a;
                    gn += draw.w2 * v.d_w2;
                }
                Err(Error::NonFinite(_)) => t.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        t.grad.axpy(g1 / n, &x, 1.0);
        linalg::add_outer(&mut t.curv, &x, g2 / n);
        t.noise += gn / n;
    }
    if t.skipped > 0 {
        log::debug!("gme: skipped {} underflowing site evaluations", t.skipped);
    }
    Ok(t)
}

/// Monte Carlo bound: `−KL + Σᵢ E_{q(w)}[φᵢ(w)]`, with the standard error
/// taken across outer samples.
pub fn vlb(model: &GmeModel, post: &GmePosterior, data: &DesignData, bound: Bound, sampling: &Sampling) -> Result<Estimate> {
    model.check(post, data)?;
    let draws = outer_draws(post, sampling);
    let n = draws.len() as f64;
    let mut total = Estimate::exact(-model.kl(post)?);
    for i in 0..data.len() {
        let x = data.row(i);
        let vals: Vec<f64> = draws
            .iter()
            .enumerate()
            .map(|(s, draw)| {
                Ok(site_value(&model.lik, bound, data.y[i], draw.w1.dot(&x), draw.w2, &inner_for(sampling, s, i))?.value)
            })
            .collect::<Result<_>>()?;
        let mean = vals.iter().sum::<f64>() / n;
        let se = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        total = total.add(Estimate { value: mean, stderr: se });
    }
    Ok(total)
}

/// `∂/∂σ` of the bound with standard parameters: `2/σ − 2σ/τ² + s·noise/σ`.
pub fn sigma_gradient(model: &GmeModel, post: &GmePosterior, scaled_noise: f64) -> f64 {
    let s = post.noise.scale();
    2.0 / s - 2.0 * s / model.prior_noise.scale_sq() + scaled_noise / s
}

/// Natural-parameter target for `−1/(2σ²)`: `−1/(2τ²) + s·noise/(4σ²)`.
pub fn sigma_natural_target(model: &GmeModel, post: &GmePosterior, scaled_noise: f64) -> f64 {
    model.prior_noise.natural() + scaled_noise / (4.0 * post.noise.scale_sq())
}

/// Update bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub guard_fired: bool,
    pub sigma_rejected: bool,
    pub skipped: usize,
}

/// Optimizer state for the standard-gradient blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GmeAdagrad {
    pub mean: AdagradState,
    pub chol: AdagradState,
    pub sigma: AdagradState,
}

impl GmeAdagrad {
    pub fn new(dim: usize, rate: f64) -> Self {
        GmeAdagrad {
            mean: AdagradState::with_rate(dim, rate, optim::ADAGRAD_EPSILON),
            chol: AdagradState::with_rate(dim * dim, rate, optim::ADAGRAD_EPSILON),
            sigma: AdagradState::with_rate(1, rate, optim::ADAGRAD_EPSILON),
        }
    }
}

/// One engine step on a minibatch. `rho` drives the natural blocks; the
/// standard blocks use ADAGRAD.
#[allow(clippy::too_many_arguments)]
pub fn update(
    model: &GmeModel,
    post: &GmePosterior,
    data: &DesignData,
    batch: &[usize],
    bound: Bound,
    engine: Engine,
    rho: f64,
    ada: &mut GmeAdagrad,
    sampling: &Sampling,
) -> Result<(GmePosterior, StepReport)> {
    let t = grad_terms(model, post, data, batch, bound, sampling)?;
    let scale = if batch.is_empty() { 0.0 } else { data.len() as f64 / batch.len() as f64 };
    let q = &post.weights;
    let prior_p = model.prior.precision();
    let mut report = StepReport { skipped: t.skipped, ..Default::default() };

    let grad_m = prior_p * (model.prior.mean() - q.mean()) + &t.grad * scale;
    let natural_precision = || -> Result<(Matrix, bool)> {
        let target = linalg::symmetrized(prior_p - &t.curv * scale);
        optim::guard_precision(optim::blend_matrix(q.precision(), &target, rho)?)
    };
    let natural_sigma = |report: &mut StepReport| -> Result<RayleighDist> {
        let theta = optim::natural_blend_scalar(post.noise.natural(), sigma_natural_target(model, post, scale * t.noise), rho)?;
        if theta < 0.0 && theta.is_finite() {
            RayleighDist::from_natural(theta)
        } else {
            report.sigma_rejected = true;
            Ok(post.noise)
        }
    };

    let next = match engine {
        Engine::SDsvi => {
            let c = q.chol();
            let mut gc = -(c * prior_p) + c * (&t.curv * scale);
            for k in 0..model.dim() {
                gc[(k, k)] += 1.0 / c[(k, k)];
            }
            let gc = linalg::triu(&gc);
            let dm = ada.mean.step_vector(&grad_m)?;
            let dc = Matrix::from_vec(gc.nrows(), gc.ncols(), ada.chol.step(gc.as_slice())?);
            let (c_new, _) = optim::cholesky_grad_step(c, &dc, 1.0)?;
            let ds = ada.sigma.step(&[sigma_gradient(model, post, scale * t.noise)])?[0];
            let sigma = positive_step(post.noise.scale(), ds)?;
            GmePosterior {
                weights: GaussianDist::from_cholesky(q.mean() + dm, c_new)?,
                noise: RayleighDist::new(sigma * sigma)?,
            }
        }
        Engine::McSsvi => {
            let (p, fired) = natural_precision()?;
            report.guard_fired = fired;
            let target_shift = prior_p * model.prior.mean() + (&t.grad - &t.curv * q.mean()) * scale;
            let shift = (q.precision() * q.mean()) * (1.0 - rho) + target_shift * rho;
            let mean = linalg::spd_solve(&p, &shift)?;
            GmePosterior { weights: GaussianDist::from_precision(mean, p)?, noise: natural_sigma(&mut report)? }
        }
        Engine::HMcSsvi => {
            let (p, fired) = natural_precision()?;
            report.guard_fired = fired;
            let dm = ada.mean.step_vector(&grad_m)?;
            GmePosterior { weights: GaussianDist::from_precision(q.mean() + dm, p)?, noise: natural_sigma(&mut report)? }
        }
    };
    Ok((next, report))
}

/// `x + δ`, halving `δ` until the result is positive.
fn positive_step(x: f64, delta: f64) -> Result<f64> {
    let mut d = delta;
    for _ in 0..=optim::MAX_HALVINGS {
        if x + d > 0.0 {
            return Ok(x + d);
        }
        d *= 0.5;
    }
    Err(Error::StepRejected { halvings: optim::MAX_HALVINGS })
}

/// Minibatch driver for the structured bounds.
#[derive(Debug, Clone)]
pub struct GmeTrainer {
    pub model: GmeModel,
    post: GmePosterior,
    bound: Bound,
    engine: Engine,
    schedule: StepSchedule,
    ada: GmeAdagrad,
    sampler: EpochSampler,
    sampling: Sampling,
    iteration: u64,
    pub guard_events: u64,
    pub sigma_rejections: u64,
}

impl GmeTrainer {
    pub fn new(model: GmeModel, bound: Bound, n: usize, config: &TrainConfig, n_inner: usize) -> Result<Self> {
        let post = model.initial_posterior()?;
        let d = model.dim();
        Ok(GmeTrainer {
            post,
            bound,
            engine: config.engine,
            schedule: config.schedule.clone(),
            ada: GmeAdagrad::new(d, config.learning_rate),
            sampler: EpochSampler::new(n, config.batch_size, rng::mix(config.seed, 1)),
            sampling: Sampling::monte_carlo(config.mc_samples, n_inner, rng::mix(config.seed, 2))?,
            iteration: 0,
            guard_events: 0,
            sigma_rejections: 0,
            model,
        })
    }

    pub fn set_sampling(&mut self, sampling: Sampling) {
        self.sampling = sampling;
    }

    pub fn posterior(&self) -> &GmePosterior {
        &self.post
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.sampler.epoch()
    }

    pub fn step(&mut self, data: &DesignData) -> Result<()> {
        let batch = self.sampler.next_batch();
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rho = match self.engine {
            Engine::SDsvi => 1.0,
            _ => self.schedule.next_rho(),
        };
        let sampling = self.sampling.reseeded(self.iteration);
        let (post, report) =
            update(&self.model, &self.post, data, &batch, self.bound, self.engine, rho, &mut self.ada, &sampling)?;
        self.post = post;
        self.guard_events += report.guard_fired as u64;
        self.sigma_rejections += report.sigma_rejected as u64;
        self.iteration += 1;
        Ok(())
    }
}

/// Mean-field state: `q(fᵢ) = N(βᵢ, γᵢ²)` for each training example.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanFieldState {
    pub post: GmePosterior,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// `E_{q(w₂)}[1/w₂] = √(π/2)/σ`.
pub fn mean_inverse_noise(post: &GmePosterior) -> f64 {
    special::rayleigh_mean_inverse(post.noise.scale_sq())
}

/// `zᵢ = βᵢ² + γᵢ² − 2βᵢ mᵀxᵢ + xᵢᵀ(mmᵀ + S)xᵢ`.
pub fn meanfield_z(post: &GmePosterior, x: &Vector, beta: f64, gamma: f64) -> f64 {
    let (a, v) = crate::glm::local_marginal(&post.weights, x);
    beta * beta + gamma * gamma - 2.0 * beta * a + a * a + v
}

impl MeanFieldState {
    /// `βᵢ = mᵀxᵢ`, `γᵢ = 1`.
    pub fn new(post: GmePosterior, data: &DesignData) -> Self {
        let beta = (0..data.len()).map(|i| data.row(i).dot(post.weights.mean())).collect();
        MeanFieldState { post, beta, gamma: alloc::vec![1.0; data.len()] }
    }

    /// Mean-field bound: `−KL + Σᵢ E_{q(fᵢ)}[ℓ] + E_{q(w₂)}[φᵢ] + ½ log(2πeγᵢ²)`.
    pub fn vlb(&self, model: &GmeModel, data: &DesignData, est: &Expectation) -> Result<Estimate> {
        let c = mean_inverse_noise(&self.post);
        let mean_log = special::rayleigh_mean_log(self.post.noise.scale_sq());
        let mut total = Estimate::exact(-model.kl(&self.post)?);
        for i in 0..data.len() {
            let (b, g) = (self.beta[i], self.gamma[i]);
            let (e, se) = likelihoods::expected_log_lik(&model.lik, data.y[i], b, g * g, &est.reseeded(i as u64))?;
            let z = meanfield_z(&self.post, &data.row(i), b, g);
            let phi = -0.5 * (mean_log + LN_2PI + c * z);
            let entropy = 0.5 * (LN_2PI + 1.0 + (g * g).ln());
            total = total.add(Estimate { value: e + phi + entropy, stderr: se });
        }
        Ok(total)
    }

    /// Closed-form `S = (Σ⁻¹ + cΣxxᵀ)⁻¹`, `m = S(Σ⁻¹µ + cΣβx)`.
    pub fn update_weights(&mut self, model: &GmeModel, data: &DesignData) -> Result<()> {
        let c = mean_inverse_noise(&self.post);
        let mut p = model.prior.precision().clone();
        let mut t = model.prior.precision() * model.prior.mean();
        for i in 0..data.len() {
            let x = data.row(i);
            linalg::add_outer(&mut p, &x, c);
            t.axpy(c * self.beta[i], &x, 1.0);
        }
        let mean = linalg::spd_solve(&p, &t)?;
        self.post.weights = GaussianDist::from_precision(mean, p)?;
        Ok(())
    }

    /// Gradients of the bound in `(βᵢ, γᵢ)`.
    pub fn local_gradient(&self, model: &GmeModel, data: &DesignData, i: usize, est: &Expectation) -> Result<(f64, f64)> {
        let c = mean_inverse_noise(&self.post);
        let (b, g) = (self.beta[i], self.gamma[i]);
        let (alpha, half_curv) = likelihoods::alpha_gamma(&model.lik, data.y[i], b, g * g, est)?;
        let a = data.row(i).dot(self.post.weights.mean());
        Ok((c * (a - b) + alpha, -c * g + 2.0 * g * half_curv + 1.0 / g))
    }

    /// ADAGRAD ascent on every `(βᵢ, γᵢ)` pair.
    pub fn update_locals(&mut self, model: &GmeModel, data: &DesignData, iters: usize, rate: f64, est: &Expectation) -> Result<()> {
        for i in 0..data.len() {
            let mut ada = AdagradState::with_rate(2, rate, optim::ADAGRAD_EPSILON);
            for k in 0..iters {
                let e = est.reseeded(rng::mix(i as u64, k as u64));
                let (gb, gg) = self.local_gradient(model, data, i, &e)?;
                let d = ada.step(&[gb, gg])?;
                self.beta[i] += d[0];
                self.gamma[i] = positive_step(self.gamma[i], d[1])?;
            }
        }
        Ok(())
    }

    /// σ as the positive root of `−(2/τ²)σ³ + (2 − N/2)σ + (√(π/2)/2)Σzᵢ`.
    pub fn update_sigma(&mut self, model: &GmeModel, data: &DesignData) -> Result<()> {
        let sum_z: f64 = (0..data.len()).map(|i| meanfield_z(&self.post, &data.row(i), self.beta[i], self.gamma[i])).sum();
        let sigma = meanfield_sigma_root(model.prior_noise.scale_sq(), data.len(), sum_z)?;
        self.post.noise = RayleighDist::new(sigma * sigma)?;
        Ok(())
    }

    /// Weights, then locals, then σ.
    pub fn pass(&mut self, model: &GmeModel, data: &DesignData, iters: usize, rate: f64, est: &Expectation) -> Result<()> {
        self.update_weights(model, data)?;
        self.update_locals(model, data, iters, rate, est)?;
        self.update_sigma(model, data)
    }
}

/// Unique positive root of `−(2/τ²)σ³ + (2 − N/2)σ + (√(π/2)/2)·sum_z`.
/// The cubic is concave on `σ > 0`, so the root is bracketed and refined by
/// bisection.
pub fn meanfield_sigma_root(tau_sq: f64, n: usize, sum_z: f64) -> Result<f64> {
    let a = 2.0 / tau_sq;
    let b = 2.0 - n as f64 / 2.0;
    let c = 0.5 * (core::f64::consts::PI / 2.0).sqrt() * sum_z;
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::NonFinite("mean-field noise statistic"));
    }
    let f = |s: f64| -a * s * s * s + b * s + c;
    if c == 0.0 {
        return if b > 0.0 { Ok((b / a).sqrt()) } else { Err(Error::NoPositiveRoot) };
    }
    let mut hi = 1.0;
    while f(hi) > 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NoPositiveRoot);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Rayleigh quadrature: standard-normal Gauss-Hermite nodes pushed through
/// the Rayleigh inverse CDF, `u = σ√(−2 ln Φ(−z))`.
pub fn rayleigh_nodes(noise: &RayleighDist, gh: &GaussHermite) -> Vec<(f64, f64)> {
    let s = noise.scale();
    gh.nodes()
        .iter()
        .zip(gh.weights())
        .map(|(&z, &w)| (s * (-2.0 * special::log_normal_cdf(-z)).sqrt(), w))
        .collect()
}

/// `log p(y*|data)` with `w₂` integrated by Rayleigh quadrature and `f*`
/// analytically (Gaussian) or by `inner`.
pub fn log_predictive(
    model: &GmeModel,
    post: &GmePosterior,
    x: &Vector,
    y: f64,
    outer: &GaussHermite,
    inner: &Expectation,
) -> Result<f64> {
    let (a, v) = crate::glm::local_marginal(&post.weights, x);
    let terms: Vec<f64> = rayleigh_nodes(&post.noise, outer)
        .into_iter()
        .map(|(u, w)| Ok(w.ln() + likelihoods::log_predictive(&model.lik, y, a, v + u, inner)?))
        .collect::<Result<_>>()?;
    Ok(special::log_sum_exp(&terms))
}

/// Predictive mean of the latent value is `mᵀx*`; for discrete outcomes the
/// predictive mode over the mixture is returned.
pub fn point_estimate(model: &GmeModel, post: &GmePosterior, x: &Vector, outer: &GaussHermite, inner: &Expectation) -> Result<f64> {
    let (a, v) = crate::glm::local_marginal(&post.weights, x);
    if let Likelihood::Gaussian { .. } = model.lik {
        return Ok(a);
    }
    let mut pmf: Vec<f64> = Vec::new();
    for (u, w) in rayleigh_nodes(&post.noise, outer) {
        let p = likelihoods::predictive_pmf(&model.lik, a, v + u, inner)?;
        if p.len() > pmf.len() {
            pmf.resize(p.len(), 0.0);
        }
        for (k, pk) in p.iter().enumerate() {
            pmf[k] += w * pk;
        }
    }
    let best = (0..pmf.len()).fold(0, |b, k| if pmf[k] > pmf[b] { k } else { b });
    Ok(match model.lik {
        Likelihood::Ordinal { .. } => (best + 1) as f64,
        _ => best as f64,
    })
}

pub fn evaluate(
    model: &GmeModel,
    post: &GmePosterior,
    data: &DesignData,
    outer: &GaussHermite,
    inner: &Expectation,
) -> Result<crate::glm::Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut nll, mut err) = (0.0, 0.0);
    for i in 0..data.len() {
        let x = data.row(i);
        nll -= log_predictive(model, post, &x, data.y[i], outer, inner)?;
        let pred = point_estimate(model, post, &x, outer, inner)?;
        err += likelihoods::prediction_error(&model.lik, data.y[i], pred);
    }
    let n = data.len() as f64;
    Ok(crate::glm::Evaluation { nll: nll / n, error: err / n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gh_sampling(n_outer: usize) -> Sampling {
        Sampling { n_outer, inner: Expectation::gauss_hermite(60).unwrap() }
    }

    #[test]
    fn zero_data_natural_steps_recover_priors() {
        let model = GmeModel::standard(2, Likelihood::Logistic).unwrap();
        let post = model.initial_posterior().unwrap();
        let empty = DesignData::empty(2);
        let mut ada = GmeAdagrad::new(2, 1.0);
        let (p, _) = update(&model, &post, &empty, &[], Bound::Optimal, Engine::McSsvi, 1.0, &mut ada, &gh_sampling(3)).unwrap();
        assert!(linalg::frobenius_distance(p.weights.cov(), model.prior.cov()) < 1e-12);
        assert!(p.weights.mean().norm() < 1e-12);
        assert!((p.noise.scale_sq() - 25.0).abs() < 1e-10);
    }

    #[test]
    fn sigma_root_prior_recovery() {
        assert!((meanfield_sigma_root(25.0, 0, 0.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(meanfield_sigma_root(25.0, 4, 0.0), Err(Error::NoPositiveRoot));
        let s = meanfield_sigma_root(4.0, 10, 3.0).unwrap();
        let f = -0.5 * s * s * s - 3.0 * s + 0.5 * (core::f64::consts::PI / 2.0).sqrt() * 3.0;
        assert!(f.abs() < 1e-12);
    }

    #[test]
    fn curvature_sign_shrinks_noise() {
        // With all E″/E ≤ 0 the natural target sits below the prior's.
        let model = GmeModel::standard(1, Likelihood::Gaussian { variance: 1.0 }).unwrap();
        let post = model.initial_posterior().unwrap();
        let t = sigma_natural_target(&model, &post, -3.0);
        assert!(t < model.prior_noise.natural());
        assert!(RayleighDist::from_natural(t).unwrap().scale_sq() < 25.0);
    }

    #[test]
    fn gaussian_optimal_site_matches_convolution() {
        let lik = Likelihood::Gaussian { variance: 0.5 };
        let (y, a, w2) = (0.4, -0.3, 0.2);
        let v = site_value(&lik, Bound::Optimal, y, a, w2, &Expectation::gauss_hermite(40).unwrap()).unwrap();
        let t = 0.5 + w2;
        assert!((v.value - special::log_normal_pdf(y, a, t)).abs() < 1e-10);
        assert!((v.d_a - (y - a) / t).abs() < 1e-10);
        assert!((v.d2_a + 1.0 / t).abs() < 1e-10);
        let s = site_value(&lik, Bound::Suboptimal, y, a, w2, &Expectation::gauss_hermite(40).unwrap()).unwrap();
        assert!((s.d2_a + 2.0).abs() < 1e-12);
        assert!((s.d_w2 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn predictive_gaussian_limit() {
        let model = GmeModel::standard(1, Likelihood::Gaussian { variance: 1.0 }).unwrap();
        let post = GmePosterior {
            weights: GaussianDist::new(Vector::from_vec(alloc::vec![0.5]), Matrix::from_element(1, 1, 1e-14)).unwrap(),
            noise: RayleighDist::new(1e-16).unwrap(),
        };
        let x = Vector::from_vec(alloc::vec![2.0]);
        let gh = GaussHermite::new(PREDICT_POINTS).unwrap();
        let inner = Expectation::gauss_hermite(100).unwrap();
        let lp = log_predictive(&model, &post, &x, 0.3, &gh, &inner).unwrap();
        assert!((lp - special::log_normal_pdf(0.3, 1.0, 1.0)).abs() < 1e-6);
        assert_eq!(point_estimate(&model, &post, &x, &gh, &inner).unwrap(), 1.0);
    }

    #[test]
    fn rayleigh_nodes_reproduce_moments() {
        let gh = GaussHermite::new(PREDICT_POINTS).unwrap();
        let r = RayleighDist::new(2.0).unwrap();
        let nodes = rayleigh_nodes(&r, &gh);
        let m2: f64 = nodes.iter().map(|(u, w)| w * u * u).sum();
        let m1: f64 = nodes.iter().map(|(u, w)| w * u).sum();
        assert!((m2 - 4.0).abs() < 1e-3);
        assert!((m1 - (2.0f64 * core::f64::consts::PI / 2.0).sqrt()).abs() < 1e-3);
    }
}
