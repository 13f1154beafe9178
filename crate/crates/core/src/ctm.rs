//! Correlated topic model. Each document has `q(η_d) = N(m_d, S_d)` over
//! `η ∈ ℝ^{K−1}`; topic assignments are summed out so a word contributes
//! `ξ_w(η) = log Σ_k h_k(η) β_{k,w}` (optimal structure) or
//! `Σ_k h_k(η) log β_{k,w}` (simple structure).

use alloc::vec::Vec;

use crate::data::{CorpusData, Document};
use crate::error::{Error, Result};
use crate::expfam::{kl_gaussian, GaussianDist};
use crate::likelihoods::Estimate;
use crate::linalg::{self, Matrix, Vector};
use crate::optim::{self, AdagradState, Engine, StepSchedule, TrainConfig};
use crate::rng::{self, StreamRng};
use crate::special;
#[allow(unused_imports)]
use num_traits::Float;

/// Spectrum floor for the estimated prior covariance.
pub const SIGMA_FLOOR: f64 = 1e-8;
/// Pseudo-count keeping closed-form topics strictly positive.
pub const TOPIC_PSEUDO_COUNT: f64 = 1e-8;
/// Iterations of batch H-MC-SSVI used to fit a held-out document.
pub const TEST_FIT_ITERS: usize = 100;
/// Importance-sampling runs with fewer effective samples are flagged.
pub const MIN_ESS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Structure {
    Optimal,
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CovMode {
    Full,
    Diagonal,
}

/// `h(η)`: softmax of `(η, 0)`.
pub fn softmax_h(eta: &Vector) -> Vector {
    let a = augmented(eta);
    let lse = special::log_sum_exp(a.as_slice());
    a.map(|x| (x - lse).exp())
}

fn augmented(eta: &Vector) -> Vector {
    let mut a = Vector::zeros(eta.len() + 1);
    a.rows_mut(0, eta.len()).copy_from(eta);
    a
}

/// `∇h_k = h_k(ẽ_k − h̃)`.
pub fn h_gradient(h: &Vector, k: usize) -> Vector {
    let p = h.len() - 1;
    let mut g = -h.rows(0, p).into_owned();
    if k < p {
        g[k] += 1.0;
    }
    g * h[k]
}

/// `∇²h_k = h_k[(ẽ_k − h̃)(ẽ_k − h̃)ᵀ − diag(h̃) + h̃h̃ᵀ]`.
pub fn h_hessian(h: &Vector, k: usize) -> Matrix {
    let p = h.len() - 1;
    let ht = h.rows(0, p).into_owned();
    let mut e = -ht.clone();
    if k < p {
        e[k] += 1.0;
    }
    let mut out = &e * e.transpose() + &ht * ht.transpose();
    for i in 0..p {
        out[(i, i)] -= ht[i];
    }
    out * h[k]
}

/// Value, gradient and Hessian of a per-word term.
#[derive(Debug, Clone, PartialEq)]
pub struct WordDerivs {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
}

/// `ξ(η) = log Σ_k h_k β_k` for one vocabulary column `log β_{·,w}`. With
/// `r_k = h_kβ_k / Σ_l h_lβ_l`: `∇ξ = r̃ − h̃`,
/// `∇²ξ = diag(r̃) − r̃r̃ᵀ − diag(h̃) + h̃h̃ᵀ`.
pub fn xi_derivs(eta: &Vector, log_beta_w: &Vector) -> WordDerivs {
    let a = augmented(eta);
    let log_z = special::log_sum_exp(a.as_slice());
    let joint = &a + log_beta_w;
    let log_num = special::log_sum_exp(joint.as_slice());
    let h = a.map(|x| (x - log_z).exp());
    let r = joint.map(|x| (x - log_num).exp());
    let p = eta.len();
    let ht = h.rows(0, p).into_owned();
    let rt = r.rows(0, p).into_owned();
    let mut hess = &ht * ht.transpose() - &rt * rt.transpose();
    for i in 0..p {
        hess[(i, i)] += rt[i] - ht[i];
    }
    WordDerivs { value: log_num - log_z, grad: rt - ht, hess }
}

/// `Σ_k l_k h_k(η)` with fixed weights `l` (summed `c_w log β_{k,w}` for the
/// simple-structured bound).
pub fn simple_derivs(eta: &Vector, weights: &Vector) -> WordDerivs {
    let h = softmax_h(eta);
    let p = eta.len();
    let mean = h.dot(weights);
    let ht = h.rows(0, p).into_owned();
    let g = ht.component_mul(&weights.rows(0, p));
    let grad = &g - &ht * mean;
    let mut hess = (&ht * ht.transpose()) * (2.0 * mean) - &g * ht.transpose() - &ht * g.transpose();
    for i in 0..p {
        hess[(i, i)] += g[i] - mean * ht[i];
    }
    WordDerivs { value: mean, grad, hess }
}

/// Topics `β` (`K × V`, rows on the simplex), their minimum representation
/// `α` (last column pinned at 0) and the prior `N(µ, Σ)` over `η`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CtmModel {
    alpha: Matrix,
    beta: Matrix,
    log_beta: Matrix,
    pub prior: GaussianDist,
}

impl CtmModel {
    pub fn from_beta(beta: Matrix, prior: GaussianDist) -> Result<Self> {
        if prior.dim() + 1 != beta.nrows() {
            return Err(Error::DimensionMismatch { expected: beta.nrows() - 1, found: prior.dim() });
        }
        for row in beta.row_iter() {
            if row.iter().any(|&b| !(b > 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter("topics must be strictly positive rows summing to one"));
            }
        }
        let v = beta.ncols();
        let log_beta = beta.map(f64::ln);
        let alpha = Matrix::from_fn(beta.nrows(), v, |k, w| log_beta[(k, w)] - log_beta[(k, v - 1)]);
        Ok(CtmModel { alpha, beta, log_beta, prior })
    }

    pub fn from_alpha(alpha: Matrix, prior: GaussianDist) -> Result<Self> {
        let mut m = CtmModel { beta: alpha.clone(), log_beta: alpha.clone(), alpha, prior };
        m.refresh_topics()?;
        Ok(m)
    }

    /// Topics from word counts of randomly chosen documents plus uniform
    /// noise in `[1, 2]`; `µ = 0`, `Σ = I`.
    pub fn initialize(topics: usize, corpus: &CorpusData, seed: u64) -> Result<Self> {
        use rand::Rng;
        if topics == 0 || corpus.vocab < 2 {
            return Err(Error::InvalidParameter("need at least one topic and two vocabulary words"));
        }
        let mut r = rng::stream(seed, 0xc7);
        let mut beta = Matrix::zeros(topics, corpus.vocab);
        for k in 0..topics {
            if !corpus.is_empty() {
                let d = r.random_range(0..corpus.len());
                for &(w, c) in &corpus.docs[d].counts {
                    beta[(k, w)] += c as f64;
                }
            }
            for w in 0..corpus.vocab {
                beta[(k, w)] += 1.0 + r.random::<f64>();
            }
            let s = beta.row(k).sum();
            beta.row_mut(k).scale_mut(1.0 / s);
        }
        Self::from_beta(beta, GaussianDist::standard(topics - 1)?)
    }

    pub fn topics(&self) -> usize {
        self.beta.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.beta.ncols()
    }

    pub fn beta(&self) -> &Matrix {
        &self.beta
    }

    pub fn log_beta(&self) -> &Matrix {
        &self.log_beta
    }

    pub fn alpha(&self) -> &Matrix {
        &self.alpha
    }

    pub fn log_beta_column(&self, w: usize) -> Vector {
        self.log_beta.column(w).into_owned()
    }

    fn refresh_topics(&mut self) -> Result<()> {
        let v = self.alpha.ncols();
        for k in 0..self.alpha.nrows() {
            self.alpha[(k, v - 1)] = 0.0;
            let row: Vec<f64> = self.alpha.row(k).iter().copied().collect();
            let lse = special::log_sum_exp(&row);
            for w in 0..v {
                self.log_beta[(k, w)] = row[w] - lse;
                self.beta[(k, w)] = self.log_beta[(k, w)].exp();
            }
        }
        if !linalg::all_finite(&self.log_beta) {
            return Err(Error::NonFinite("topics"));
        }
        Ok(())
    }

    /// `β_k ∝ counts_k + pseudo-count`.
    pub fn set_topics_from_counts(&mut self, counts: &Matrix) -> Result<()> {
        let mut beta = counts.map(|c| c.max(0.0) + TOPIC_PSEUDO_COUNT);
        for k in 0..beta.nrows() {
            let s = beta.row(k).sum();
            beta.row_mut(k).scale_mut(1.0 / s);
        }
        *self = Self::from_beta(beta, self.prior.clone())?;
        Ok(())
    }

    /// Per-topic weights `Σ_w c_w log β_{k,w}` for a document.
    pub fn simple_weights(&self, doc: &Document) -> Vector {
        let mut l = Vector::zeros(self.topics());
        for &(w, c) in &doc.counts {
            l.axpy(c as f64, &self.log_beta.column(w), 1.0);
        }
        l
    }

    /// `log p(w_d | η) = Σ_w c_w ξ_w(η)`.
    pub fn doc_log_lik(&self, doc: &Document, eta: &Vector) -> f64 {
        let a = augmented(eta);
        let log_z = special::log_sum_exp(a.as_slice());
        doc.counts
            .iter()
            .map(|&(w, c)| {
                let joint = &a + self.log_beta.column(w);
                c as f64 * (special::log_sum_exp(joint.as_slice()) - log_z)
            })
            .sum()
    }

    fn check_doc(&self, doc: &Document) -> Result<()> {
        for &(w, _) in &doc.counts {
            if w >= self.vocab() {
                return Err(Error::DimensionMismatch { expected: self.vocab(), found: w });
            }
        }
        Ok(())
    }
}

/// Monte Carlo averages over `η^(ℓ) = m + Cᵀε^(ℓ)` of a document's summed
/// word terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTerms {
    pub value: Estimate,
    /// `Σ_n d̂_n`.
    pub grad: Vector,
    /// `2 Σ_n D̂_n`, the averaged Hessian.
    pub hess: Matrix,
    /// `Σ_n E[ε ∇ξ_nᵀ]`.
    pub eps_grad: Matrix,
}

pub fn doc_terms(model: &CtmModel, q: &GaussianDist, doc: &Document, structure: Structure, n_mc: usize, rng: &mut StreamRng) -> Result<DocTerms> {
    model.check_doc(doc)?;
    if n_mc == 0 {
        return Err(Error::InvalidParameter("need at least one sample"));
    }
    let p = q.dim();
    let weights = model.simple_weights(doc);
    let mut grad = Vector::zeros(p);
    let mut hess = Matrix::zeros(p, p);
    let mut eps_grad = Matrix::zeros(p, p);
    let mut values = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let eps = rng::normal_vector(rng, p);
        let eta = q.mean() + q.chol().tr_mul(&eps);
        let d = match structure {
            Structure::Simple => simple_derivs(&eta, &weights),
            Structure::Optimal => {
                let mut acc = WordDerivs { value: 0.0, grad: Vector::zeros(p), hess: Matrix::zeros(p, p) };
                for &(w, c) in &doc.counts {
                    let x = xi_derivs(&eta, &model.log_beta_column(w));
                    let c = c as f64;
                    acc.value += c * x.value;
                    acc.grad.axpy(c, &x.grad, 1.0);
                    acc.hess += x.hess * c;
                }
                acc
            }
        };
        values.push(d.value);
        eps_grad.ger(1.0, &eps, &d.grad, 1.0);
        grad += d.grad;
        hess += d.hess;
    }
    let n = n_mc as f64;
    Ok(DocTerms { value: sample_mean(&values), grad: grad / n, hess: hess / n, eps_grad: eps_grad / n })
}

fn sample_mean(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ((n - 1.0) * n)).sqrt()
    } else {
        0.0
    };
    Estimate { value: mean, stderr: se }
}

/// Per-document optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct DocOptimizer {
    pub schedule: StepSchedule,
    pub mean: AdagradState,
    pub chol: AdagradState,
}

impl DocOptimizer {
    pub fn new(dim: usize, schedule: StepSchedule, rate: f64) -> Self {
        DocOptimizer {
            schedule,
            mean: AdagradState::with_rate(dim, rate, optim::ADAGRAD_EPSILON),
            chol: AdagradState::with_rate(dim * dim, rate, optim::ADAGRAD_EPSILON),
        }
    }
}

fn diagonal_part(m: &Matrix) -> Matrix {
    Matrix::from_diagonal(&m.diagonal())
}

/// One update of `q(η_d)`.
///
/// Natural engines: `S⁻¹ ← (1−ρ)S⁻¹ + ρ(Σ⁻¹ + Π₊(−2ΣD̂))`; the mean follows
/// by ADAGRAD (hybrid) or by the matching natural step. S-DSVI steps `m` and
/// the Cholesky factor by ADAGRAD.
#[allow(clippy::too_many_arguments)]
pub fn doc_update(
    model: &CtmModel,
    q: &GaussianDist,
    doc: &Document,
    structure: Structure,
    engine: Engine,
    cov: CovMode,
    opt: &mut DocOptimizer,
    n_mc: usize,
    rng: &mut StreamRng,
) -> Result<GaussianDist> {
    let t = doc_terms(model, q, doc, structure, n_mc, rng)?;
    let prior_p = model.prior.precision();
    let grad_m = prior_p * (model.prior.mean() - q.mean()) + &t.grad;
    match engine {
        Engine::HMcSsvi | Engine::McSsvi => {
            let rho = opt.schedule.next_rho();
            let mut target = prior_p + optim::psd_project(&(-&t.hess))?;
            if cov == CovMode::Diagonal {
                target = diagonal_part(&target);
            }
            let p = optim::blend_matrix(q.precision(), &target, rho)?;
            let mean = if engine == Engine::HMcSsvi {
                q.mean() + opt.mean.step_vector(&grad_m)?
            } else {
                let shift = (q.precision() * q.mean()) * (1.0 - rho) + (&target * q.mean() + &grad_m) * rho;
                linalg::spd_solve(&p, &shift)?
            };
            GaussianDist::from_precision(mean, p)
        }
        Engine::SDsvi => {
            let c = q.chol();
            let mut gc = -(c * prior_p) + &t.eps_grad;
            for i in 0..c.nrows() {
                gc[(i, i)] += 1.0 / c[(i, i)];
            }
            let gc = match cov {
                CovMode::Full => linalg::triu(&gc),
                CovMode::Diagonal => diagonal_part(&gc),
            };
            let dm = opt.mean.step_vector(&grad_m)?;
            let dc = Matrix::from_vec(gc.nrows(), gc.ncols(), opt.chol.step(gc.as_slice())?);
            let (c_new, _) = optim::cholesky_grad_step(c, &dc, 1.0)?;
            GaussianDist::from_cholesky(q.mean() + dm, c_new)
        }
    }
}

/// `µ̂ = mean m_d`, `Σ̂ = mean[S_d + (µ̂ − m_d)(µ̂ − m_d)ᵀ]`, spectrum floored.
pub fn prior_update(posts: &[GaussianDist]) -> Result<GaussianDist> {
    let first = posts.first().ok_or(Error::EmptyBatch)?;
    let p = first.dim();
    let n = posts.len() as f64;
    let mu = posts.iter().fold(Vector::zeros(p), |acc, q| acc + q.mean()) / n;
    let mut sigma = Matrix::zeros(p, p);
    for q in posts {
        sigma += q.cov();
        linalg::add_outer(&mut sigma, &(&mu - q.mean()), 1.0);
    }
    GaussianDist::new(mu, optim::clamp_spectrum(&(sigma / n), SIGMA_FLOOR)?)
}

/// Gradient of the bound in the minimum representation `α_{k,u}` from one
/// document, scaled by `scale`:
/// `−β_{ku}·scale·mean_ℓ(−c_u γ_{ku} + Σ_v c_v γ_{kv} β_{kv})` with
/// `γ_{kw} = h_k / Σ_l h_l β_{lw}`. The pinned last column gets zero.
pub fn topic_gradient(model: &CtmModel, q: &GaussianDist, doc: &Document, n_mc: usize, scale: f64, rng: &mut StreamRng) -> Result<Matrix> {
    model.check_doc(doc)?;
    let (kk, v) = (model.topics(), model.vocab());
    // Mean over samples of γ for the document's words, K × |doc|.
    let mut gamma = Matrix::zeros(kk, doc.counts.len());
    for _ in 0..n_mc {
        let eta = rng::gaussian_draw(rng, q.mean(), q.chol());
        let a = augmented(&eta);
        let log_z = special::log_sum_exp(a.as_slice());
        for (n, &(w, _)) in doc.counts.iter().enumerate() {
            let joint = &a + model.log_beta.column(w);
            let log_norm = special::log_sum_exp(joint.as_slice()) - log_z;
            for k in 0..kk {
                gamma[(k, n)] += (a[k] - log_z - log_norm).exp() / n_mc as f64;
            }
        }
    }
    let mut grad = Matrix::zeros(kk, v);
    for k in 0..kk {
        let s: f64 = doc.counts.iter().enumerate().map(|(n, &(w, c))| c as f64 * gamma[(k, n)] * model.beta[(k, w)]).sum();
        for u in 0..v - 1 {
            grad[(k, u)] = -model.beta[(k, u)] * scale * s;
        }
        for (n, &(w, c)) in doc.counts.iter().enumerate() {
            if w < v - 1 {
                grad[(k, w)] += model.beta[(k, w)] * scale * c as f64 * gamma[(k, n)];
            }
        }
    }
    Ok(grad)
}

/// Bound `Σ_d [−KL(q_d ‖ p) + E_{q_d}[log-likelihood term]]`; the word term
/// is estimated with `n_mc` draws per document from `stream(seed, d)`.
pub fn vlb(model: &CtmModel, posts: &[GaussianDist], corpus: &CorpusData, structure: Structure, n_mc: usize, seed: u64) -> Result<Estimate> {
    if posts.len() != corpus.len() {
        return Err(Error::DimensionMismatch { expected: corpus.len(), found: posts.len() });
    }
    let mut total = Estimate::exact(0.0);
    for (d, (q, doc)) in posts.iter().zip(&corpus.docs).enumerate() {
        let mut r = rng::stream(seed, d as u64);
        let weights = model.simple_weights(doc);
        let values: Vec<f64> = (0..n_mc)
            .map(|_| {
                let eta = rng::gaussian_draw(&mut r, q.mean(), q.chol());
                match structure {
                    Structure::Optimal => model.doc_log_lik(doc, &eta),
                    Structure::Simple => softmax_h(&eta).dot(&weights),
                }
            })
            .collect();
        total = total.add(sample_mean(&values)).add(Estimate::exact(-kl_gaussian(q, &model.prior)?));
    }
    Ok(total)
}

/// Round-robin trainer over documents; hyperparameters follow every
/// document update.
#[derive(Debug, Clone)]
pub struct CtmTrainer {
    pub model: CtmModel,
    pub posts: Vec<GaussianDist>,
    pub structure: Structure,
    pub cov: CovMode,
    pub learn_prior: bool,
    pub learn_topics: bool,
    engine: Engine,
    n_mc: usize,
    seed: u64,
    opts: Vec<DocOptimizer>,
    topic_opt: AdagradState,
    /// Cached `E_q[h(η_d)]` and the implied topic counts (simple structure).
    expected_h: Vec<Vector>,
    topic_counts: Matrix,
    cursor: usize,
    updates: u64,
}

impl CtmTrainer {
    /// Document posteriors start at the prior.
    pub fn new(model: CtmModel, corpus: &CorpusData, structure: Structure, cov: CovMode, config: &TrainConfig) -> Result<Self> {
        if corpus.vocab != model.vocab() {
            return Err(Error::DimensionMismatch { expected: model.vocab(), found: corpus.vocab });
        }
        if corpus.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let start = match cov {
            CovMode::Full => model.prior.clone(),
            CovMode::Diagonal => model.prior.diagonalized()?,
        };
        let p = model.prior.dim();
        let mut t = CtmTrainer {
            posts: alloc::vec![start; corpus.len()],
            structure,
            cov,
            learn_prior: true,
            learn_topics: true,
            engine: config.engine,
            n_mc: config.mc_samples.max(1),
            seed: config.seed,
            opts: alloc::vec![DocOptimizer::new(p, config.schedule.clone(), config.learning_rate); corpus.len()],
            topic_opt: AdagradState::with_rate(model.topics() * model.vocab(), config.learning_rate, optim::ADAGRAD_EPSILON),
            expected_h: Vec::new(),
            topic_counts: Matrix::zeros(model.topics(), model.vocab()),
            cursor: 0,
            updates: 0,
            model,
        };
        if structure == Structure::Simple {
            for d in 0..corpus.len() {
                let e = t.mean_h(d, &mut rng::stream(rng::mix(t.seed, u64::MAX), d as u64));
                t.add_topic_counts(&corpus.docs[d], &e, 1.0);
                t.expected_h.push(e);
            }
        }
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.updates
    }

    /// One epoch is one pass over the documents.
    pub fn epoch(&self) -> u64 {
        self.updates / self.posts.len() as u64
    }

    fn mean_h(&self, d: usize, r: &mut StreamRng) -> Vector {
        let q = &self.posts[d];
        let mut acc = Vector::zeros(self.model.topics());
        for _ in 0..self.n_mc {
            acc += softmax_h(&rng::gaussian_draw(r, q.mean(), q.chol()));
        }
        acc / self.n_mc as f64
    }

    fn add_topic_counts(&mut self, doc: &Document, e: &Vector, sign: f64) {
        for &(w, c) in &doc.counts {
            self.topic_counts.column_mut(w).axpy(sign * c as f64, e, 1.0);
        }
    }

    /// Updates the next document, then `µ`, `Σ` and the topics.
    pub fn step(&mut self, corpus: &CorpusData) -> Result<usize> {
        let d = self.cursor;
        let doc = &corpus.docs[d];
        let mut r = rng::stream(self.seed, self.updates);
        let q = doc_update(&self.model, &self.posts[d], doc, self.structure, self.engine, self.cov, &mut self.opts[d], self.n_mc, &mut r)?;
        if !linalg::lower_cholesky(q.cov()).is_ok() {
            return Err(Error::NotPositiveDefinite);
        }
        self.posts[d] = q;
        if self.learn_prior {
            self.model.prior = prior_update(&self.posts)?;
        }
        if self.learn_topics {
            match self.structure {
                Structure::Optimal => {
                    let g = topic_gradient(&self.model, &self.posts[d], doc, self.n_mc, corpus.len() as f64, &mut r)?;
                    let step = self.topic_opt.step(g.as_slice())?;
                    let alpha = self.model.alpha.clone() + Matrix::from_vec(g.nrows(), g.ncols(), step);
                    self.model = CtmModel::from_alpha(alpha, self.model.prior.clone())?;
                }
                Structure::Simple => {
                    let e = self.mean_h(d, &mut r);
                    let old = core::mem::replace(&mut self.expected_h[d], e.clone());
                    self.add_topic_counts(doc, &old, -1.0);
                    self.add_topic_counts(doc, &e, 1.0);
                    let counts = self.topic_counts.clone();
                    self.model.set_topics_from_counts(&counts)?;
                }
            }
        }
        self.cursor = (self.cursor + 1) % self.posts.len();
        self.updates += 1;
        Ok(d)
    }
}

/// Fits `q(η)` for a held-out document with the model fixed: batch
/// H-MC-SSVI from the prior.
pub fn fit_document(model: &CtmModel, doc: &Document, iters: usize, n_mc: usize, cov: CovMode, seed: u64) -> Result<GaussianDist> {
    let mut q = match cov {
        CovMode::Full => model.prior.clone(),
        CovMode::Diagonal => model.prior.diagonalized()?,
    };
    let mut opt = DocOptimizer::new(q.dim(), StepSchedule::default(), optim::ADAGRAD_LEARNING_RATE);
    let mut r = rng::stream(seed, 0xf17);
    for _ in 0..iters {
        q = doc_update(model, &q, doc, Structure::Optimal, Engine::HMcSsvi, cov, &mut opt, n_mc, &mut r)?;
    }
    Ok(q)
}

/// Sampling distribution for the held-out likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NllScheme {
    Prior,
    /// Fitted posterior with covariance inflated by `inflation · I`.
    Posterior { inflation: f64 },
}

impl NllScheme {
    pub const ALL: [NllScheme; 4] = [
        NllScheme::Prior,
        NllScheme::Posterior { inflation: 0.0 },
        NllScheme::Posterior { inflation: 0.1 },
        NllScheme::Posterior { inflation: 1.0 },
    ];

    pub fn name(&self) -> &'static str {
        match *self {
            NllScheme::Prior => "prior",
            NllScheme::Posterior { inflation } if inflation == 0.0 => "posterior",
            NllScheme::Posterior { inflation } if inflation == 0.1 => "posterior+0.1I",
            NllScheme::Posterior { inflation } if inflation == 1.0 => "posterior+I",
            NllScheme::Posterior { .. } => "posterior+inflated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllEstimate {
    /// `log p(w | µ, Σ, β)`: mean over batches.
    pub log_lik: f64,
    /// Standard error across batches.
    pub stderr: f64,
    /// `−log p(w)/N_d`.
    pub normalized_nll: f64,
    /// Smallest per-batch effective sample size.
    pub min_ess: f64,
    pub degenerate: bool,
}

/// Streaming `log Σ exp(xᵢ)`.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Importance-sampling estimate of `log ∫ p(w|η,β) N(η|µ,Σ) dη` with
/// `proposal` (or the prior when `None`), `n_batches` batches of `n_samples`.
pub fn held_out_log_lik(
    model: &CtmModel,
    doc: &Document,
    proposal: Option<&GaussianDist>,
    n_samples: usize,
    n_batches: usize,
    seed: u64,
) -> Result<NllEstimate> {
    model.check_doc(doc)?;
    if n_samples == 0 || n_batches == 0 {
        return Err(Error::InvalidParameter("need at least one sample and one batch"));
    }
    let sampler = proposal.unwrap_or(&model.prior);
    let mut estimates = Vec::with_capacity(n_batches);
    let mut min_ess = f64::INFINITY;
    for b in 0..n_batches {
        let mut r = rng::stream(seed, b as u64);
        let (mut s1, mut s2) = (LogSum::new(), LogSum::new());
        for _ in 0..n_samples {
            let eta = rng::gaussian_draw(&mut r, sampler.mean(), sampler.chol());
            let mut lw = model.doc_log_lik(doc, &eta);
            if proposal.is_some() {
                lw += model.prior.log_pdf(&eta) - sampler.log_pdf(&eta);
            }
            s1.add(lw);
            s2.add(2.0 * lw);
        }
        min_ess = min_ess.min((2.0 * s1.value() - s2.value()).exp());
        estimates.push(s1.value() - (n_samples as f64).ln());
    }
    let est = sample_mean(&estimates);
    let words = doc.total().max(1) as f64;
    Ok(NllEstimate {
        log_lik: est.value,
        stderr: est.stderr,
        normalized_nll: -est.value / words,
        min_ess,
        degenerate: proposal.is_some() && min_ess < MIN_ESS,
    })
}

/// Held-out likelihood under one of the four sampling schemes; posterior
/// schemes fit `q(η)` with [`fit_document`] (diagonal covariance).
pub fn test_nll(model: &CtmModel, doc: &Document, scheme: NllScheme, n_samples: usize, n_batches: usize, n_mc: usize, seed: u64) -> Result<NllEstimate> {
    match scheme {
        NllScheme::Prior => held_out_log_lik(model, doc, None, n_samples, n_batches, seed),
        NllScheme::Posterior { inflation } => {
            let q = fit_document(model, doc, TEST_FIT_ITERS, n_mc, CovMode::Diagonal, seed)?;
            let p = q.dim();
            let proposal = GaussianDist::new(q.mean().clone(), q.cov() + Matrix::identity(p, p) * inflation)?;
            held_out_log_lik(model, doc, Some(&proposal), n_samples, n_batches, seed)
        }
    }
}

/// Alternating split of a document's word positions into two halves.
pub fn split_halves(doc: &Document, vocab: usize) -> (Document, Document) {
    let tokens = doc.tokens();
    let first: Vec<usize> = tokens.iter().step_by(2).copied().collect();
    let second: Vec<usize> = tokens.iter().skip(1).step_by(2).copied().collect();
    (Document::from_tokens(vocab, &first), Document::from_tokens(vocab, &second))
}

/// Point approximation: fit on one half, score the other half at the
/// posterior mean. Returns `(log p(w₂|m), log p(w₂|m) + log N(m|µ,Σ))`, both
/// divided by the second half's word count.
pub fn point_estimate_split(model: &CtmModel, doc: &Document, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    let (a, b) = split_halves(doc, model.vocab());
    if b.counts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let q = fit_document(model, &a, TEST_FIT_ITERS, n_mc, CovMode::Diagonal, seed)?;
    let n = b.total() as f64;
    let ll = model.doc_log_lik(&b, q.mean());
    Ok((ll / n, (ll + model.prior.log_pdf(q.mean())) / n))
}
