//! Synthetic data drawn from each model's generative process.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::ctm::{softmax_h, CtmModel};
use crate::data::{CorpusData, DesignData, Document, TripletData};
use crate::error::{Error, Result};
use crate::expfam::GaussianDist;
use crate::likelihoods::Likelihood;
use crate::linalg::{self, Matrix, Vector};
use crate::rng;
use crate::sgp::KernelSpec;
#[allow(unused_imports)]
use num_traits::Float;

/// Features `x ~ N(0, I)`, weights `w ~ N(0, I)`, `y ~ p(y | wᵀx)`.
pub fn synth_glm(dim: usize, n: usize, lik: &Likelihood, seed: u64) -> Result<(DesignData, Vector)> {
    lik.check_params()?;
    let mut r = rng::stream(seed, 1);
    let w = rng::normal_vector(&mut r, dim);
    let x = Matrix::from_fn(n, dim, |_, _| rng::standard_normal(&mut r));
    let y = (0..n).map(|i| lik.sample(x.row(i).transpose().dot(&w), &mut r)).collect();
    Ok((DesignData::new(x, y)?, w))
}

/// `w₁ ~ N(0, I)`, `w₂ ~ Rayleigh(τ²)`, `fᵢ ~ N(w₁ᵀxᵢ, w₂)`, `yᵢ ~ p(y | fᵢ)`.
pub fn synth_gme(dim: usize, n: usize, lik: &Likelihood, tau_sq: f64, seed: u64) -> Result<(DesignData, Vector, f64)> {
    lik.check_params()?;
    if !(tau_sq > 0.0) {
        return Err(Error::InvalidParameter("tau^2 must be positive"));
    }
    let mut r = rng::stream(seed, 2);
    let w1 = rng::normal_vector(&mut r, dim);
    let w2 = tau_sq.sqrt() * rng::unit_rayleigh(&mut r);
    let x = Matrix::from_fn(n, dim, |_, _| rng::standard_normal(&mut r));
    let y = (0..n)
        .map(|i| {
            let f = x.row(i).transpose().dot(&w1) + w2.sqrt() * rng::standard_normal(&mut r);
            lik.sample(f, &mut r)
        })
        .collect();
    Ok((DesignData::new(x, y)?, w1, w2))
}

/// One-dimensional inputs uniform on `[lo, hi]`, a GP draw with the given
/// kernel, observed with the kernel's noise.
pub fn synth_sgp(n: usize, kernel: &KernelSpec, lo: f64, hi: f64, seed: u64) -> Result<DesignData> {
    if !(hi > lo) {
        return Err(Error::InvalidParameter("empty input range"));
    }
    let mut r = rng::stream(seed, 3);
    let x = Matrix::from_fn(n, 1, |_, _| lo + (hi - lo) * r.random::<f64>());
    let mut k = kernel.cross(&x, &x);
    for i in 0..n {
        k[(i, i)] += 1e-8 * kernel.signal_var;
    }
    let l = linalg::lower_cholesky(&k)?;
    let f = l * rng::normal_vector(&mut r, n);
    let noise = kernel.noise_var.sqrt();
    let y = f.iter().map(|fi| fi + noise * rng::standard_normal(&mut r)).collect();
    DesignData::new(x, y)
}

/// Columns `u_i ~ N(0, I_K)`, `v_j ~ N(0, I_K)`; each cell is observed with
/// probability `density` and drawn from `p(y | u_iᵀv_j)`.
pub fn synth_pmf(rows: usize, cols: usize, rank: usize, lik: &Likelihood, density: f64, seed: u64) -> Result<TripletData> {
    lik.check_params()?;
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter("density must lie in (0, 1]"));
    }
    let mut r = rng::stream(seed, 4);
    let u = Matrix::from_fn(rank, rows, |_, _| rng::standard_normal(&mut r));
    let v = Matrix::from_fn(rank, cols, |_, _| rng::standard_normal(&mut r));
    let mut entries = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if density < 1.0 && r.random::<f64>() >= density {
                continue;
            }
            let f = u.column(i).dot(&v.column(j));
            entries.push((i, j, lik.sample(f, &mut r)));
        }
    }
    TripletData::new(rows, cols, entries)
}

/// Topics from a symmetric Dirichlet; `µ = 0` and a random correlated `Σ`.
pub fn random_ctm_model(topics: usize, vocab: usize, concentration: f64, seed: u64) -> Result<CtmModel> {
    if topics == 0 || vocab < 2 || !(concentration > 0.0) {
        return Err(Error::InvalidParameter("need topics >= 1, vocab >= 2, positive concentration"));
    }
    let mut r = rng::stream(seed, 5);
    let gamma = Gamma::new(concentration, 1.0).map_err(|_| Error::InvalidParameter("concentration"))?;
    let mut beta = Matrix::from_fn(topics, vocab, |_, _| gamma.sample(&mut r).max(1e-12));
    for k in 0..topics {
        let s = beta.row(k).sum();
        beta.row_mut(k).scale_mut(1.0 / s);
    }
    let p = topics - 1;
    let a = Matrix::from_fn(p, p, |_, _| rng::standard_normal(&mut r));
    let sigma = (&a * a.transpose()) / p.max(1) as f64 + Matrix::identity(p, p) * 0.5;
    CtmModel::from_beta(beta, GaussianDist::new(Vector::zeros(p), sigma)?)
}

/// Documents of `words` tokens each: `η ~ N(µ, Σ)`, `z ~ h(η)`, `w ~ β_z`.
pub fn synth_ctm(model: &CtmModel, docs: usize, words: usize, seed: u64) -> Result<CorpusData> {
    let mut r = rng::stream(seed, 6);
    let out = (0..docs)
        .map(|_| {
            let eta = rng::gaussian_draw(&mut r, model.prior.mean(), model.prior.chol());
            let h = softmax_h(&eta);
            let tokens: Vec<usize> = (0..words)
                .map(|_| {
                    let z = categorical(&mut r, h.iter().copied());
                    categorical(&mut r, model.beta().row(z).iter().copied())
                })
                .collect();
            Document::from_tokens(model.vocab(), &tokens)
        })
        .collect();
    CorpusData::new(model.vocab(), out)
}

fn categorical<R: Rng + ?Sized>(r: &mut R, probs: impl Iterator<Item = f64> + Clone) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_stable() {
        let lik = Likelihood::Logistic;
        assert_eq!(synth_glm(3, 20, &lik, 7).unwrap(), synth_glm(3, 20, &lik, 7).unwrap());
        let a = synth_pmf(5, 6, 2, &lik, 0.5, 1).unwrap();
        assert_eq!(a, synth_pmf(5, 6, 2, &lik, 0.5, 1).unwrap());
        assert_ne!(a, synth_pmf(5, 6, 2, &lik, 0.5, 2).unwrap());
    }

    #[test]
    fn full_density_fills_the_matrix() {
        let t = synth_pmf(4, 7, 2, &Likelihood::Gaussian { variance: 0.1 }, 1.0, 3).unwrap();
        assert_eq!(t.len(), 28);
    }

    #[test]
    fn gaussian_matrix_is_centered() {
        let t = synth_pmf(60, 60, 3, &Likelihood::Gaussian { variance: 1.0 }, 1.0, 11).unwrap();
        let ys: Vec<f64> = t.entries.iter().map(|e| e.2).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        // Cells share row and column factors, so bound the mean by the
        // variance of a rank-K sum of products averaged over rows and columns.
        let se = (3.0 / 60.0 + 3.0 / 60.0 + 4.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean} vs {se}");
    }

    #[test]
    fn single_topic_words_follow_beta() {
        let beta = Matrix::from_row_slice(1, 4, &[0.1, 0.2, 0.3, 0.4]);
        let m = CtmModel::from_beta(beta, GaussianDist::standard(0).unwrap()).unwrap();
        let c = synth_ctm(&m, 50, 100, 4).unwrap();
        let mut counts = [0.0f64; 4];
        for d in &c.docs {
            for &(w, k) in &d.counts {
                counts[w] += k as f64;
            }
        }
        let chi: f64 = counts.iter().zip([0.1, 0.2, 0.3, 0.4]).map(|(o, p)| (o - 5000.0 * p).powi(2) / (5000.0 * p)).sum();
        // 99th percentile of chi-square with 3 degrees of freedom.
        assert!(chi < 11.345, "{chi}");
    }
}
