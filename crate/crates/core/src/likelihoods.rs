//! Observation models `p(y|f)` with derivatives in `f`, and Gaussian
//! expectation estimators (seeded Monte Carlo or Gauss-Hermite).

use alloc::sync::Arc;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::rng;
use crate::special::{log_factorial, log_sigmoid, log_sum_exp, sigmoid, LN_2PI};
#[allow(unused_imports)]
use num_traits::Float;

/// Default rate ceiling of the Poisson likelihood with logistic link.
pub const DEFAULT_RATE_MAX: f64 = 10.0;
/// Default ordinal settings: five levels, slope 100, cut-point gap 15.
pub const DEFAULT_ORDINAL_LEVELS: usize = 5;
pub const DEFAULT_ORDINAL_SLOPE: f64 = 100.0;
pub const DEFAULT_ORDINAL_DELTA: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Likelihood {
    /// `y ~ N(f, variance)`.
    Gaussian { variance: f64 },
    /// Binary outcome; `y > 0` is the positive class, `y ∈ {−1, 0, 1}`.
    Logistic,
    /// Counts with rate `rate_max · σ(f)`.
    PoissonLogistic { rate_max: f64 },
    /// Levels `1..=levels` with cut-points spaced `delta` apart, centred at 0.
    Ordinal { levels: usize, slope: f64, delta: f64 },
}

/// `(ℓ, ∂ℓ/∂f, ∂²ℓ/∂f²)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivs {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Likelihood {
    pub fn ordinal_default() -> Self {
        Likelihood::Ordinal {
            levels: DEFAULT_ORDINAL_LEVELS,
            slope: DEFAULT_ORDINAL_SLOPE,
            delta: DEFAULT_ORDINAL_DELTA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian { .. } => "gaussian",
            Likelihood::Logistic => "logistic",
            Likelihood::PoissonLogistic { .. } => "poisson-logistic",
            Likelihood::Ordinal { .. } => "ordinal",
        }
    }

    /// `∂²ℓ/∂f² ≤ 0` for every outcome.
    pub fn is_log_concave(&self) -> bool {
        !matches!(self, Likelihood::PoissonLogistic { .. })
    }

    pub fn check_params(&self) -> Result<()> {
        match *self {
            Likelihood::Gaussian { variance } if !(variance > 0.0) => {
                Err(Error::InvalidParameter("gaussian variance must be positive"))
            }
            Likelihood::PoissonLogistic { rate_max } if !(rate_max > 0.0) => {
                Err(Error::InvalidParameter("rate ceiling must be positive"))
            }
            Likelihood::Ordinal { levels, slope, delta }
                if levels < 2 || !(slope > 0.0) || !(delta > 0.0) =>
            {
                Err(Error::InvalidParameter("ordinal needs ≥ 2 levels and positive slope/delta"))
            }
            _ => Ok(()),
        }
    }

    pub fn validate(&self, y: f64) -> Result<()> {
        let bad = Error::InvalidOutcome { likelihood: self.name(), value: y };
        let ok = match *self {
            Likelihood::Gaussian { .. } => y.is_finite(),
            Likelihood::Logistic => y == 1.0 || y == 0.0 || y == -1.0,
            Likelihood::PoissonLogistic { .. } => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Likelihood::Ordinal { levels, .. } => {
                y >= 1.0 && y <= levels as f64 && y.fract() == 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(bad)
        }
    }

    /// Log-likelihood and its first two derivatives. `y` must be valid.
    pub fn derivs(&self, y: f64, f: f64) -> Derivs {
        match *self {
            Likelihood::Gaussian { variance } => {
                let r = y - f;
                Derivs {
                    value: -0.5 * (LN_2PI + variance.ln() + r * r / variance),
                    d1: r / variance,
                    d2: -1.0 / variance,
                }
            }
            Likelihood::Logistic => {
                let s = if y > 0.0 { 1.0 } else { -1.0 };
                let p = sigmoid(f);
                Derivs {
                    value: log_sigmoid(s * f),
                    d1: s * sigmoid(-s * f),
                    d2: -p * (1.0 - p),
                }
            }
            Likelihood::PoissonLogistic { rate_max } => {
                let p = sigmoid(f);
                let q = sigmoid(-f);
                let value = y * (rate_max.ln() + log_sigmoid(f)) - rate_max * p - log_factorial(y);
                Derivs {
                    value,
                    d1: y * q - rate_max * p * q,
                    d2: -y * p * q - rate_max * p * q * (q - p),
                }
            }
            Likelihood::Ordinal { levels, slope, delta } => {
                ordinal_derivs(y as usize, f, levels, slope, delta)
            }
        }
    }

    pub fn log_lik(&self, y: f64, f: f64) -> f64 {
        self.derivs(y, f).value
    }

    /// Draw an outcome given the latent value `f`.
    pub fn sample<R: Rng + ?Sized>(&self, f: f64, rng: &mut R) -> f64 {
        match *self {
            Likelihood::Gaussian { variance } => f + variance.sqrt() * rng::standard_normal(rng),
            Likelihood::Logistic => {
                if rng.random::<f64>() < sigmoid(f) {
                    1.0
                } else {
                    0.0
                }
            }
            Likelihood::PoissonLogistic { rate_max } => poisson(rng, rate_max * sigmoid(f)),
            Likelihood::Ordinal { levels, slope, delta } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for level in 1..=levels {
                    acc += ordinal_derivs(level, f, levels, slope, delta).value.exp();
                    if u < acc {
                        return level as f64;
                    }
                }
                levels as f64
            }
        }
    }
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    // Knuth's product method; rates here are bounded by the ceiling.
    let limit = (-rate).exp();
    let mut k = 0.0;
    let mut prod: f64 = rng.random();
    while prod > limit {
        k += 1.0;
        prod *= rng.random::<f64>();
    }
    k
}

/// Interior cut-point `b_k`, `k = 1..levels−1`.
pub fn ordinal_cutpoint(k: usize, levels: usize, delta: f64) -> f64 {
    (k as f64 - levels as f64 / 2.0) * delta
}

fn ordinal_derivs(y: usize, f: f64, levels: usize, slope: f64, delta: f64) -> Derivs {
    // p(y|f) = σ(a) − σ(b), a = s(b_y − f), b = s(b_{y−1} − f); b_0 = −∞, b_L = +∞.
    // Factored as σ(a)σ(−b)(1 − e^{−(a−b)}) with a − b = sδ fixed.
    let upper = (y < levels).then(|| slope * (ordinal_cutpoint(y, levels, delta) - f));
    let lower = (y > 1).then(|| slope * (ordinal_cutpoint(y - 1, levels, delta) - f));
    let mut d = Derivs { value: 0.0, d1: 0.0, d2: 0.0 };
    if let Some(a) = upper {
        d.value += log_sigmoid(a);
        d.d1 -= slope * sigmoid(-a);
        d.d2 -= slope * slope * sigmoid(a) * sigmoid(-a);
    }
    if let Some(b) = lower {
        d.value += log_sigmoid(-b);
        d.d1 += slope * sigmoid(b);
        d.d2 -= slope * slope * sigmoid(b) * sigmoid(-b);
    }
    if upper.is_some() && lower.is_some() {
        d.value += (-(-(slope * delta)).exp()).ln_1p();
    }
    d
}

/// `log p(y|f)` for the ordinal model; errors when `y ∉ 1..=levels`.
pub fn ordinal_loglik(y: f64, f: f64, levels: usize, slope: f64, delta: f64) -> Result<f64> {
    let lik = Likelihood::Ordinal { levels, slope, delta };
    lik.check_params()?;
    lik.validate(y)?;
    Ok(ordinal_derivs(y as usize, f, levels, slope, delta).value)
}

/// How an expectation under a univariate Gaussian is computed.
#[derive(Debug, Clone)]
pub enum Expectation {
    MonteCarlo { samples: usize, seed: u64 },
    GaussHermite(Arc<GaussHermite>),
}

/// Monte Carlo samples used for training-time expectations.
pub const DEFAULT_MC_SAMPLES: usize = 10;
/// Quadrature points used for evaluation-time expectations.
pub const DEFAULT_QUADRATURE_POINTS: usize = 100;

impl Expectation {
    pub fn monte_carlo(samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidParameter("Monte Carlo needs at least one sample"));
        }
        Ok(Expectation::MonteCarlo { samples, seed })
    }

    pub fn gauss_hermite(points: usize) -> Result<Self> {
        Ok(Expectation::GaussHermite(Arc::new(GaussHermite::new(points)?)))
    }

    /// Same estimator on an independent random stream; quadrature is unchanged.
    pub fn reseeded(&self, index: u64) -> Self {
        match self {
            Expectation::MonteCarlo { samples, seed } => {
                Expectation::MonteCarlo { samples: *samples, seed: rng::mix(*seed, index) }
            }
            gh => gh.clone(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Expectation::GaussHermite(_))
    }

    /// Standard-normal abscissae and weights realizing this estimator.
    pub fn points(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Expectation::MonteCarlo { samples, seed } => {
                let mut r = rng::stream(*seed, 0);
                let z: Vec<f64> = (0..*samples).map(|_| rng::standard_normal(&mut r)).collect();
                let w = alloc::vec![1.0 / *samples as f64; *samples];
                (z, w)
            }
            Expectation::GaussHermite(gh) => (gh.nodes().to_vec(), gh.weights().to_vec()),
        }
    }

    /// `E_{N(mean,var)}[g(f)]` for a vector-valued `g`, together with Monte
    /// Carlo standard errors (zero for quadrature).
    pub fn expect<const N: usize, G>(&self, mean: f64, var: f64, mut g: G) -> ([f64; N], [f64; N])
    where
        G: FnMut(f64) -> [f64; N],
    {
        let sd = var.max(0.0).sqrt();
        let mut sum = [0.0; N];
        let mut sum_sq = [0.0; N];
        match self {
            Expectation::MonteCarlo { samples, seed } => {
                let mut r = rng::stream(*seed, 0);
                for _ in 0..*samples {
                    let vals = g(mean + sd * rng::standard_normal(&mut r));
                    for k in 0..N {
                        sum[k] += vals[k];
                        sum_sq[k] += vals[k] * vals[k];
                    }
                }
                let n = *samples as f64;
                let mut se = [0.0; N];
                for k in 0..N {
                    sum[k] /= n;
                    if *samples > 1 {
                        let var_k = ((sum_sq[k] / n - sum[k] * sum[k]) * n / (n - 1.0)).max(0.0);
                        se[k] = (var_k / n).sqrt();
                    }
                }
                (sum, se)
            }
            Expectation::GaussHermite(gh) => {
                for (z, w) in gh.nodes().iter().zip(gh.weights()) {
                    let vals = g(mean + sd * z);
                    for k in 0..N {
                        sum[k] += w * vals[k];
                    }
                }
                (sum, [0.0; N])
            }
        }
    }
}

fn check_var(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter("variance must be positive"))
    }
}

/// `E_{N(f|m,v)}[∂ℓ/∂f]`.
pub fn alpha_term(lik: &Likelihood, y: f64, m: f64, v: f64, est: &Expectation) -> Result<f64> {
    Ok(alpha_gamma(lik, y, m, v, est)?.0)
}

/// `½ E_{N(f|m,v)}[∂²ℓ/∂f²]`, equal to `∂E[ℓ]/∂v`.
pub fn gamma_term(lik: &Likelihood, y: f64, m: f64, v: f64, est: &Expectation) -> Result<f64> {
    Ok(alpha_gamma(lik, y, m, v, est)?.1)
}

/// `(α, γ)` from one shared set of samples.
pub fn alpha_gamma(lik: &Likelihood, y: f64, m: f64, v: f64, est: &Expectation) -> Result<(f64, f64)> {
    check_var(v)?;
    lik.validate(y)?;
    let ([d1, d2], _) = est.expect(m, v, |f| {
        let d = lik.derivs(y, f);
        [d.d1, d.d2]
    });
    Ok((d1, 0.5 * d2))
}

/// `E_{N(f|m,v)}[ℓ]` with its Monte Carlo standard error.
pub fn expected_log_lik(lik: &Likelihood, y: f64, m: f64, v: f64, est: &Expectation) -> Result<(f64, f64)> {
    lik.validate(y)?;
    if v == 0.0 {
        return Ok((lik.log_lik(y, m), 0.0));
    }
    check_var(v)?;
    let ([e], [se]) = est.expect(m, v, |f| [lik.log_lik(y, f)]);
    Ok((e, se))
}

/// `log E_{N(f|m,v)}[p(y|f)]`.
pub fn log_predictive(lik: &Likelihood, y: f64, m: f64, v: f64, est: &Expectation) -> Result<f64> {
    lik.validate(y)?;
    if let Likelihood::Gaussian { variance } = lik {
        return Ok(crate::special::log_normal_pdf(y, m, variance + v.max(0.0)));
    }
    if v == 0.0 {
        return Ok(lik.log_lik(y, m));
    }
    check_var(v)?;
    let (z, w) = est.points();
    let sd = v.sqrt();
    let terms: Vec<f64> =
        z.iter().zip(&w).map(|(z, w)| w.ln() + lik.log_lik(y, m + sd * z)).collect();
    Ok(log_sum_exp(&terms))
}

/// A stochastic estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    /// Sum of independent estimates.
    pub fn add(self, other: Estimate) -> Self {
        Estimate { value: self.value + other.value, stderr: self.stderr.hypot(other.stderr) }
    }

    pub fn scale(self, c: f64) -> Self {
        Estimate { value: c * self.value, stderr: c.abs() * self.stderr }
    }
}

/// Largest count considered when tabulating count predictive distributions.
pub const MAX_COUNT: usize = 200;

/// Predictive probabilities `p(y = k)` for discrete likelihoods, indexed from
/// the smallest outcome (0 for counts, level 1 for ordinal, class 0 for
/// binary). Counts are truncated once the tail mass drops below 1e-12.
pub fn predictive_pmf(lik: &Likelihood, m: f64, v: f64, est: &Expectation) -> Result<Vec<f64>> {
    let outcomes: Vec<f64> = match *lik {
        Likelihood::Gaussian { .. } => return Err(Error::Unsupported("continuous likelihood has no pmf")),
        Likelihood::Logistic => alloc::vec![0.0, 1.0],
        Likelihood::Ordinal { levels, .. } => (1..=levels).map(|l| l as f64).collect(),
        Likelihood::PoissonLogistic { .. } => {
            let mut out = Vec::new();
            let mut total = 0.0;
            for k in 0..=MAX_COUNT {
                let p = log_predictive(lik, k as f64, m, v, est)?.exp();
                out.push(p);
                total += p;
                if k > 0 && 1.0 - total < 1e-12 {
                    break;
                }
            }
            return Ok(out);
        }
    };
    outcomes.iter().map(|&y| Ok(log_predictive(lik, y, m, v, est)?.exp())).collect()
}

/// Point prediction under `N(f|m, v)`: the mean for Gaussian outcomes, the
/// predictive mode otherwise.
pub fn point_estimate(lik: &Likelihood, m: f64, v: f64, est: &Expectation) -> Result<f64> {
    if let Likelihood::Gaussian { .. } = lik {
        return Ok(m);
    }
    let pmf = predictive_pmf(lik, m, v, est)?;
    let mut best = 0;
    for (k, p) in pmf.iter().enumerate() {
        if *p > pmf[best] {
            best = k;
        }
    }
    Ok(match lik {
        Likelihood::Ordinal { .. } => (best + 1) as f64,
        _ => best as f64,
    })
}

/// Per-example error used in traces: squared error for Gaussian outcomes,
/// zero-one for binary, absolute error for counts and ordinal levels.
pub fn prediction_error(lik: &Likelihood, y: f64, prediction: f64) -> f64 {
    match lik {
        Likelihood::Gaussian { .. } => (y - prediction) * (y - prediction),
        Likelihood::Logistic => {
            if (y > 0.0) == (prediction > 0.0) {
                0.0
            } else {
                1.0
            }
        }
        _ => (y - prediction).abs(),
    }
}

/// `(E[p], E[∂p/∂f], E[∂²p/∂f²])` under `N(f|mean,var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityTriple {
    pub e: f64,
    pub e1: f64,
    pub e2: f64,
}

/// The same triple held as `log E` and the ratios `E′/E`, `E″/E`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityRatios {
    pub log_e: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Ratios of the density-expectation triple, computed with a max shift so
/// that `E` never underflows.
pub fn density_ratios(lik: &Likelihood, y: f64, mean: f64, var: f64, est: &Expectation) -> Result<DensityRatios> {
    check_var(var)?;
    lik.validate(y)?;
    let (z, w) = est.points();
    let sd = var.sqrt();
    let evals: Vec<(f64, Derivs)> =
        z.iter().zip(&w).map(|(z, w)| (*w, lik.derivs(y, mean + sd * z))).collect();
    let shift = evals
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(_, d)| d.value)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::NonFinite("density expectation"));
    }
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (w, d) in &evals {
        let p = w * (d.value - shift).exp();
        s0 += p;
        s1 += p * d.d1;
        s2 += p * (d.d2 + d.d1 * d.d1);
    }
    if !(s0 > 0.0) {
        return Err(Error::NonFinite("density expectation"));
    }
    Ok(DensityRatios { log_e: shift + s0.ln(), r1: s1 / s0, r2: s2 / s0 })
}

/// Monte Carlo (or quadrature) estimates of `E[p]`, `E[p′]`, `E[p″]` under
/// `N(f|mean,var)`, using `p′ = e^ℓ ℓ′` and `p″ = e^ℓ(ℓ″ + ℓ′²)`.
pub fn gme_expectation_triple(lik: &Likelihood, y: f64, mean: f64, var: f64, est: &Expectation) -> Result<DensityTriple> {
    let r = density_ratios(lik, y, mean, var, est)?;
    let e = r.log_e.exp();
    Ok(DensityTriple { e, e1: e * r.r1, e2: e * r.r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gh(n: usize) -> Expectation {
        Expectation::gauss_hermite(n).unwrap()
    }

    #[test]
    fn gaussian_alpha_gamma_exact() {
        let lik = Likelihood::Gaussian { variance: 1.0 };
        let (a, g) = alpha_gamma(&lik, 0.7, 0.7, 2.0, &gh(10)).unwrap();
        assert!(a.abs() < 1e-12);
        assert!((g + 0.5).abs() < 1e-12);
        let lik = Likelihood::Gaussian { variance: 4.0 };
        let g = gamma_term(&lik, 1.0, -3.0, 0.5, &Expectation::monte_carlo(3, 1).unwrap()).unwrap();
        assert!((g + 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn logistic_small_variance_limits() {
        let lik = Likelihood::Logistic;
        let (a, g) = alpha_gamma(&lik, 1.0, 0.0, 1e-12, &gh(20)).unwrap();
        assert!((a - 0.5).abs() < 1e-6);
        assert!((g + 0.125).abs() < 1e-6);
    }

    #[test]
    fn invalid_outcomes_rejected() {
        assert!(Likelihood::Logistic.validate(2.0).is_err());
        assert!(Likelihood::PoissonLogistic { rate_max: 10.0 }.validate(-1.0).is_err());
        assert!(Likelihood::PoissonLogistic { rate_max: 10.0 }.validate(1.5).is_err());
        assert!(ordinal_loglik(0.0, 0.0, 5, 100.0, 15.0).is_err());
        assert!(ordinal_loglik(6.0, 0.0, 5, 100.0, 15.0).is_err());
        assert!(alpha_term(&Likelihood::Logistic, 1.0, 0.0, 0.0, &gh(5)).is_err());
    }

    #[test]
    fn ordinal_two_levels_is_logistic() {
        for &f in &[-0.3, 0.0, 0.02, 1.0] {
            let s = 7.0;
            let lo = ordinal_loglik(1.0, f, 2, s, 15.0).unwrap();
            let hi = ordinal_loglik(2.0, f, 2, s, 15.0).unwrap();
            assert!((lo - log_sigmoid(-s * f)).abs() < 1e-14);
            assert!((hi - log_sigmoid(s * f)).abs() < 1e-14);
        }
    }

    #[test]
    fn ordinal_concentrates_at_bin_centre() {
        // cut-points at −22.5, −7.5, 7.5, 22.5; level 2 spans (−22.5, −7.5)
        let p = ordinal_loglik(2.0, -15.0, 5, 100.0, 15.0).unwrap().exp();
        assert!(p >= 0.99);
        let p = ordinal_loglik(3.0, 0.0, 5, 100.0, 15.0).unwrap().exp();
        assert!(p >= 0.99);
    }

    #[test]
    fn ordinal_finite_far_out() {
        for &f in &[-1000.0, -30.0, 0.0, 30.0, 1000.0] {
            for y in 1..=5 {
                assert!(ordinal_loglik(y as f64, f, 5, 100.0, 15.0).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn density_ratios_gaussian_closed_form() {
        // E_{N(f|a,v)} N(y|f,s) = N(y|a, v+s); ratios follow from differentiating in a.
        let lik = Likelihood::Gaussian { variance: 1.0 };
        let (y, a, v) = (0.3, -0.2, 0.5);
        let r = density_ratios(&lik, y, a, v, &gh(40)).unwrap();
        let t = v + 1.0;
        assert!((r.log_e - crate::special::log_normal_pdf(y, a, t)).abs() < 1e-10);
        assert!((r.r1 - (y - a) / t).abs() < 1e-10);
        assert!((r.r2 - ((y - a) * (y - a) / (t * t) - 1.0 / t)).abs() < 1e-10);
    }

    #[test]
    fn triple_point_mass() {
        let lik = Likelihood::Gaussian { variance: 1.0 };
        let t = gme_expectation_triple(&lik, 0.0, 0.0, 1e-14, &gh(5)).unwrap();
        assert!((t.e - 0.398_942_280_401_432_7).abs() < 1e-6);
        assert!(gme_expectation_triple(&lik, 0.0, 0.0, 0.0, &gh(5)).is_err());
    }
}
