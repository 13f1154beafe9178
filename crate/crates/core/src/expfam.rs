//! Gaussian and Rayleigh exponential-family parameterizations.
//!
//! A size-1 natural-gradient step on a variational distribution in the same
//! family as its prior is a fixed-point update `θ_q ← θ_p + G(η_q)`. The
//! pieces needed for that identity live here: conversions between standard,
//! natural and expectation coordinates, closed-form KL divergences, and
//! `∂KL(q‖p)/∂η_q = θ_q − θ_p`.


use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
#[allow(unused_imports)]
use num_traits::Float;

/// Natural coordinates of a Gaussian, `(S⁻¹m, ½S⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianNatural {
    pub shift: Vector,
    pub half_precision: Matrix,
}

/// Expectation coordinates of a Gaussian, `(h, H) = (m, −(S + mmᵀ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianExpectation {
    pub h: Vector,
    pub big_h: Matrix,
}

/// Multivariate Gaussian holding synchronized mean, covariance, upper
/// Cholesky factor (`S = CᵀC`) and precision.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "GaussianRepr", into = "GaussianRepr"))]
pub struct GaussianDist {
    mean: Vector,
    cov: Matrix,
    chol: Matrix,
    precision: Matrix,
}

/// Serialized form: only mean and covariance; the rest is rebuilt on load.
#[cfg(feature = "serde")]
#[derive(serde::Serialize, serde::Deserialize)]
struct GaussianRepr {
    mean: Vector,
    cov: Matrix,
}

#[cfg(feature = "serde")]
impl TryFrom<GaussianRepr> for GaussianDist {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        GaussianDist::new(r.mean, r.cov)
    }
}

#[cfg(feature = "serde")]
impl From<GaussianDist> for GaussianRepr {
    fn from(g: GaussianDist) -> Self {
        GaussianRepr { mean: g.mean, cov: g.cov }
    }
}

impl GaussianDist {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: cov.nrows() });
        }
        if !mean.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean"));
        }
        let cov = linalg::symmetrized(cov);
        let chol = linalg::upper_cholesky(&cov)?;
        let precision = linalg::spd_inverse(&cov)?;
        Ok(GaussianDist { mean, cov, chol, precision })
    }

    pub fn isotropic(mean: Vector, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, Matrix::identity(d, d) * var)
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::isotropic(Vector::zeros(dim), 1.0)
    }

    /// From the mean and an upper-triangular factor with positive diagonal.
    pub fn from_cholesky(mean: Vector, chol: Matrix) -> Result<Self> {
        if chol.nrows() != mean.len() || chol.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: chol.nrows() });
        }
        if (0..chol.nrows()).any(|i| chol[(i, i)] <= 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = linalg::triu(&chol);
        let cov = linalg::symmetrized(chol.tr_mul(&chol));
        let precision = linalg::spd_inverse(&cov)?;
        Ok(GaussianDist { mean, cov, chol, precision })
    }

    /// From a precision matrix `P = S⁻¹` and a mean.
    pub fn from_precision(mean: Vector, precision: Matrix) -> Result<Self> {
        if precision.nrows() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: precision.nrows() });
        }
        let precision = linalg::symmetrized(precision);
        let cov = linalg::spd_inverse(&precision)?;
        let chol = linalg::upper_cholesky(&cov)?;
        Ok(GaussianDist { mean, cov, chol, precision })
    }

    /// Inverse of [`GaussianDist::to_natural`].
    pub fn from_natural(theta: &GaussianNatural) -> Result<Self> {
        let precision = linalg::symmetrized(&theta.half_precision * 2.0);
        let cov = linalg::spd_inverse(&precision)?;
        let mean = &cov * &theta.shift;
        let chol = linalg::upper_cholesky(&cov)?;
        Ok(GaussianDist { mean, cov, chol, precision })
    }

    /// Inverse of [`GaussianDist::to_expectation`].
    pub fn from_expectation(eta: &GaussianExpectation) -> Result<Self> {
        let cov = -&eta.big_h - &eta.h * eta.h.transpose();
        Self::new(eta.h.clone(), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn with_mean(&self, mean: Vector) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: mean.len() });
        }
        Ok(GaussianDist { mean, ..self.clone() })
    }

    /// `(S⁻¹m, ½S⁻¹)`. Errors when the condition guard trips.
    pub fn to_natural(&self) -> Result<GaussianNatural> {
        let condition = linalg::condition_estimate(&self.chol);
        if condition > linalg::CONDITION_LIMIT {
            return Err(Error::DegenerateCovariance { condition });
        }
        Ok(GaussianNatural {
            shift: &self.precision * &self.mean,
            half_precision: &self.precision * 0.5,
        })
    }

    pub fn to_expectation(&self) -> GaussianExpectation {
        GaussianExpectation {
            h: self.mean.clone(),
            big_h: -(&self.cov + &self.mean * self.mean.transpose()),
        }
    }

    pub fn log_det_cov(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn log_pdf(&self, x: &Vector) -> f64 {
        let r = x - &self.mean;
        -0.5 * (self.dim() as f64 * crate::special::LN_2PI
            + self.log_det_cov()
            + linalg::quad_form(&r, &self.precision))
    }

    /// Diagonal-only copy (off-diagonal covariance dropped).
    pub fn diagonalized(&self) -> Result<Self> {
        let cov = Matrix::from_diagonal(&self.cov.diagonal());
        Self::new(self.mean.clone(), cov)
    }
}

/// Rayleigh distribution with scale-squared `σ²`, density `(w/σ²) exp(−w²/2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RayleighDist {
    scale_sq: f64,
}

impl RayleighDist {
    pub fn new(scale_sq: f64) -> Result<Self> {
        if !(scale_sq > 0.0) || !scale_sq.is_finite() {
            return Err(Error::InvalidParameter("Rayleigh scale must be positive"));
        }
        Ok(RayleighDist { scale_sq })
    }

    /// From the natural parameter `−1/(2σ²)`; must be negative.
    pub fn from_natural(theta: f64) -> Result<Self> {
        if !(theta < 0.0) {
            return Err(Error::InvalidParameter("Rayleigh natural parameter must be negative"));
        }
        Self::new(-0.5 / theta)
    }

    pub fn scale_sq(&self) -> f64 {
        self.scale_sq
    }

    pub fn scale(&self) -> f64 {
        self.scale_sq.sqrt()
    }

    pub fn natural(&self) -> f64 {
        -0.5 / self.scale_sq
    }

    /// `E[w²] = 2σ²`.
    pub fn expectation(&self) -> f64 {
        2.0 * self.scale_sq
    }
}

/// Closed-form `KL(q ‖ p)` between Gaussians.
pub fn kl_gaussian(q: &GaussianDist, p: &GaussianDist) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), found: q.dim() });
    }
    let d = q.dim() as f64;
    let diff = p.mean() - q.mean();
    let trace = p.precision().component_mul(q.cov()).sum();
    let kl = 0.5
        * (trace + linalg::quad_form(&diff, p.precision()) - d + p.log_det_cov() - q.log_det_cov());
    Ok(kl.max(0.0))
}

/// `log(τ²/σ²) + σ²/τ² − 1` for `q = Rayl(σ²)`, `p = Rayl(τ²)`.
pub fn kl_rayleigh(q: &RayleighDist, p: &RayleighDist) -> f64 {
    let ratio = q.scale_sq / p.scale_sq;
    (ratio - 1.0 - ratio.ln()).max(0.0)
}

/// A member of one of the supported families.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Gaussian(GaussianDist),
    Rayleigh(RayleighDist),
}

/// Gradient of the KL with respect to expectation parameters, in natural coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum NaturalGradient {
    Gaussian(GaussianNatural),
    Rayleigh(f64),
}

/// `∂KL(q‖p)/∂η_q = θ_q − θ_p`.
pub fn kl_grad_wrt_expectation(q: &Family, p: &Family) -> Result<NaturalGradient> {
    match (q, p) {
        (Family::Gaussian(q), Family::Gaussian(p)) => {
            if q.dim() != p.dim() {
                return Err(Error::DimensionMismatch { expected: p.dim(), found: q.dim() });
            }
            let tq = q.to_natural()?;
            let tp = p.to_natural()?;
            Ok(NaturalGradient::Gaussian(GaussianNatural {
                shift: tq.shift - tp.shift,
                half_precision: tq.half_precision - tp.half_precision,
            }))
        }
        (Family::Rayleigh(q), Family::Rayleigh(p)) => {
            Ok(NaturalGradient::Rayleigh(q.natural() - p.natural()))
        }
        _ => Err(Error::Unsupported("KL gradient between different families")),
    }
}
