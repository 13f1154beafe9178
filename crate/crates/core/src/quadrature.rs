//! Gauss-Hermite rules for expectations under a univariate Gaussian.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float;

/// Nodes and weights for `E_{N(0,1)}[g(z)] ≈ Σ wᵢ g(zᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence, physicists'
    /// nodes rescaled to the standard normal.
    pub fn new(points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one point"));
        }
        let n = points;
        let nf = n as f64;
        let pim4 = PI.powf(-0.25);
        let mut x = alloc::vec![0.0; n];
        let mut w = alloc::vec![0.0; n];
        // Jacobi-matrix eigenvalues seed the Newton refinement; the classical
        // asymptotic guesses drift onto the wrong root for large rules.
        let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                ((i.max(j)) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = nalgebra::SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        guesses.sort_by(|a, b| b.total_cmp(a));
        let half = n.div_ceil(2);
        for i in 0..half {
            let mut z = guesses[i];
            let mut pp = 0.0;
            // Polynomial values grow like exp(z²/2); track a log scale so
            // large rules do not overflow.
            let mut log_scale = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                log_scale = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                    if p1.abs() > 1e100 {
                        p1 *= 1e-100;
                        p2 *= 1e-100;
                        log_scale += 100.0 * core::f64::consts::LN_10;
                    }
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-14 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = (core::f64::consts::LN_2 - 2.0 * (pp.abs().ln() + log_scale)).exp();
            w[n - 1 - i] = w[i];
        }
        let sqrt_pi = PI.sqrt();
        let nodes = x.iter().rev().map(|xi| xi * core::f64::consts::SQRT_2).collect();
        let weights = w.iter().rev().map(|wi| wi / sqrt_pi).collect();
        Ok(GaussHermite { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E_{N(mean, var)}[g(f)]`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut g: F) -> f64 {
        let sd = var.max(0.0).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(mean + sd * z))
            .sum()
    }

    /// `log E_{N(mean, var)}[exp(g(f))]`, evaluated in log space.
    pub fn log_expect_exp<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut g: F) -> f64 {
        let sd = var.max(0.0).sqrt();
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w.ln() + g(mean + sd * z))
            .collect();
        crate::special::log_sum_exp(&terms)
    }
}
