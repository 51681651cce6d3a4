//! Generalized Gaussian prior on edge differences and its Gaussian
//! variational lower bound.
//!
//! For one component the density is `(C/α)·exp(−|x|^p / α^p)` with
//! `C = p / (2Γ(1/p))`. For every `τ > 0`
//!
//! ```text
//! exp(−|x|^p / α^p) ≥ exp(−x²/(2τ) − ((2−p)/2)·(α²/(pτ))^(p/(p−2)))
//! ```
//!
//! so with `λ = 1/τ` per component the log-density is bounded below by a
//! quadratic in `x` plus a term that depends only on `(α, λ)`. The bound is
//! tight at `τ = optimal_tau(x², p, α)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mesh::GradientOperator;

pub const DEFAULT_TAU_MIN: f64 = 1e-8;

/// Shape `p`, scale `α` and per-edge precisions `λ` (`A = diag(λ)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePriorParams {
    pub p: f64,
    pub alpha: f64,
    pub lambda: Vec<f64>,
}

impl SparsePriorParams {
    pub fn validate(&self) -> Result<()> {
        check_shape(self.p, self.alpha)?;
        if let Some(l) = self.lambda.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("lambda entries must be positive, got {l}")));
        }
        Ok(())
    }

    /// Per-edge prior variances `1/λ`.
    pub fn variances(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| 1.0 / l).collect()
    }
}

fn check_shape(p: f64, alpha: f64) -> Result<()> {
    if !(p > 0.0 && p < 2.0) {
        return Err(Error::invalid(format!("shape p must lie in (0, 2), got {p}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("scale alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// `p/(p−2)`, the exponent applied to `λ` in the bound.
#[inline]
pub fn bound_exponent(p: f64) -> f64 {
    p / (p - 2.0)
}

/// `ln C` for `C = p / (2Γ(1/p))`.
pub fn log_normalizer(p: f64) -> f64 {
    p.ln() - std::f64::consts::LN_2 - ln_gamma(1.0 / p)
}

pub fn gg_log_density(x: &[f64], p: f64, alpha: f64) -> Result<f64> {
    check_shape(p, alpha)?;
    let n = x.len() as f64;
    let exponent: f64 = x.iter().map(|xi| (xi.abs() / alpha).powf(p)).sum();
    Ok(n * (log_normalizer(p) - alpha.ln()) - exponent)
}

/// `(2−p)/2 · (α²/p)^s · Σ λ_i^s` with `s = p/(p−2)`, evaluated in log space.
pub fn bound_penalty(p: f64, alpha: f64, lambda: &[f64]) -> f64 {
    let s = bound_exponent(p);
    let log_scale = (alpha * alpha / p).ln();
    let total: f64 = lambda.iter().map(|l| (s * (log_scale + l.ln())).exp()).sum();
    0.5 * (2.0 - p) * total
}

/// Log of the variational lower bound on the generalized Gaussian density.
pub fn bound_log_density(x: &[f64], p: f64, alpha: f64, lambda: &[f64]) -> Result<f64> {
    check_shape(p, alpha)?;
    if x.len() != lambda.len() {
        return Err(Error::invalid(format!(
            "{} components but {} variational parameters",
            x.len(),
            lambda.len()
        )));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::invalid(format!("lambda entries must be positive, got {l}")));
    }
    let n = x.len() as f64;
    let quad: f64 = x.iter().zip(lambda).map(|(xi, li)| li * xi * xi).sum();
    Ok(n * (log_normalizer(p) - alpha.ln()) - 0.5 * quad - bound_penalty(p, alpha, lambda))
}

/// Variational parameter `τ` that maximizes the bound for a component with
/// second moment `x_sq`, floored at `tau_min`.
///
/// Stationarity gives `x² = p·(α²/p)^s·τ^(2/(2−p))`.
pub fn optimal_tau(x_sq: f64, p: f64, alpha: f64, tau_min: f64) -> f64 {
    if !(x_sq > 0.0) {
        return tau_min;
    }
    let s = bound_exponent(p);
    let log_tau = 0.5 * (2.0 - p) * (x_sq.ln() - p.ln() - s * (alpha * alpha / p).ln());
    log_tau.exp().max(tau_min)
}

/// Scale `α` maximizing the bound for fixed `λ`:
/// `(α²/p)^s · Σ λ_i^s = N/p`.
pub fn alpha_for_lambda(p: f64, lambda: &[f64]) -> f64 {
    let s = bound_exponent(p);
    let logs: Vec<f64> = lambda.iter().map(|l| s * l.ln()).collect();
    let log_sum = log_sum_exp(&logs);
    let log_scale = ((lambda.len() as f64).ln() - p.ln() - log_sum) / s;
    (p * log_scale.exp()).sqrt()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Assembles `Dᵀ·diag(λ)·D` densely.
pub fn prior_precision(d: &GradientOperator, lambda: &[f64]) -> DMatrix<f64> {
    assert_eq!(lambda.len(), d.n_rows(), "one lambda per edge");
    let n = d.n_cols();
    let mut p = DMatrix::zeros(n, n);
    for (&(t, h), &l) in d.edge_index().iter().zip(lambda) {
        p[(t, t)] += l;
        p[(h, h)] += l;
        p[(t, h)] -= l;
        p[(h, t)] -= l;
    }
    p
}

/// Gaussian-form prior on `u` obtained from the bound: precision `DᵀAD`
/// around the predicted mean.
#[derive(Debug, Clone)]
pub struct BoundedPrior<'a> {
    pub mean_anchor: DVector<f64>,
    pub gradient: &'a GradientOperator,
    pub lambda: Vec<f64>,
}

impl BoundedPrior<'_> {
    pub fn precision(&self) -> DMatrix<f64> {
        prior_precision(self.gradient, &self.lambda)
    }

    /// `DᵀAD·v` without assembling the matrix.
    pub fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = self.gradient.apply(v);
        for (wi, l) in w.iter_mut().zip(&self.lambda) {
            *wi *= l;
        }
        self.gradient.apply_transpose(&w)
    }
}
