//! Per-frame inference: EM learning of `(α, β, λ)` under the variational
//! bound, and the posterior-regularized Gaussian update with a box-constrained
//! mean.
//!
//! The quantity EM ascends is the evidence lower bound
//!
//! ```text
//! F(r, θ) = E_r[log N(y | Hu, β⁻¹I)] + E_r[log q(u | ū, λ, α)]
//!           + log Gamma(β | a, b) + log β − (ρ/2)·E_r‖u − ū‖² + H[r]
//! ```
//!
//! where `q` is the bound-form prior, `ρ` a weak fixed ridge on the
//! prediction error and `H[r]` the Gaussian entropy. The update of `r` over
//! Gaussians with mean in `[lo, hi]` and the closed-form M-step each maximize
//! `F` in their own block, so `F` never decreases.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::GradientOperator;
use crate::sparseprior::{
    self, alpha_for_lambda, bound_penalty, log_normalizer, optimal_tau, prior_precision,
    SparsePriorParams,
};

pub use qp::{solve_box_qp, BoundState, BoxQpSolution};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian over node potentials (mV).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::invalid("belief covariance shape mismatch"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric("belief mean is not finite"));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Self {
        let n = mean.len();
        GaussianBelief {
            mean,
            cov: DMatrix::from_diagonal_element(n, n, variance),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Measurement-noise precision and its Gamma prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub beta: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
}

/// Closed interval for the posterior mean (mV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageBox {
    pub lo: f64,
    pub hi: f64,
}

impl Default for VoltageBox {
    fn default() -> Self {
        VoltageBox { lo: -90.0, hi: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaInit {
    /// `n_leads / ‖y‖²`, clipped to `[1e-6, 1e6]`.
    Auto,
    Fixed(f64),
}

/// Everything the inference step needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Generalized Gaussian shape.
    pub p: f64,
    /// Floor on `τ = 1/λ`.
    pub tau_min: f64,
    pub max_em: usize,
    /// Relative change of the objective that stops EM.
    pub em_tol: f64,
    pub max_inner: usize,
    pub inner_tol: f64,
    /// Log-space damping of the `α ↔ λ` fixed point, in `(0, 1]`.
    pub damping: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    /// Initial per-edge precision (also the baseline prior scale).
    pub lambda_init: f64,
    pub alpha_init: f64,
    pub beta_init: BetaInit,
    /// Relative diagonal jitter on the posterior precision.
    pub jitter_rel: f64,
    /// Precision (1/mV²) of a weak Gaussian prior on the prediction error
    /// itself; pins the constant mode that `D` and a reference-free `H` miss.
    pub error_ridge: f64,
    pub voltage_box: VoltageBox,
    pub kkt_tol: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            p: 0.05,
            tau_min: sparseprior::DEFAULT_TAU_MIN,
            max_em: 30,
            em_tol: 1e-6,
            max_inner: 200,
            inner_tol: 1e-8,
            damping: 0.8,
            gamma_a: 1.0,
            gamma_b: 0.0,
            lambda_init: 1.0,
            alpha_init: 1.0,
            beta_init: BetaInit::Auto,
            jitter_rel: 1e-10,
            error_ridge: 1e-4,
            voltage_box: VoltageBox::default(),
            kkt_tol: 1e-8,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 2.0) {
            return Err(Error::invalid(format!("p must lie in (0, 2), got {}", self.p)));
        }
        if !(self.tau_min > 0.0) || !(self.lambda_init > 0.0) || !(self.alpha_init > 0.0) {
            return Err(Error::invalid("tau_min, lambda_init and alpha_init must be positive"));
        }
        if self.lambda_init > 1.0 / self.tau_min {
            return Err(Error::invalid("lambda_init exceeds the 1/tau_min cap"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("damping must lie in (0, 1]"));
        }
        if !(self.gamma_a > 0.0) || self.gamma_b < 0.0 {
            return Err(Error::invalid("gamma prior needs a > 0 and b >= 0"));
        }
        if self.jitter_rel < 0.0 || self.error_ridge < 0.0 {
            return Err(Error::invalid("jitter and ridge must be non-negative"));
        }
        if !(self.voltage_box.lo < self.voltage_box.hi) {
            return Err(Error::invalid("voltage box is empty"));
        }
        if let BetaInit::Fixed(b) = self.beta_init {
            if !(b > 0.0) {
                return Err(Error::invalid("fixed beta must be positive"));
            }
        }
        Ok(())
    }

    pub fn lambda_max(&self) -> f64 {
        1.0 / self.tau_min
    }

    pub fn initial_beta(&self, y: &DVector<f64>) -> f64 {
        match self.beta_init {
            BetaInit::Fixed(b) => b,
            BetaInit::Auto => {
                let energy = y.norm_squared();
                let beta = if energy > 0.0 {
                    y.len() as f64 / energy
                } else {
                    f64::INFINITY
                };
                beta.clamp(1e-6, 1e6)
            }
        }
    }
}

/// Lead field with its Gram matrix cached.
#[derive(Debug, Clone)]
pub struct Observation {
    pub h: DMatrix<f64>,
    pub hth: DMatrix<f64>,
}

impl Observation {
    pub fn new(h: DMatrix<f64>) -> Self {
        let hth = h.tr_mul(&h);
        Observation { h, hth }
    }

    pub fn n_leads(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.h.ncols()
    }
}

/// Posterior second moments feeding the M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// `E[(D(u − ū))_i²]` per edge.
    pub x_sq: DVector<f64>,
    /// `E‖y − Hu‖²`.
    pub resid_sq: f64,
    /// `E‖u − ū‖²`.
    pub dev_sq: f64,
}

/// E-step: edge-difference and residual second moments under `belief`.
pub fn e_step_moments(
    belief: &GaussianBelief,
    u_bar_pd: &DVector<f64>,
    d: &GradientOperator,
    obs: &Observation,
    y: &DVector<f64>,
) -> Result<Moments> {
    let n = belief.dim();
    if u_bar_pd.len() != n || d.n_cols() != n || obs.n_nodes() != n || y.len() != obs.n_leads() {
        return Err(Error::invalid("E-step dimension mismatch"));
    }
    let dev = &belief.mean - u_bar_pd;
    let mean_part = d.apply(&dev);
    let var_part = d.edge_quadratic_diag(&belief.cov);
    let x_sq = mean_part.component_mul(&mean_part) + var_part;
    let resid = y - &obs.h * &belief.mean;
    let resid_sq = resid.norm_squared() + obs.hth.dot(&belief.cov);
    let dev_sq = dev.norm_squared() + belief.cov.trace();
    Ok(Moments {
        x_sq,
        resid_sq,
        dev_sq,
    })
}

/// M-step over `(α, λ)` for fixed moments; returns `(α, λ)`.
///
/// `λ_i = 1/τ*(x_sq_i, α)` capped at `1/τ_min` and `α` solves
/// `(α²/p)^s·Σλ^s = N/p`. Without active caps the joint optimum is
/// `α^p = (p/N)·Σ x_sq^(p/2)`, which seeds a damped log-space fixed point.
pub fn m_step_prior(x_sq: &[f64], cfg: &InferenceConfig) -> Result<(f64, Vec<f64>)> {
    let p = cfg.p;
    let n = x_sq.len();
    if let Some(v) = x_sq.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN second moment {v}")));
    }
    if n == 0 {
        return Err(Error::invalid("no edges"));
    }
    let lambda_of = |alpha: f64| -> Vec<f64> {
        x_sq.iter()
            .map(|&xs| 1.0 / optimal_tau(xs, p, alpha, cfg.tau_min))
            .collect()
    };
    let positive: Vec<f64> = x_sq.iter().copied().filter(|v| *v > 0.0).collect();
    let mut log_alpha = if positive.is_empty() {
        cfg.alpha_init.ln()
    } else {
        let mean_pow = positive.iter().map(|v| (0.5 * p * v.ln()).exp()).sum::<f64>() / n as f64;
        (p * mean_pow).ln() / p
    };
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_inner {
        let lambda = lambda_of(log_alpha.exp());
        let target = alpha_for_lambda(p, &lambda).ln();
        residual = (target - log_alpha).abs();
        if !residual.is_finite() {
            return Err(Error::numeric("alpha fixed point diverged"));
        }
        log_alpha += cfg.damping * (target - log_alpha);
        if residual <= cfg.inner_tol {
            let alpha = log_alpha.exp();
            return Ok((alpha, lambda_of(alpha)));
        }
    }
    let alpha = log_alpha.exp();
    Err(Error::ConvergenceFailure {
        iterations: cfg.max_inner,
        residual,
        last_alpha: alpha,
        last_lambda: lambda_of(alpha),
    })
}

/// β maximizing the expected log-likelihood plus Gamma prior and `log β`.
pub fn m_step_beta(resid_sq: f64, n_leads: usize, cfg: &InferenceConfig) -> Result<f64> {
    let beta = (n_leads as f64 + 2.0 * (cfg.gamma_a - 1.0) + 2.0) / (resid_sq + 2.0 * cfg.gamma_b);
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::numeric(format!(
            "beta update undefined (residual second moment {resid_sq})"
        )));
    }
    Ok(beta)
}

/// Full M-step: `(α, β, λ)`.
pub fn m_step(
    x_sq: &[f64],
    resid_sq: f64,
    n_leads: usize,
    cfg: &InferenceConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let (alpha, lambda) = m_step_prior(x_sq, cfg)?;
    let beta = m_step_beta(resid_sq, n_leads, cfg)?;
    Ok((alpha, beta, lambda))
}

/// Posterior with the log-determinant of its covariance and the ridge used.
#[derive(Debug, Clone)]
pub struct PosteriorSolution {
    pub belief: GaussianBelief,
    pub log_det_cov: f64,
    /// Total diagonal regularization `ρ + δ` anchored at `ū`.
    pub ridge: f64,
    pub qp: BoxQpSolution,
}

/// Jitter `δ = jitter_rel · tr(βHᵀH + P0)/n`.
pub fn jitter_for(obs: &Observation, p0: &DMatrix<f64>, beta: f64, jitter_rel: f64) -> f64 {
    let n = p0.nrows() as f64;
    jitter_rel * (beta * obs.hth.trace() + p0.trace()) / n
}

/// Constrained Gaussian update with an explicit total ridge.
///
/// Covariance `S = (βHᵀH + P0 + ridge·I)⁻¹`; the mean minimizes
/// `½mᵀS⁻¹m − (βHᵀy + (P0 + ridge·I)ū)ᵀm` over the voltage box.
pub fn solve_posterior(
    u_bar_pd: &DVector<f64>,
    p0: &DMatrix<f64>,
    obs: &Observation,
    y: &DVector<f64>,
    beta: f64,
    ridge: f64,
    voltage_box: VoltageBox,
    kkt_tol: f64,
) -> Result<PosteriorSolution> {
    let n = u_bar_pd.len();
    if p0.shape() != (n, n) || obs.n_nodes() != n || y.len() != obs.n_leads() {
        return Err(Error::invalid("posterior update dimension mismatch"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if !(voltage_box.lo < voltage_box.hi) {
        return Err(Error::invalid("voltage box is empty"));
    }
    let mut prior_part = p0.clone();
    for i in 0..n {
        prior_part[(i, i)] += ridge;
    }
    let mut q = &obs.hth * beta + &prior_part;
    // exact symmetry for the factorization
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (q[(i, j)] + q[(j, i)]);
            q[(i, j)] = avg;
            q[(j, i)] = avg;
        }
    }
    let b = obs.h.tr_mul(y) * beta + &prior_part * u_bar_pd;
    let chol = q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("posterior precision is not positive definite"))?;
    let log_det_cov = -2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let unconstrained = chol.solve(&b);
    let mut cov = chol.inverse();
    cov = (&cov + cov.transpose()) * 0.5;

    let inside = unconstrained
        .iter()
        .all(|v| *v >= voltage_box.lo && *v <= voltage_box.hi);
    let qp = if inside {
        BoxQpSolution {
            state: vec![BoundState::Free; n],
            multipliers: DVector::zeros(n),
            kkt_residual: 0.0,
            iterations: 0,
            x: unconstrained,
        }
    } else {
        solve_box_qp(&q, &b, voltage_box.lo, voltage_box.hi, &unconstrained, kkt_tol)?
    };
    if !log_det_cov.is_finite() {
        return Err(Error::numeric("posterior covariance is degenerate"));
    }
    Ok(PosteriorSolution {
        belief: GaussianBelief {
            mean: qp.x.clone(),
            cov,
        },
        log_det_cov,
        ridge,
        qp,
    })
}

/// Constrained Gaussian update with a fixed prior precision `P0`.
///
/// The total ridge is `error_ridge + jitter_for(...)`, anchored at the
/// prediction `ū` so the constant mode stays at the predicted level.
pub fn posterior_update(
    u_bar_pd: &DVector<f64>,
    p0: &DMatrix<f64>,
    obs: &Observation,
    y: &DVector<f64>,
    beta: f64,
    cfg: &InferenceConfig,
) -> Result<PosteriorSolution> {
    let ridge = cfg.error_ridge + jitter_for(obs, p0, beta, cfg.jitter_rel);
    solve_posterior(u_bar_pd, p0, obs, y, beta, ridge, cfg.voltage_box, cfg.kkt_tol)
}

/// The objective `F` tracked by EM (see module docs), up to additive
/// constants that depend only on the dimensions.
pub fn evidence_bound(
    moments: &Moments,
    prior: &SparsePriorParams,
    noise: &NoiseModel,
    n_leads: usize,
    log_det_cov: f64,
    ridge: f64,
) -> f64 {
    let n_edges = prior.lambda.len() as f64;
    let quad: f64 = prior
        .lambda
        .iter()
        .zip(moments.x_sq.iter())
        .map(|(l, x)| l * x)
        .sum();
    let prior_term = n_edges * (log_normalizer(prior.p) - prior.alpha.ln())
        - 0.5 * quad
        - bound_penalty(prior.p, prior.alpha, &prior.lambda);
    let l = n_leads as f64;
    let beta = noise.beta;
    let likelihood = 0.5 * l * (beta.ln() - LN_2PI) - 0.5 * beta * moments.resid_sq;
    let hyper = (noise.gamma_a - 1.0) * beta.ln() - noise.gamma_b * beta + beta.ln();
    prior_term + likelihood + hyper - 0.5 * ridge * moments.dev_sq + 0.5 * log_det_cov
}

/// One EM iteration's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_min: f64,
    pub lambda_median: f64,
    pub lambda_max: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
    /// Objective drops larger than the monotonicity slack.
    pub warnings: Vec<String>,
}

impl EmTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.iterations.iter().map(|it| it.objective).collect()
    }
}

/// Slack below which an objective drop is attributed to rounding.
pub const MONOTONE_SLACK: f64 = 1e-6;

fn lambda_summary(lambda: &[f64]) -> (f64, f64, f64) {
    let mut sorted = lambda.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (sorted[0], median, sorted[n - 1])
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub belief: GaussianBelief,
    pub prior: SparsePriorParams,
    pub noise: NoiseModel,
    pub trace: EmTrace,
}

/// Learns `(α, β, λ)` by EM for one frame and returns the final constrained
/// posterior.
///
/// Iteration 0 evaluates the posterior at the initial parameters
/// (`λ = lambda_init`, `α = alpha_init`, `β` from [`InferenceConfig::initial_beta`]);
/// with `max_em = 0` the result equals a fixed-prior update with
/// `P0 = lambda_init·DᵀD`.
pub fn em_update(
    u_bar_pd: &DVector<f64>,
    obs: &Observation,
    y: &DVector<f64>,
    d: &GradientOperator,
    cfg: &InferenceConfig,
) -> Result<EmOutcome> {
    cfg.validate()?;
    let n_edges = d.n_rows();
    let n_leads = obs.n_leads();
    let mut prior = SparsePriorParams {
        p: cfg.p,
        alpha: cfg.alpha_init,
        lambda: vec![cfg.lambda_init; n_edges],
    };
    let mut noise = NoiseModel {
        beta: cfg.initial_beta(y),
        gamma_a: cfg.gamma_a,
        gamma_b: cfg.gamma_b,
    };
    let p0 = prior_precision(d, &prior.lambda);
    let mut sol = posterior_update(u_bar_pd, &p0, obs, y, noise.beta, cfg)?;
    let ridge = sol.ridge;
    let mut moments = e_step_moments(&sol.belief, u_bar_pd, d, obs, y)?;
    let mut trace = EmTrace::default();
    let record = |trace: &mut EmTrace, it: usize, prior: &SparsePriorParams, noise: &NoiseModel, objective: f64| {
        let (lambda_min, lambda_median, lambda_max) = lambda_summary(&prior.lambda);
        trace.iterations.push(EmIteration {
            iteration: it,
            alpha: prior.alpha,
            beta: noise.beta,
            lambda_min,
            lambda_median,
            lambda_max,
            objective,
        });
    };
    let mut objective = evidence_bound(&moments, &prior, &noise, n_leads, sol.log_det_cov, ridge);
    if !objective.is_finite() {
        return Err(Error::numeric("initial EM objective is not finite"));
    }
    record(&mut trace, 0, &prior, &noise, objective);

    for it in 1..=cfg.max_em {
        let (alpha, beta, lambda) = m_step(moments.x_sq.as_slice(), moments.resid_sq, n_leads, cfg)?;
        prior.alpha = alpha;
        prior.lambda = lambda;
        noise.beta = beta;
        let p0 = prior_precision(d, &prior.lambda);
        sol = solve_posterior(u_bar_pd, &p0, obs, y, beta, ridge, cfg.voltage_box, cfg.kkt_tol)?;
        moments = e_step_moments(&sol.belief, u_bar_pd, d, obs, y)?;
        let next = evidence_bound(&moments, &prior, &noise, n_leads, sol.log_det_cov, ridge);
        if !next.is_finite() {
            return Err(Error::numeric(format!("EM objective not finite at iteration {it}")));
        }
        record(&mut trace, it, &prior, &noise, next);
        if next < objective - MONOTONE_SLACK {
            trace.warnings.push(format!(
                "objective decreased by {:e} at iteration {it}",
                objective - next
            ));
        }
        let change = (next - objective).abs() / objective.abs().max(1.0);
        objective = next;
        if change < cfg.em_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(EmOutcome {
        belief: sol.belief,
        prior,
        noise,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_lattice_mesh, gradient_operator};

    fn scalar_obs(h: f64) -> Observation {
        Observation::new(DMatrix::from_element(1, 1, h))
    }

    #[test]
    fn conjugate_scalar_update() {
        // prior N(0, 1) expressed as a precision-1 ridge, H = 1, β = 1
        let cfg = InferenceConfig {
            error_ridge: 1.0,
            jitter_rel: 0.0,
            ..InferenceConfig::default()
        };
        let p0 = DMatrix::zeros(1, 1);
        let sol = posterior_update(&DVector::zeros(1), &p0, &scalar_obs(1.0), &DVector::from_element(1, 2.0), 1.0, &cfg).unwrap();
        assert!((sol.belief.mean[0] - 1.0).abs() < 1e-14);
        assert!((sol.belief.cov[(0, 0)] - 0.5).abs() < 1e-14);

        let sol = posterior_update(&DVector::zeros(1), &p0, &scalar_obs(1.0), &DVector::from_element(1, 200.0), 1.0, &cfg).unwrap();
        assert_eq!(sol.belief.mean[0], 20.0);
        assert!((sol.belief.cov[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn update_argument_errors() {
        let cfg = InferenceConfig::default();
        let p0 = DMatrix::identity(1, 1);
        let obs = scalar_obs(1.0);
        let y = DVector::zeros(1);
        assert!(posterior_update(&DVector::zeros(2), &p0, &obs, &y, 1.0, &cfg).is_err());
        assert!(posterior_update(&DVector::zeros(1), &p0, &obs, &y, 0.0, &cfg).is_err());
        let no_ridge = InferenceConfig {
            error_ridge: 0.0,
            jitter_rel: 0.0,
            ..cfg
        };
        assert!(matches!(
            posterior_update(&DVector::zeros(1), &DMatrix::zeros(1, 1), &scalar_obs(0.0), &y, 1.0, &no_ridge),
            Err(Error::NumericFailure(_))
        ));
    }

    #[test]
    fn moments_vanish_for_exact_belief() {
        let mesh = build_lattice_mesh(3, 1, 1, 1).unwrap();
        let d = gradient_operator(&mesh);
        let obs = Observation::new(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.5, 0.5, -1.0]));
        let mean = DVector::from_vec(vec![-80.0, -20.0, 10.0]);
        let belief = GaussianBelief::isotropic(mean.clone(), 0.0);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let m = e_step_moments(&belief, &mean, &d, &obs, &y).unwrap();
        assert_eq!(m.x_sq.amax(), 0.0);
        let r = &y - &obs.h * &mean;
        assert_eq!(m.resid_sq, r.norm_squared());
        assert!(e_step_moments(&belief, &DVector::zeros(2), &d, &obs, &y).is_err());
    }

    #[test]
    fn constant_moments_give_constant_lambda() {
        let cfg = InferenceConfig::default();
        let (_, lambda) = m_step_prior(&[2.5; 6], &cfg).unwrap();
        assert!(lambda.iter().all(|l| (l / lambda[0] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_moments_saturate_at_cap() {
        let cfg = InferenceConfig::default();
        let (alpha, lambda) = m_step_prior(&[0.0, 0.0, 4.0], &cfg).unwrap();
        assert!(alpha.is_finite() && alpha > 0.0);
        assert_eq!(lambda[0], cfg.lambda_max());
        assert_eq!(lambda[1], cfg.lambda_max());
        assert!(lambda[2] < cfg.lambda_max());
        assert!(m_step_prior(&[-1.0], &cfg).is_err());
    }

    #[test]
    fn inner_loop_reports_non_convergence() {
        let cfg = InferenceConfig {
            max_inner: 1,
            damping: 0.1,
            ..InferenceConfig::default()
        };
        match m_step_prior(&[0.0, 3.0, 9.0], &cfg) {
            Err(Error::ConvergenceFailure { last_lambda, .. }) => assert_eq!(last_lambda.len(), 3),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn beta_closed_form() {
        let cfg = InferenceConfig::default();
        let (n, sigma2) = (120usize, 0.04);
        let beta = m_step_beta(n as f64 * sigma2, n, &cfg).unwrap();
        assert!((beta - (n as f64 + 2.0) / (n as f64 * sigma2)).abs() < 1e-12);
        assert!(m_step_beta(0.0, n, &cfg).is_err());
    }

    #[test]
    fn initial_beta_rule() {
        let cfg = InferenceConfig::default();
        assert_eq!(cfg.initial_beta(&DVector::from_vec(vec![2.0, 0.0])), 0.5);
        assert_eq!(cfg.initial_beta(&DVector::zeros(3)), 1e6);
        let fixed = InferenceConfig {
            beta_init: BetaInit::Fixed(3.0),
            ..cfg
        };
        assert_eq!(fixed.initial_beta(&DVector::zeros(3)), 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        for bad in [
            InferenceConfig { p: 2.0, ..Default::default() },
            InferenceConfig { damping: 0.0, ..Default::default() },
            InferenceConfig { lambda_init: 1e9, ..Default::default() },
            InferenceConfig { voltage_box: VoltageBox { lo: 1.0, hi: 0.0 }, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
