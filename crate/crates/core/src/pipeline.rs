//! Sequential reconstruction: ensemble prediction through the EP model
//! followed by the per-frame inference update.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epmodel::{stimulate, ApModel, ApParams, ApState, VoltageMap};
use crate::error::{Error, Result};
use crate::forward::{simulate_ecg, EcgFrame, ForwardModel};
use crate::inference::{
    em_update, posterior_update, BetaInit, EmTrace, GaussianBelief, InferenceConfig, NoiseModel, Observation,
};
use crate::mesh::{gradient_operator, GradientOperator, MeshGraph, ScarMask};
use crate::sparseprior::{prior_precision, SparsePriorParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Sparse gradient-domain error model with EM.
    Proposed,
    /// Fixed prior precision `lambda_init·DᵀD` and fixed `β`.
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    /// `2n + 1` symmetric points with equal weights.
    SigmaPoints,
    MonteCarlo { n_samples: usize },
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec::SigmaPoints
    }
}

/// Stimulus protocol shared by the ground truth and the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pacing {
    pub nodes: Vec<usize>,
    pub amplitude: f64,
    /// Frame indices at whose start the stimulus is applied.
    pub steps: Vec<usize>,
}

impl Default for Pacing {
    fn default() -> Self {
        Pacing {
            nodes: vec![0],
            amplitude: 1.0,
            steps: vec![0],
        }
    }
}

impl Pacing {
    fn nodes_at(&self, step: usize) -> Option<&[usize]> {
        self.steps.contains(&step).then_some(self.nodes.as_slice())
    }
}

/// Prior knowledge of the ECG noise level.
///
/// With a nominal SNR the noise variance is estimated from the record as
/// `σ² = P_y / (10^(snr/10) + 1)` (`P_y` the mean square of the noisy ECG),
/// and `β₀ = 1/σ²` becomes both the starting (baseline: fixed) precision and
/// the mode of a Gamma prior worth `prior_weight · n_leads` pseudo-residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub nominal_snr_db: Option<f64>,
    pub prior_weight: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            nominal_snr_db: Some(20.0),
            prior_weight: 100.0,
        }
    }
}

impl NoiseSpec {
    /// Inference settings with the noise prior applied for `ecg`.
    pub fn apply(&self, inference: &InferenceConfig, ecg: &[EcgFrame], n_leads: usize) -> Result<InferenceConfig> {
        let mut cfg = inference.clone();
        let Some(snr) = self.nominal_snr_db else {
            return Ok(cfg);
        };
        if !snr.is_finite() || self.prior_weight < 0.0 {
            return Err(Error::invalid("nominal SNR must be finite and prior_weight non-negative"));
        }
        let count: usize = ecg.iter().map(|f| f.y.len()).sum();
        let power = ecg.iter().map(|f| f.y.norm_squared()).sum::<f64>() / count.max(1) as f64;
        if !(power > 0.0) {
            return Err(Error::invalid("ECG record has zero power; nominal SNR unusable"));
        }
        let beta0 = (10f64.powf(snr / 10.0) + 1.0) / power;
        let pseudo = 0.5 * self.prior_weight * n_leads as f64;
        cfg.beta_init = BetaInit::Fixed(beta0);
        cfg.gamma_a = 1.0 + pseudo;
        cfg.gamma_b = pseudo / beta0;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub inference: InferenceConfig,
    pub noise: NoiseSpec,
    pub ensemble: EnsembleSpec,
    /// Standard deviation (mV) of the diagonal initial belief around rest.
    pub initial_std_mv: f64,
    pub voltage_map: VoltageMap,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            inference: InferenceConfig::default(),
            noise: NoiseSpec::default(),
            ensemble: EnsembleSpec::default(),
            initial_std_mv: 5.0,
            voltage_map: VoltageMap::default(),
        }
    }
}

/// Propagated samples and the Gaussian fitted to them.
#[derive(Debug, Clone)]
pub struct PredictionEnsemble {
    /// Member potentials after propagation (mV).
    pub samples: Vec<DVector<f64>>,
    /// Member recovery variables after propagation.
    pub recovery: Vec<DVector<f64>>,
    pub u_bar_pd: DVector<f64>,
    pub c_pd: DMatrix<f64>,
}

/// Symmetric square root `L` with `L·Lᵀ = cov`; Cholesky when possible,
/// otherwise an eigen-decomposition with negative eigenvalues clipped.
fn covariance_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = cov.clone().cholesky() {
        return chol.unpack();
    }
    let eig = cov.clone().symmetric_eigen();
    let mut factor = eig.eigenvectors;
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        let scale = ev.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// Draws the ensemble for `prev` (mV).
pub fn ensemble_points(
    prev: &GaussianBelief,
    spec: &EnsembleSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    let n = prev.dim();
    let factor = covariance_factor(&prev.cov);
    match spec {
        EnsembleSpec::SigmaPoints => {
            let spread = (n as f64 + 0.5).sqrt();
            let mut pts = Vec::with_capacity(2 * n + 1);
            pts.push(prev.mean.clone());
            for sign in [1.0, -1.0] {
                for j in 0..n {
                    pts.push(&prev.mean + factor.column(j) * (sign * spread));
                }
            }
            Ok(pts)
        }
        EnsembleSpec::MonteCarlo { n_samples } => {
            if *n_samples < 2 {
                return Err(Error::invalid("Monte-Carlo ensemble needs at least 2 samples"));
            }
            Ok((0..*n_samples)
                .map(|_| {
                    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
                    &prev.mean + &factor * z
                })
                .collect())
        }
    }
}

/// Mean and covariance of an ensemble. Sigma points carry equal weights
/// `1/(2n+1)`; Monte-Carlo samples use the unbiased estimator.
pub fn fit_gaussian(samples: &[DVector<f64>], spec: &EnsembleSpec) -> (DVector<f64>, DMatrix<f64>) {
    let m = samples.len();
    let n = samples[0].len();
    // shifted by the first member, so identical members give an exact mean
    let mut shift = DVector::zeros(n);
    for s in samples {
        shift += s - &samples[0];
    }
    let mean = &samples[0] + shift / m as f64;
    let mut dev = DMatrix::zeros(n, m);
    for (j, s) in samples.iter().enumerate() {
        dev.set_column(j, &(s - &mean));
    }
    let denom = match spec {
        EnsembleSpec::SigmaPoints => m as f64,
        EnsembleSpec::MonteCarlo { .. } => (m - 1) as f64,
    };
    let cov = &dev * dev.transpose() / denom;
    (mean, cov)
}

/// Prediction step: sample `prev`, push every member through one interval of
/// the (scar-free) EP model and fit a Gaussian.
///
/// Member potentials are clamped to the voltage box before propagation.
/// `recovery` holds one recovery vector per member, or a single vector
/// shared by all members.
pub fn predict(
    prev: &GaussianBelief,
    recovery: &[DVector<f64>],
    model: &ApModel,
    cfg: &FilterConfig,
    stimulus: Option<(&[usize], f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionEnsemble> {
    let n = prev.dim();
    if model.n_nodes() != n {
        return Err(Error::invalid("belief and EP model sizes differ"));
    }
    let points = ensemble_points(prev, &cfg.ensemble, rng)?;
    let m = points.len();
    if recovery.len() != m && recovery.len() != 1 {
        return Err(Error::invalid(format!(
            "{} recovery vectors for {m} ensemble members",
            recovery.len()
        )));
    }
    let vmap = cfg.voltage_map;
    let vbox = cfg.inference.voltage_box;
    let propagated: Vec<Result<ApState>> = points
        .par_iter()
        .enumerate()
        .map(|(j, pt)| {
            let clamped = pt.map(|v| v.clamp(vbox.lo, vbox.hi));
            let v = if recovery.len() == 1 { &recovery[0] } else { &recovery[j] };
            let mut state = ApState {
                u: vmap.from_millivolts(&clamped),
                v: v.clone(),
            };
            if let Some((nodes, amp)) = stimulus {
                state = stimulate(&state, nodes, amp)?;
            }
            model.step(&state).map_err(|e| {
                Error::numeric(format!("ensemble member {j}: {e}"))
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(m);
    let mut rec = Vec::with_capacity(m);
    for state in propagated {
        let state = state?;
        samples.push(vmap.to_millivolts(&state.u));
        rec.push(state.v);
    }
    let (u_bar_pd, c_pd) = fit_gaussian(&samples, &cfg.ensemble);
    Ok(PredictionEnsemble {
        samples,
        recovery: rec,
        u_bar_pd,
        c_pd,
    })
}

/// Ground-truth trajectory: potentials in mV after each interval.
pub fn simulate_ground_truth(
    mesh: &MeshGraph,
    ep: &ApParams,
    scar: Option<&ScarMask>,
    pacing: &Pacing,
    n_frames: usize,
    vmap: &VoltageMap,
) -> Result<Vec<DVector<f64>>> {
    let model = ApModel::new(ep, mesh, scar)?;
    let mut state = ApState::resting(mesh.n_nodes());
    let mut out = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        if let Some(nodes) = pacing.nodes_at(k) {
            state = stimulate(&state, nodes, pacing.amplitude)?;
        }
        state = model
            .step(&state)
            .map_err(|e| Error::AtStep { step: k, source: Box::new(e) })?;
        out.push(vmap.to_millivolts(&state.u));
    }
    Ok(out)
}

/// Clean ECG frames for a trajectory.
pub fn simulate_record(forward: &ForwardModel, trajectory: &[DVector<f64>]) -> Result<Vec<EcgFrame>> {
    trajectory
        .iter()
        .enumerate()
        .map(|(k, u)| simulate_ecg(forward, u, k))
        .collect()
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub prediction_mean: DVector<f64>,
    pub belief: GaussianBelief,
    /// Learned prior (proposed method only).
    pub prior: Option<SparsePriorParams>,
    pub noise: NoiseModel,
    pub trace: Option<EmTrace>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionRun {
    pub method: Method,
    pub steps: Vec<StepRecord>,
}

impl ReconstructionRun {
    pub fn means(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| s.belief.mean.clone()).collect()
    }

    pub fn n_frames(&self) -> usize {
        self.steps.len()
    }

    /// Per-step `1/λ` per edge, if the method learns `λ`.
    pub fn edge_variances(&self) -> Option<Vec<Vec<f64>>> {
        self.steps
            .iter()
            .map(|s| s.prior.as_ref().map(|p| p.variances()))
            .collect()
    }
}

/// Runs the filter over a whole ECG record.
#[allow(clippy::too_many_arguments)]
pub fn run_filter(
    ecg: &[EcgFrame],
    obs: &Observation,
    mesh: &MeshGraph,
    ep: &ApParams,
    pacing: &Pacing,
    method: Method,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<ReconstructionRun> {
    cfg.inference.validate()?;
    let n = mesh.n_nodes();
    if obs.n_nodes() != n {
        return Err(Error::invalid("lead field and mesh sizes differ"));
    }
    if let Some(f) = ecg.iter().find(|f| f.y.len() != obs.n_leads()) {
        return Err(Error::invalid(format!("frame {} has the wrong lead count", f.k)));
    }
    let inference = cfg.noise.apply(&cfg.inference, ecg, obs.n_leads())?;
    let cfg = &FilterConfig {
        inference,
        ..cfg.clone()
    };
    let model = ApModel::new(ep, mesh, None)?;
    let d = gradient_operator(mesh);
    let baseline_p0 = (method == Method::Baseline)
        .then(|| prior_precision(&d, &vec![cfg.inference.lambda_init; d.n_rows()]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest = cfg.voltage_map.offset_mv;
    let mut belief = GaussianBelief::isotropic(DVector::from_element(n, rest), cfg.initial_std_mv.powi(2));
    let mut recovery = vec![DVector::zeros(n)];
    let mut steps = Vec::with_capacity(ecg.len());

    for (k, frame) in ecg.iter().enumerate() {
        let started = Instant::now();
        let at = |e: Error| Error::AtStep { step: k, source: Box::new(e) };
        let stim = pacing.nodes_at(k).map(|nodes| (nodes, pacing.amplitude));
        let pred = predict(&belief, &recovery, &model, cfg, stim, &mut rng).map_err(at)?;
        let record = update_step(&pred.u_bar_pd, obs, &frame.y, &d, method, baseline_p0.as_ref(), cfg)
            .map_err(at)?;
        belief = record.belief.clone();
        recovery = pred.recovery;
        steps.push(StepRecord {
            prediction_mean: pred.u_bar_pd,
            seconds: started.elapsed().as_secs_f64(),
            ..record
        });
    }
    Ok(ReconstructionRun { method, steps })
}

fn update_step(
    u_bar_pd: &DVector<f64>,
    obs: &Observation,
    y: &DVector<f64>,
    d: &GradientOperator,
    method: Method,
    baseline_p0: Option<&DMatrix<f64>>,
    cfg: &FilterConfig,
) -> Result<StepRecord> {
    let inf = &cfg.inference;
    let (belief, prior, noise, trace) = match (method, baseline_p0) {
        (Method::Baseline, Some(p0)) => {
            let beta = inf.initial_beta(y);
            let sol = posterior_update(u_bar_pd, p0, obs, y, beta, inf)?;
            let noise = NoiseModel {
                beta,
                gamma_a: inf.gamma_a,
                gamma_b: inf.gamma_b,
            };
            (sol.belief, None, noise, None)
        }
        _ => {
            let out = em_update(u_bar_pd, obs, y, d, inf)?;
            (out.belief, Some(out.prior), out.noise, Some(out.trace))
        }
    };
    Ok(StepRecord {
        prediction_mean: u_bar_pd.clone(),
        belief,
        prior,
        noise,
        trace,
        seconds: 0.0,
    })
}
