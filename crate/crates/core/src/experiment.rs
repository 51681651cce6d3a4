//! Scar sweeps: configuration, per-trial simulation and reconstruction,
//! summary statistics and file export.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::epmodel::ApParams;
use crate::error::{Error, Result};
use crate::forward::{add_noise, synth_lead_field, EcgFrame, ForwardModel};
use crate::inference::Observation;
use crate::io::{write_json, write_table, write_vectors};
use crate::mesh::{build_lattice_mesh, make_scar, MeshGraph, ScarMask};
use crate::metrics::{
    activation_time, detect_scar, percentile, scar_metrics, variance_summary, ActivationMap,
    CrossingMode, VarianceSummary,
};
use crate::pipeline::{
    run_filter, simulate_ground_truth, simulate_record, FilterConfig, Method, Pacing,
    ReconstructionRun,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub n_segments: usize,
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec {
            nx: 16,
            ny: 16,
            nz: 1,
            n_segments: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeadSpec {
    pub n_leads: usize,
    /// Electrode sphere radius as a multiple of the mesh bounding radius.
    pub radius_factor: f64,
}

impl Default for LeadSpec {
    fn default() -> Self {
        LeadSpec {
            n_leads: 120,
            radius_factor: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub lead_field: u64,
    pub noise: u64,
    pub filter: u64,
    pub calibration: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_master(20_240_917)
    }
}

impl Seeds {
    /// Derives every stream seed from one master seed.
    pub fn from_master(seed: u64) -> Self {
        Seeds {
            lead_field: mix(seed, 1),
            noise: mix(seed, 2),
            filter: mix(seed, 3),
            calibration: mix(seed, 4),
        }
    }
}

/// SplitMix64 finalizer over `seed + stream`.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    /// Fixed prior scale `c` in `c·DᵀD`; `None` selects it from `grid`.
    pub prior_scale: Option<f64>,
    pub grid: Vec<f64>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            prior_scale: None,
            grid: vec![1e-3, 1e-2, 1e-1, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateThresholds {
    pub proposed: f64,
    pub baseline: f64,
}

impl LateThresholds {
    pub fn get(&self, method: Method) -> f64 {
        match method {
            Method::Proposed => self.proposed,
            Method::Baseline => self.baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSpec {
    pub activation_threshold_mv: f64,
    /// Percentile of the scar-free reconstruction's activation times above
    /// which a node counts as late.
    pub late_percentile: f64,
    pub crossing: CrossingMode,
    /// Per-method late thresholds (frames); `None` calibrates them.
    pub late_threshold: Option<LateThresholds>,
}

impl Default for DetectionSpec {
    fn default() -> Self {
        DetectionSpec {
            activation_threshold_mv: -35.0,
            late_percentile: 90.0,
            crossing: CrossingMode::Interpolated,
            late_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshSpec,
    /// Segments (1-based) to scar, one trial each.
    pub scar_segments: Vec<usize>,
    pub ep: ApParams,
    /// `None` paces the whole `x = 0` face at frame 0.
    pub pacing: Option<Pacing>,
    pub n_frames: usize,
    pub leads: LeadSpec,
    /// `None` leaves the ECG noise-free.
    pub snr_db: Option<f64>,
    /// Defaults to [`desk_filter`]. Keys left out of a partial `filter` block
    /// take the library defaults, not the desk ones.
    pub filter: FilterConfig,
    pub baseline: BaselineSpec,
    pub detection: DetectionSpec,
    pub seeds: Seeds,
    pub output_dir: Option<PathBuf>,
    pub jobs: usize,
}

/// Filter settings for the lattice sweeps: the library defaults with the
/// `1/λ` floor raised to 1 mV², so that no edge is pinned to the prediction
/// harder than the baseline's unit-scale smoothness prior.
pub fn desk_filter() -> FilterConfig {
    let mut f = FilterConfig::default();
    f.inference.tau_min = 1.0;
    f
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mesh: MeshSpec::default(),
            scar_segments: (1..=17).collect(),
            ep: ApParams::default(),
            pacing: None,
            n_frames: 40,
            leads: LeadSpec::default(),
            snr_db: Some(20.0),
            filter: desk_filter(),
            baseline: BaselineSpec::default(),
            detection: DetectionSpec::default(),
            seeds: Seeds::default(),
            output_dir: None,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.mesh;
        if m.nx == 0 || m.ny == 0 || m.nz == 0 || m.n_segments == 0 || m.n_segments > m.nx * m.ny * m.nz {
            return bad(format!("invalid mesh spec {m:?}"));
        }
        if let Some(s) = self.scar_segments.iter().find(|s| **s == 0 || **s > m.n_segments) {
            return bad(format!("scar segment {s} does not exist (mesh has {})", m.n_segments));
        }
        let n = m.nx * m.ny * m.nz;
        if let Some(node) = self.pacing().nodes.iter().find(|i| **i >= n) {
            return bad(format!("pacing node {node} outside the mesh"));
        }
        if self.n_frames == 0 {
            return bad("n_frames must be positive".into());
        }
        if self.leads.n_leads == 0 || !(self.leads.radius_factor > 1.0) {
            return bad("leads need n_leads ≥ 1 and radius_factor > 1".into());
        }
        if matches!(self.snr_db, Some(s) if s.is_nan()) {
            return bad("snr_db is NaN".into());
        }
        if !(0.0..=100.0).contains(&self.detection.late_percentile) {
            return bad("late_percentile must lie in [0, 100]".into());
        }
        match self.baseline.prior_scale {
            Some(c) if !(c > 0.0) => return bad(format!("baseline prior_scale must be positive, got {c}")),
            None if self.baseline.grid.is_empty() || self.baseline.grid.iter().any(|c| !(*c > 0.0)) => {
                return bad("baseline grid must be non-empty and positive".into())
            }
            _ => {}
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.ep.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.filter.inference.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// The configured pacing, or the `x = 0` face of the lattice.
    pub fn pacing(&self) -> Pacing {
        self.pacing.clone().unwrap_or_else(|| {
            let m = &self.mesh;
            Pacing {
                nodes: (0..m.ny * m.nz).map(|r| r * m.nx).collect(),
                ..Pacing::default()
            }
        })
    }

    /// Overrides every seed stream from one master seed.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::from_master(seed);
        self
    }

    /// Filter settings for `method`: the baseline's fixed scale enters
    /// through `lambda_init`, which is also the proposed method's EM start.
    fn filter_for(&self, scale: f64) -> FilterConfig {
        let mut f = self.filter.clone();
        f.inference.lambda_init = scale;
        f
    }
}

/// Mesh, lead field and observation shared by every trial.
#[derive(Debug, Clone)]
pub struct Setup {
    pub mesh: MeshGraph,
    pub forward: ForwardModel,
    pub obs: Observation,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let m = &cfg.mesh;
        let mesh = build_lattice_mesh(m.nx, m.ny, m.nz, m.n_segments)?;
        let radius = cfg.leads.radius_factor * mesh.bounding_radius().max(1.0);
        let forward = synth_lead_field(&mesh, cfg.leads.n_leads, radius, cfg.seeds.lead_field)?;
        let obs = Observation::new(forward.h.clone());
        Ok(Setup { mesh, forward, obs })
    }
}

/// Ground truth and noisy ECG for one scar configuration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scar: Option<ScarMask>,
    pub truth: Vec<DVector<f64>>,
    pub clean: Vec<EcgFrame>,
    pub ecg: Vec<EcgFrame>,
    pub noise_variance: f64,
}

pub fn simulate_dataset(
    cfg: &ExperimentConfig,
    setup: &Setup,
    segment: Option<usize>,
    noise_seed: u64,
) -> Result<Dataset> {
    let scar = segment.map(|s| make_scar(&setup.mesh, s)).transpose()?;
    let truth = simulate_ground_truth(
        &setup.mesh,
        &cfg.ep,
        scar.as_ref(),
        &cfg.pacing(),
        cfg.n_frames,
        &cfg.filter.voltage_map,
    )?;
    let clean = simulate_record(&setup.forward, &truth)?;
    let (ecg, noise_variance) = add_noise(&clean, cfg.snr_db, noise_seed)?;
    Ok(Dataset {
        scar,
        truth,
        clean,
        ecg,
        noise_variance,
    })
}

/// Root-mean-square error over all nodes and frames.
pub fn rmse(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        sum += (x - y).norm_squared();
        count += x.len();
    }
    (sum / count.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub scale: f64,
    pub rmse: f64,
}

/// Values fixed once per experiment from a scar-free validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub baseline_scale: f64,
    pub grid: Vec<GridPoint>,
    pub late_threshold: LateThresholds,
}

/// Picks the baseline scale (if unset) by reconstruction RMSE on scar-free
/// data, then sets each method's late threshold to the configured percentile
/// of its own scar-free activation times.
pub fn calibrate(cfg: &ExperimentConfig, setup: &Setup) -> Result<Calibration> {
    let data = simulate_dataset(cfg, setup, None, cfg.seeds.calibration)?;
    let run = |method: Method, scale: f64| {
        run_filter(
            &data.ecg,
            &setup.obs,
            &setup.mesh,
            &cfg.ep,
            &cfg.pacing(),
            method,
            &cfg.filter_for(scale),
            cfg.seeds.calibration,
        )
    };
    let mut grid = Vec::new();
    let (baseline_scale, baseline_run) = match cfg.baseline.prior_scale {
        Some(c) => (c, None),
        None => {
            let mut best: Option<(f64, f64, ReconstructionRun)> = None;
            for &scale in &cfg.baseline.grid {
                let r = run(Method::Baseline, scale)?;
                let err = rmse(&r.means(), &data.truth);
                log::info!("baseline scale {scale:e}: rmse {err:.3} mV");
                grid.push(GridPoint { scale, rmse: err });
                if best.as_ref().is_none_or(|(_, e, _)| err < *e) {
                    best = Some((scale, err, r));
                }
            }
            let (scale, _, r) = best.expect("non-empty grid");
            (scale, Some(r))
        }
    };
    let late_threshold = match cfg.detection.late_threshold {
        Some(t) => t,
        None => {
            let threshold_for = |r: &ReconstructionRun| -> Result<f64> {
                let act = activation_time(&r.means(), cfg.detection.activation_threshold_mv, cfg.detection.crossing)?;
                percentile(&act.finite_times(), cfg.detection.late_percentile)
            };
            let baseline_run = match baseline_run {
                Some(r) => r,
                None => run(Method::Baseline, baseline_scale)?,
            };
            LateThresholds {
                proposed: threshold_for(&run(Method::Proposed, baseline_scale)?)?,
                baseline: threshold_for(&baseline_run)?,
            }
        }
    };
    Ok(Calibration {
        baseline_scale,
        grid,
        late_threshold,
    })
}

/// Contents of a run's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dice: f64,
    pub center_dist: Option<f64>,
    pub detected_count: usize,
    pub late_capture: bool,
    pub var_scar_mean: Option<f64>,
    pub var_healthy_mean: Option<f64>,
}

/// One reconstructed run with its evaluation.
#[derive(Debug, Clone)]
pub struct EvaluatedRun {
    pub run: ReconstructionRun,
    pub activation: ActivationMap,
    pub detected: BTreeSet<usize>,
    pub metrics: RunMetrics,
    pub variance: Option<VarianceSummary>,
}

/// Half-open frame range spanning the true activation times.
pub fn activation_window(truth: &ActivationMap, n_frames: usize) -> Option<std::ops::Range<usize>> {
    let times = truth.finite_times();
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return None;
    }
    let start = (lo.floor() as usize).min(n_frames.saturating_sub(1));
    let end = ((hi.ceil() as usize) + 1).clamp(start + 1, n_frames);
    Some(start..end)
}

pub fn evaluate_run(
    run: ReconstructionRun,
    scar: &ScarMask,
    window: Option<std::ops::Range<usize>>,
    mesh: &MeshGraph,
    detection: &DetectionSpec,
    late_threshold: f64,
) -> Result<EvaluatedRun> {
    let activation = activation_time(&run.means(), detection.activation_threshold_mv, detection.crossing)?;
    let detected = detect_scar(&activation, late_threshold);
    let m = scar_metrics(detected.clone(), &scar.scar_nodes, mesh)?;
    let variance = match run.edge_variances() {
        Some(vars) => {
            let (scar_edges, healthy_edges) = scar.split_edges(mesh);
            Some(variance_summary(Some(&vars), &scar_edges, &healthy_edges, window)?)
        }
        None => None,
    };
    let metrics = RunMetrics {
        dice: m.dice,
        center_dist: m.center_dist,
        detected_count: detected.len(),
        late_capture: m.late_capture(&scar.scar_nodes),
        var_scar_mean: variance.as_ref().map(|v| v.scar_mean),
        var_healthy_mean: variance.as_ref().map(|v| v.healthy_mean),
    };
    Ok(EvaluatedRun {
        run,
        activation,
        detected,
        metrics,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok {
        proposed: RunMetrics,
        baseline: RunMetrics,
    },
    Skipped {
        reason: String,
    },
    Failed {
        error: String,
    },
}

/// Per-trial record written to `trial.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub segment: Option<usize>,
    pub scar_nodes: usize,
    #[serde(flatten)]
    pub status: TrialStatus,
}

impl TrialRecord {
    pub fn metrics(&self, method: Method) -> Option<&RunMetrics> {
        match &self.status {
            TrialStatus::Ok { proposed, baseline } => Some(match method {
                Method::Proposed => proposed,
                Method::Baseline => baseline,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanSd { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub dice: Option<MeanSd>,
    pub center_dist: Option<MeanSd>,
    pub capture_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub trials: Vec<TrialRecord>,
    pub proposed: MethodSummary,
    pub baseline: MethodSummary,
    /// Welch test of proposed against baseline dice (`t > 0` favors proposed).
    pub dice_welch: Option<WelchTest>,
    /// Trials whose mean scar-adjacent `1/λ` exceeds the healthy mean.
    pub variance_scar_higher: usize,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub calibration: Option<Calibration>,
}

impl SweepSummary {
    pub fn from_trials(trials: Vec<TrialRecord>, calibration: Option<Calibration>) -> Self {
        let method_summary = |method: Method| {
            let ms: Vec<&RunMetrics> = trials.iter().filter_map(|t| t.metrics(method)).collect();
            let dice: Vec<f64> = ms.iter().map(|m| m.dice).collect();
            let cd: Vec<f64> = ms.iter().filter_map(|m| m.center_dist).collect();
            let captured = ms.iter().filter(|m| m.late_capture).count();
            MethodSummary {
                dice: MeanSd::of(&dice),
                center_dist: MeanSd::of(&cd),
                capture_rate: (!ms.is_empty()).then(|| captured as f64 / ms.len() as f64),
            }
        };
        let dice_of = |method: Method| -> Vec<f64> {
            trials.iter().filter_map(|t| t.metrics(method)).map(|m| m.dice).collect()
        };
        let dice_welch = welch_t(&dice_of(Method::Proposed), &dice_of(Method::Baseline))
            .ok()
            .map(|(t, p)| WelchTest { t, p });
        let variance_scar_higher = trials
            .iter()
            .filter_map(|t| t.metrics(Method::Proposed))
            .filter(|m| matches!((m.var_scar_mean, m.var_healthy_mean), (Some(s), Some(h)) if s > h))
            .count();
        let count = |f: fn(&TrialStatus) -> bool| trials.iter().filter(|t| f(&t.status)).count();
        SweepSummary {
            proposed: method_summary(Method::Proposed),
            baseline: method_summary(Method::Baseline),
            dice_welch,
            variance_scar_higher,
            completed: count(|s| matches!(s, TrialStatus::Ok { .. })),
            skipped: count(|s| matches!(s, TrialStatus::Skipped { .. })),
            failed: count(|s| matches!(s, TrialStatus::Failed { .. })),
            trials,
            calibration,
        }
    }

    pub fn is_partial(&self) -> bool {
        self.failed > 0
    }

    /// Plain-text table of the summary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("segment  dice_prop  dice_base  capture_prop  capture_base  var_scar/healthy\n");
        for t in &self.trials {
            let seg = t.segment.map_or("-".to_string(), |s| s.to_string());
            match &t.status {
                TrialStatus::Ok { proposed, baseline } => {
                    let ratio = match (proposed.var_scar_mean, proposed.var_healthy_mean) {
                        (Some(s), Some(h)) if h > 0.0 => format!("{:.3}", s / h),
                        _ => "-".into(),
                    };
                    out.push_str(&format!(
                        "{seg:>7}  {:>9.3}  {:>9.3}  {:>12}  {:>12}  {ratio:>16}\n",
                        proposed.dice, baseline.dice, proposed.late_capture, baseline.late_capture
                    ));
                }
                TrialStatus::Skipped { reason } => out.push_str(&format!("{seg:>7}  skipped: {reason}\n")),
                TrialStatus::Failed { error } => out.push_str(&format!("{seg:>7}  failed: {error}\n")),
            }
        }
        let fmt = |m: &Option<MeanSd>| m.as_ref().map_or("-".into(), |m| format!("{:.3} ± {:.3}", m.mean, m.sd));
        let rate = |r: Option<f64>| r.map_or("-".into(), |r| format!("{r:.3}"));
        for (name, s) in [("proposed", &self.proposed), ("baseline", &self.baseline)] {
            out.push_str(&format!(
                "{name}: dice {}  center_dist {}  capture_rate {}\n",
                fmt(&s.dice),
                fmt(&s.center_dist),
                rate(s.capture_rate)
            ));
        }
        match &self.dice_welch {
            Some(w) => out.push_str(&format!("welch dice: t = {:.4}, p = {:.3e}\n", w.t, w.p)),
            None => out.push_str("welch dice: undefined\n"),
        }
        out.push_str(&format!(
            "scar 1/λ above healthy in {}/{} trials; completed {}, skipped {}, failed {}\n",
            self.variance_scar_higher, self.completed, self.completed, self.skipped, self.failed
        ));
        out
    }
}

/// Welch unequal-variance t statistic of `a − b` and its two-sided p-value.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedMetric("Welch test needs two samples per group".into()));
    }
    let stats = |x: &[f64]| {
        let s = MeanSd::of(x).expect("non-empty");
        (s.mean, s.sd * s.sd / x.len() as f64, x.len() as f64)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    let se2 = va + vb;
    if !(se2 > 0.0) {
        return Err(Error::UndefinedMetric("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::numeric(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok((t, p))
}

/// Manifest written as a run's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub scar_segment: Option<usize>,
    pub filter_seed: u64,
    pub experiment: ExperimentConfig,
}

/// Writes a run directory: `config.json`, `recon.csv`, `prediction.csv`,
/// `trace.csv`, `activation.csv`, `metrics.json` (when evaluated) and, for
/// the proposed method, `variance.csv` and `variance_trace.csv`.
pub fn export_run(
    dir: &Path,
    manifest: &RunManifest,
    run: &ReconstructionRun,
    mesh: &MeshGraph,
    eval: Option<(&ActivationMap, &BTreeSet<usize>, &RunMetrics, Option<&VarianceSummary>)>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(dir.join("config.json"), manifest)?;
    write_vectors(dir.join("recon.csv"), "node", &run.means())?;
    let preds: Vec<DVector<f64>> = run.steps.iter().map(|s| s.prediction_mean.clone()).collect();
    write_vectors(dir.join("prediction.csv"), "node", &preds)?;

    let trace_header: Vec<String> = [
        "step", "iteration", "alpha", "beta", "lambda_min", "lambda_median", "lambda_max", "objective",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut trace_rows = Vec::new();
    for (k, s) in run.steps.iter().enumerate() {
        match &s.trace {
            Some(tr) => {
                for it in &tr.iterations {
                    trace_rows.push(vec![
                        k.to_string(),
                        it.iteration.to_string(),
                        it.alpha.to_string(),
                        it.beta.to_string(),
                        it.lambda_min.to_string(),
                        it.lambda_median.to_string(),
                        it.lambda_max.to_string(),
                        it.objective.to_string(),
                    ]);
                }
            }
            None => trace_rows.push(vec![
                k.to_string(),
                "0".into(),
                String::new(),
                s.noise.beta.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]),
        }
    }
    write_table(dir.join("trace.csv"), &trace_header, trace_rows)?;

    if let Some(vars) = run.edge_variances() {
        let rows: Vec<DVector<f64>> = vars.into_iter().map(DVector::from_vec).collect();
        write_vectors(dir.join("variance.csv"), "edge", &rows)?;
    }
    if let Some((act, detected, metrics, variance)) = eval {
        write_activation(&dir.join("activation.csv"), mesh, act, Some(detected))?;
        write_json(dir.join("metrics.json"), metrics)?;
        if let Some(v) = variance {
            let header = vec!["window_step".to_string(), "scar_mean".into(), "healthy_mean".into()];
            let rows = v
                .scar_trace
                .iter()
                .zip(&v.healthy_trace)
                .enumerate()
                .map(|(k, (s, h))| vec![k.to_string(), s.to_string(), h.to_string()]);
            write_table(dir.join("variance_trace.csv"), &header, rows)?;
        }
    }
    Ok(())
}

/// `node,x,y,z,t_act[,detected]` with an empty `t_act` for never-activated
/// nodes.
pub fn write_activation(
    path: &Path,
    mesh: &MeshGraph,
    act: &ActivationMap,
    detected: Option<&BTreeSet<usize>>,
) -> Result<()> {
    let mut header: Vec<String> = ["node", "x", "y", "z", "t_act"].iter().map(|s| s.to_string()).collect();
    if detected.is_some() {
        header.push("detected".into());
    }
    let rows = mesh.node_coords().iter().zip(&act.t_act).enumerate().map(|(i, (c, t))| {
        let mut row = vec![
            i.to_string(),
            c[0].to_string(),
            c[1].to_string(),
            c[2].to_string(),
            t.map_or(String::new(), |t| t.to_string()),
        ];
        if let Some(d) = detected {
            row.push(u8::from(d.contains(&i)).to_string());
        }
        row
    });
    write_table(path, &header, rows)
}

/// Writes `mesh.json`, `H.json`/`H.bin`, `truth.csv`, `ecg.csv`,
/// `ecg_clean.csv` and (if scarred) `scar.json`.
pub fn export_dataset(dir: &Path, setup: &Setup, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("mesh.json"), setup.mesh.to_json()?)?;
    crate::io::write_matrix_bin(dir, "H", &setup.forward.h)?;
    write_vectors(dir.join("truth.csv"), "node", &data.truth)?;
    let ys = |f: &[EcgFrame]| f.iter().map(|f| f.y.clone()).collect::<Vec<_>>();
    write_vectors(dir.join("ecg.csv"), "lead", &ys(&data.ecg))?;
    write_vectors(dir.join("ecg_clean.csv"), "lead", &ys(&data.clean))?;
    if let Some(scar) = &data.scar {
        write_json(dir.join("scar.json"), scar)?;
    }
    Ok(())
}

fn trial_dir(out: &Path, segment: Option<usize>) -> PathBuf {
    match segment {
        Some(s) => out.join("trials").join(format!("seg_{s:02}")),
        None => out.join("trials").join("scar_free"),
    }
}

/// Simulates one scar segment, reconstructs it with both methods and
/// evaluates them. With `out`, everything is exported under the trial dir.
pub fn run_trial(
    cfg: &ExperimentConfig,
    setup: &Setup,
    calibration: &Calibration,
    segment: usize,
    out: Option<&Path>,
) -> Result<(TrialRecord, Vec<EvaluatedRun>)> {
    let data = simulate_dataset(cfg, setup, Some(segment), mix(cfg.seeds.noise, segment as u64))?;
    let scar = data.scar.as_ref().expect("scarred dataset");
    let truth_act = activation_time(&data.truth, cfg.detection.activation_threshold_mv, cfg.detection.crossing)?;
    let window = activation_window(&truth_act, cfg.n_frames);
    let filter = cfg.filter_for(calibration.baseline_scale);
    let filter_seed = mix(cfg.seeds.filter, segment as u64);
    let dir = out.map(|o| trial_dir(o, Some(segment)));
    if let Some(dir) = &dir {
        export_dataset(dir, setup, &data)?;
        write_activation(&dir.join("activation_truth.csv"), &setup.mesh, &truth_act, None)?;
    }
    let mut evaluated = Vec::new();
    for method in [Method::Proposed, Method::Baseline] {
        let run = run_filter(
            &data.ecg,
            &setup.obs,
            &setup.mesh,
            &cfg.ep,
            &cfg.pacing(),
            method,
            &filter,
            filter_seed,
        )?;
        let ev = evaluate_run(
            run,
            scar,
            window.clone(),
            &setup.mesh,
            &cfg.detection,
            calibration.late_threshold.get(method),
        )?;
        if let Some(dir) = &dir {
            let manifest = RunManifest {
                method,
                scar_segment: Some(segment),
                filter_seed,
                experiment: cfg.clone(),
            };
            export_run(
                &dir.join(method.as_str()),
                &manifest,
                &ev.run,
                &setup.mesh,
                Some((&ev.activation, &ev.detected, &ev.metrics, ev.variance.as_ref())),
            )?;
        }
        evaluated.push(ev);
    }
    let record = TrialRecord {
        segment: Some(segment),
        scar_nodes: scar.scar_nodes.len(),
        status: TrialStatus::Ok {
            proposed: evaluated[0].metrics.clone(),
            baseline: evaluated[1].metrics.clone(),
        },
    };
    Ok((record, evaluated))
}

/// Config with calibrated values filled in, so re-running it skips
/// calibration and reproduces the results.
pub fn resolved_config(cfg: &ExperimentConfig, calibration: &Calibration) -> ExperimentConfig {
    let mut r = cfg.clone();
    r.pacing = Some(cfg.pacing());
    r.baseline.prior_scale = Some(calibration.baseline_scale);
    r.detection.late_threshold = Some(calibration.late_threshold);
    r
}

/// Runs the whole sweep. Trial failures are recorded and the sweep goes on.
/// With an output directory every artifact and `summary.json`/`summary.csv`
/// are written there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.as_deref();
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
    }
    if cfg.scar_segments.is_empty() {
        let record = TrialRecord {
            segment: None,
            scar_nodes: 0,
            status: TrialStatus::Skipped {
                reason: "no true scar; dice undefined for both methods".into(),
            },
        };
        let summary = SweepSummary::from_trials(vec![record], None);
        if let Some(o) = out {
            write_json(o.join("config.json"), cfg)?;
            write_summary(o, &summary)?;
        }
        return Ok(summary);
    }
    let setup = Setup::new(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let calibration = calibrate(cfg, &setup)?;
        let resolved = resolved_config(cfg, &calibration);
        if let Some(o) = out {
            write_json(o.join("config.json"), &resolved)?;
            write_json(o.join("calibration.json"), &calibration)?;
        }
        let trials: Vec<TrialRecord> = resolved
            .scar_segments
            .par_iter()
            .map(|&segment| {
                let record = match run_trial(&resolved, &setup, &calibration, segment, out) {
                    Ok((record, _)) => record,
                    Err(e) => {
                        log::warn!("segment {segment} failed: {e}");
                        TrialRecord {
                            segment: Some(segment),
                            scar_nodes: setup.mesh.nodes_in_segment(segment).len(),
                            status: TrialStatus::Failed { error: e.to_string() },
                        }
                    }
                };
                if let Some(o) = out {
                    let dir = trial_dir(o, Some(segment));
                    std::fs::create_dir_all(&dir)?;
                    write_json(dir.join("trial.json"), &record)?;
                }
                Ok(record)
            })
            .collect::<Result<_>>()?;
        let summary = SweepSummary::from_trials(trials, Some(calibration));
        if let Some(o) = out {
            write_summary(o, &summary)?;
        }
        Ok(summary)
    })
}

pub fn write_summary(dir: &Path, summary: &SweepSummary) -> Result<()> {
    write_json(dir.join("summary.json"), summary)?;
    let header: Vec<String> = [
        "segment",
        "status",
        "method",
        "dice",
        "center_dist",
        "detected_count",
        "late_capture",
        "var_scar_mean",
        "var_healthy_mean",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut rows = Vec::new();
    for t in &summary.trials {
        let seg = t.segment.map_or(String::new(), |s| s.to_string());
        match &t.status {
            TrialStatus::Ok { .. } => {
                for method in [Method::Proposed, Method::Baseline] {
                    let m = t.metrics(method).expect("ok trial");
                    rows.push(vec![
                        seg.clone(),
                        "ok".into(),
                        method.as_str().into(),
                        m.dice.to_string(),
                        opt(m.center_dist),
                        m.detected_count.to_string(),
                        m.late_capture.to_string(),
                        opt(m.var_scar_mean),
                        opt(m.var_healthy_mean),
                    ]);
                }
            }
            TrialStatus::Skipped { .. } | TrialStatus::Failed { .. } => {
                let status = if matches!(t.status, TrialStatus::Skipped { .. }) { "skipped" } else { "failed" };
                let mut row = vec![seg, status.into()];
                row.extend(std::iter::repeat_n(String::new(), header.len() - 2));
                rows.push(row);
            }
        }
    }
    write_table(dir.join("summary.csv"), &header, rows)?;
    std::fs::write(dir.join("summary.txt"), summary.render())?;
    Ok(())
}

/// Rebuilds the summary from the `trial.json` files of a sweep directory.
pub fn aggregate(dir: &Path) -> Result<SweepSummary> {
    let trials_dir = dir.join("trials");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&trials_dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join("trial.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no trial.json files under {}", trials_dir.display())));
    }
    let trials = paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect::<Result<Vec<TrialRecord>>>()?;
    let calibration = std::fs::read_to_string(dir.join("calibration.json"))
        .ok()
        .map(|t| serde_json::from_str(&t))
        .transpose()?;
    Ok(SweepSummary::from_trials(trials, calibration))
}
