//! Activation times, scar detection and detection-quality metrics.

use std::collections::BTreeSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{centroid_of, dist, MeshGraph};

/// Per-node activation time in frame units; `None` means never activated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub t_act: Vec<Option<f64>>,
}

impl ActivationMap {
    pub fn finite_times(&self) -> Vec<f64> {
        self.t_act.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingMode {
    /// Linear interpolation between the frames bracketing the crossing.
    Interpolated,
    /// Index of the first frame at or above the threshold.
    ExactStep,
}

/// First upward crossing of `threshold_mv` per node.
pub fn activation_time(
    trajectory: &[DVector<f64>],
    threshold_mv: f64,
    mode: CrossingMode,
) -> Result<ActivationMap> {
    let first = trajectory
        .first()
        .ok_or_else(|| Error::invalid("empty trajectory"))?;
    let n = first.len();
    if trajectory.iter().any(|u| u.len() != n) {
        return Err(Error::invalid("trajectory frames have different sizes"));
    }
    let t_act = (0..n)
        .map(|i| {
            if first[i] >= threshold_mv {
                return Some(0.0);
            }
            trajectory.windows(2).enumerate().find_map(|(k, w)| {
                let (a, b) = (w[0][i], w[1][i]);
                (a < threshold_mv && b >= threshold_mv).then(|| match mode {
                    CrossingMode::Interpolated => k as f64 + (threshold_mv - a) / (b - a),
                    CrossingMode::ExactStep => (k + 1) as f64,
                })
            })
        })
        .collect();
    Ok(ActivationMap { t_act })
}

/// Nodes activating strictly after `late_threshold` (never-activated nodes
/// count as late).
pub fn detect_scar(act: &ActivationMap, late_threshold: f64) -> BTreeSet<usize> {
    act.t_act
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none_or(|t| t > late_threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of the finite
/// activation times.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Dice coefficient `2|S₁∩S₂| / (|S₁| + |S₂|)`.
pub fn dice(detected: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> Result<f64> {
    let total = detected.len() + truth.len();
    if total == 0 {
        return Err(Error::UndefinedMetric("dice of two empty sets".into()));
    }
    let overlap = detected.intersection(truth).count();
    Ok(2.0 * overlap as f64 / total as f64)
}

/// Distance between the unweighted node centroids of two sets.
pub fn center_distance(
    detected: &BTreeSet<usize>,
    truth: &BTreeSet<usize>,
    mesh: &MeshGraph,
) -> Result<f64> {
    if detected.is_empty() || truth.is_empty() {
        return Err(Error::UndefinedMetric("center distance needs two non-empty sets".into()));
    }
    let coords = mesh.node_coords();
    if detected.iter().chain(truth).any(|&i| i >= coords.len()) {
        return Err(Error::invalid("node index out of range"));
    }
    let a = centroid_of(detected.iter().map(|&i| &coords[i]));
    let b = centroid_of(truth.iter().map(|&i| &coords[i]));
    Ok(dist(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarMetrics {
    pub dice: f64,
    /// `None` when nothing was detected.
    pub center_dist: Option<f64>,
    pub detected_nodes: BTreeSet<usize>,
}

impl ScarMetrics {
    /// Late activation counts as captured when the detection overlaps the
    /// true scar.
    pub fn late_capture(&self, truth: &BTreeSet<usize>) -> bool {
        self.detected_nodes.intersection(truth).next().is_some()
    }
}

pub fn scar_metrics(
    detected: BTreeSet<usize>,
    truth: &BTreeSet<usize>,
    mesh: &MeshGraph,
) -> Result<ScarMetrics> {
    let d = dice(&detected, truth)?;
    let center_dist = if detected.is_empty() {
        None
    } else {
        Some(center_distance(&detected, truth, mesh)?)
    };
    Ok(ScarMetrics {
        dice: d,
        center_dist,
        detected_nodes: detected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub scar_mean: f64,
    pub healthy_mean: f64,
    /// Per-step group means over the selected window.
    pub scar_trace: Vec<f64>,
    pub healthy_trace: Vec<f64>,
}

/// Group means of per-edge `1/λ`, per step and averaged over `window`
/// (a half-open step range; `None` means every step).
pub fn variance_summary(
    edge_variances: Option<&[Vec<f64>]>,
    scar_edges: &[usize],
    healthy_edges: &[usize],
    window: Option<std::ops::Range<usize>>,
) -> Result<VarianceSummary> {
    let per_step = edge_variances
        .ok_or_else(|| Error::invalid("run has no λ trajectory (baseline method)"))?;
    if scar_edges.is_empty() || healthy_edges.is_empty() {
        return Err(Error::UndefinedMetric("empty edge group".into()));
    }
    let window = window.unwrap_or(0..per_step.len());
    let steps = per_step
        .get(window.clone())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::invalid(format!("window {window:?} outside the run")))?;
    let group_mean = |vars: &[f64], idx: &[usize]| idx.iter().map(|&e| vars[e]).sum::<f64>() / idx.len() as f64;
    let scar_trace: Vec<f64> = steps.iter().map(|v| group_mean(v, scar_edges)).collect();
    let healthy_trace: Vec<f64> = steps.iter().map(|v| group_mean(v, healthy_edges)).collect();
    let avg = |t: &[f64]| t.iter().sum::<f64>() / t.len() as f64;
    Ok(VarianceSummary {
        scar_mean: avg(&scar_trace),
        healthy_mean: avg(&healthy_trace),
        scar_trace,
        healthy_trace,
    })
}
