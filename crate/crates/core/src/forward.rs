//! Synthetic lead fields, ECG simulation and measurement noise.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mesh::{dist, MeshGraph};

/// Linear map from node potentials (mV) to lead potentials (mV).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub h: DMatrix<f64>,
    pub lead_positions: Vec<[f64; 3]>,
}

impl ForwardModel {
    /// Wraps an explicit matrix, e.g. one loaded from disk.
    pub fn from_matrix(h: DMatrix<f64>) -> Result<Self> {
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("lead field has non-finite entries"));
        }
        Ok(ForwardModel {
            h,
            lead_positions: Vec::new(),
        })
    }

    pub fn n_leads(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.h.ncols()
    }
}

/// One ECG sample across all leads.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgFrame {
    pub y: DVector<f64>,
    pub k: usize,
}

/// Inverse-square lead field from `n_leads` electrodes on a sphere around
/// the mesh.
///
/// Electrodes follow a Fibonacci spiral whose azimuth offset is drawn from
/// `seed`. Each row is mean-subtracted, so constant potentials are invisible,
/// and the whole matrix is scaled to unit spectral norm (a matrix that is
/// entirely zero after mean subtraction is returned unscaled).
pub fn synth_lead_field(
    mesh: &MeshGraph,
    n_leads: usize,
    radius: f64,
    seed: u64,
) -> Result<ForwardModel> {
    if n_leads == 0 {
        return Err(Error::invalid("n_leads must be at least 1"));
    }
    let bound = mesh.bounding_radius();
    if !(radius > bound) {
        return Err(Error::invalid(format!(
            "lead radius {radius} must exceed the mesh bounding radius {bound}"
        )));
    }
    let center = mesh.centroid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random::<f64>() * 2.0 * PI;
    let golden = PI * (3.0 - 5f64.sqrt());
    let leads: Vec<[f64; 3]> = (0..n_leads)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n_leads as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = phase + golden * i as f64;
            [
                center[0] + radius * r * phi.cos(),
                center[1] + radius * r * phi.sin(),
                center[2] + radius * z,
            ]
        })
        .collect();

    let nodes = mesh.node_coords();
    let mut h = DMatrix::from_fn(n_leads, nodes.len(), |l, n| {
        1.0 / dist(&leads[l], &nodes[n]).powi(2)
    });
    for mut row in h.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let norm = spectral_norm(&h);
    if norm > 0.0 {
        h /= norm;
    }
    Ok(ForwardModel {
        h,
        lead_positions: leads,
    })
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// `y = H·u`.
pub fn simulate_ecg(model: &ForwardModel, u_mv: &DVector<f64>, k: usize) -> Result<EcgFrame> {
    if u_mv.len() != model.n_nodes() {
        return Err(Error::invalid(format!(
            "potential vector has {} entries, lead field expects {}",
            u_mv.len(),
            model.n_nodes()
        )));
    }
    Ok(EcgFrame {
        y: &model.h * u_mv,
        k,
    })
}

/// Adds i.i.d. Gaussian noise at a record-level SNR.
///
/// The noise variance is `P / 10^(snr/10)` with `P` the mean square over all
/// leads and frames. `None` (or an infinite SNR) returns the frames unchanged
/// with zero variance. Returns the noisy frames and the variance used.
pub fn add_noise(
    frames: &[EcgFrame],
    snr_db: Option<f64>,
    seed: u64,
) -> Result<(Vec<EcgFrame>, f64)> {
    let snr_db = match snr_db {
        Some(s) if s.is_finite() => s,
        Some(s) if s < 0.0 => return Err(Error::invalid("SNR of -inf dB")),
        _ => return Ok((frames.to_vec(), 0.0)),
    };
    let count: usize = frames.iter().map(|f| f.y.len()).sum();
    let power = frames.iter().map(|f| f.y.norm_squared()).sum::<f64>() / count.max(1) as f64;
    if !(power > 0.0) {
        return Err(Error::invalid("signal power is zero; SNR undefined"));
    }
    let variance = power / 10f64.powf(snr_db / 10.0);
    let sd = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = frames
        .iter()
        .map(|f| EcgFrame {
            y: f.y.map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)),
            k: f.k,
        })
        .collect();
    Ok((noisy, variance))
}
