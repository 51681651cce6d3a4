//! Two-variable Aliev-Panfilov reaction-diffusion model on a mesh graph.
//!
//! ```text
//! du/dt = d·(L u) − k·u(u − a)(u − 1) − u·v
//! dv/dt = ε(u, v)·(−v − k·u(u − a − 1)),   ε = ε0 + μ1·v / (u + μ2)
//! ```
//!
//! `L = −DᵀD` is the graph Laplacian. Time integration is explicit Euler
//! with `substeps` sub-steps of `dt_model` per observation interval.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, ScarMask};

/// Any `|u|` above this after a step is treated as integrator blow-up.
pub const INSTABILITY_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApParams {
    pub k_gain: f64,
    pub a_thresh: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub diffusion: f64,
    /// Sub-step length in model time.
    pub dt_model: f64,
    pub substeps: usize,
    /// Multiplier on diffusion and `k_gain` at scar nodes.
    pub scar_factor: f64,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams {
            k_gain: 8.0,
            a_thresh: 0.15,
            eps0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
            diffusion: 1.0,
            dt_model: 0.1,
            substeps: 10,
            scar_factor: 0.05,
        }
    }
}

impl ApParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_gain", self.k_gain),
            ("eps0", self.eps0),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("diffusion", self.diffusion),
            ("dt_model", self.dt_model),
            ("scar_factor", self.scar_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.a_thresh > 0.0 && self.a_thresh < 1.0) {
            return Err(Error::invalid(format!(
                "a_thresh must be in (0, 1), got {}",
                self.a_thresh
            )));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(())
    }
}

/// Normalized excitation `u` and recovery `v` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ApState {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

impl ApState {
    pub fn resting(n_nodes: usize) -> Self {
        ApState {
            u: DVector::zeros(n_nodes),
            v: DVector::zeros(n_nodes),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.u.len()
    }
}

/// Affine map between normalized excitation and millivolts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageMap {
    pub scale_mv: f64,
    pub offset_mv: f64,
}

impl Default for VoltageMap {
    /// `[0, 1] → [−90, 20]` mV.
    fn default() -> Self {
        VoltageMap {
            scale_mv: 110.0,
            offset_mv: -90.0,
        }
    }
}

impl VoltageMap {
    pub fn to_millivolts(&self, u_norm: &DVector<f64>) -> DVector<f64> {
        u_norm.map(|u| self.scale_mv * u + self.offset_mv)
    }

    pub fn from_millivolts(&self, u_mv: &DVector<f64>) -> DVector<f64> {
        u_mv.map(|u| (u - self.offset_mv) / self.scale_mv)
    }
}

/// Precomputed per-node coefficients for one mesh and scar configuration.
#[derive(Debug, Clone)]
pub struct ApModel {
    params: ApParams,
    neighbors: Vec<Vec<usize>>,
    diffusion: Vec<f64>,
    k_gain: Vec<f64>,
}

impl ApModel {
    pub fn new(params: &ApParams, mesh: &MeshGraph, scar: Option<&ScarMask>) -> Result<Self> {
        params.validate()?;
        let n = mesh.n_nodes();
        let mut diffusion = vec![params.diffusion; n];
        let mut k_gain = vec![params.k_gain; n];
        if let Some(scar) = scar {
            for &i in &scar.scar_nodes {
                if i >= n {
                    return Err(Error::invalid(format!("scar node {i} out of range")));
                }
                diffusion[i] *= params.scar_factor;
                k_gain[i] *= params.scar_factor;
            }
        }
        Ok(ApModel {
            params: params.clone(),
            neighbors: mesh.adjacency(),
            diffusion,
            k_gain,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Advances one observation interval.
    pub fn step(&self, state: &ApState) -> Result<ApState> {
        let n = self.n_nodes();
        if state.u.len() != n || state.v.len() != n {
            return Err(Error::invalid(format!(
                "state has {} / {} entries for a {n}-node mesh",
                state.u.len(),
                state.v.len()
            )));
        }
        if state.u.iter().chain(state.v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite EP state"));
        }
        let p = &self.params;
        let dt = p.dt_model;
        let mut u = state.u.as_slice().to_vec();
        let mut v = state.v.as_slice().to_vec();
        let mut du = vec![0.0; n];
        for _ in 0..p.substeps {
            for i in 0..n {
                let ui = u[i];
                let lap: f64 = self.neighbors[i].iter().map(|&j| u[j] - ui).sum();
                du[i] = self.diffusion[i] * lap
                    - self.k_gain[i] * ui * (ui - p.a_thresh) * (ui - 1.0)
                    - ui * v[i];
            }
            for i in 0..n {
                let ui = u[i];
                let vi = v[i];
                let denom = ui + p.mu2;
                if denom <= 0.0 {
                    return Err(Error::Instability(format!(
                        "recovery rate singular at node {i} (u = {ui})"
                    )));
                }
                let eps = p.eps0 + p.mu1 * vi / denom;
                let dv = eps * (-vi - self.k_gain[i] * ui * (ui - p.a_thresh - 1.0));
                u[i] = ui + dt * du[i];
                v[i] = vi + dt * dv;
            }
            if let Some(i) = u.iter().position(|x| !x.is_finite() || x.abs() > INSTABILITY_BOUND) {
                return Err(Error::Instability(format!(
                    "|u| exceeded {INSTABILITY_BOUND} at node {i}"
                )));
            }
        }
        Ok(ApState {
            u: DVector::from_vec(u),
            v: DVector::from_vec(v),
        })
    }
}

/// One observation interval of the Aliev-Panfilov model.
///
/// Builds an [`ApModel`] per call; loops should construct the model once.
pub fn ap_step(
    state: &ApState,
    params: &ApParams,
    mesh: &MeshGraph,
    scar: Option<&ScarMask>,
) -> Result<ApState> {
    ApModel::new(params, mesh, scar)?.step(state)
}

/// Raises `u` at the given nodes to at least `amplitude`.
pub fn stimulate(state: &ApState, nodes: &[usize], amplitude: f64) -> Result<ApState> {
    let mut out = state.clone();
    for &i in nodes {
        if i >= state.n_nodes() {
            return Err(Error::invalid(format!("stimulus node {i} out of range")));
        }
        out.u[i] = out.u[i].max(amplitude);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_lattice_mesh;

    #[test]
    fn voltage_map_defaults() {
        let m = VoltageMap::default();
        let mv = m.to_millivolts(&DVector::from_vec(vec![0.0, 1.0, 0.5]));
        assert_eq!(mv.as_slice(), &[-90.0, 20.0, -35.0]);
        let back = m.from_millivolts(&mv);
        assert!((back - DVector::from_vec(vec![0.0, 1.0, 0.5])).amax() < 1e-15);
    }

    #[test]
    fn stimulus_semantics() {
        let rest = ApState::resting(3);
        let s = stimulate(&rest, &[0], 1.0).unwrap();
        assert_eq!(s.u.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(stimulate(&rest, &[], 1.0).unwrap(), rest);
        let mut half = rest.clone();
        half.u[0] = 0.5;
        assert_eq!(stimulate(&half, &[0], 0.3).unwrap().u[0], 0.5);
        assert!(matches!(stimulate(&rest, &[3], 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn resting_state_is_fixed_point() {
        let mesh = build_lattice_mesh(4, 4, 1, 1).unwrap();
        let model = ApModel::new(&ApParams::default(), &mesh, None).unwrap();
        let mut s = ApState::resting(16);
        for _ in 0..1000 {
            s = model.step(&s).unwrap();
        }
        assert_eq!(s.u.amax(), 0.0);
        assert_eq!(s.v.amax(), 0.0);
    }

    #[test]
    fn rejects_bad_states() {
        let mesh = build_lattice_mesh(2, 1, 1, 1).unwrap();
        let params = ApParams::default();
        let mut s = ApState::resting(2);
        s.u[1] = f64::NAN;
        assert!(matches!(ap_step(&s, &params, &mesh, None), Err(Error::NumericFailure(_))));
        assert!(ap_step(&ApState::resting(3), &params, &mesh, None).is_err());

        let unstable = ApParams {
            dt_model: 5.0,
            ..ApParams::default()
        };
        let s = stimulate(&ApState::resting(2), &[0], 1.0).unwrap();
        assert!(matches!(
            ap_step(&s, &unstable, &mesh, None),
            Err(Error::Instability(_))
        ));
    }

    #[test]
    fn param_validation() {
        assert!(ApParams::default().validate().is_ok());
        let bad = ApParams {
            a_thresh: 1.5,
            ..ApParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = ApParams {
            substeps: 0,
            ..ApParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
