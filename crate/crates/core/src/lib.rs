//! Sequential reconstruction of transmural action potential from body-surface
//! ECG with sparse, gradient-domain estimation of the prediction model's error.
//!
//! Each time step propagates the previous posterior through an Aliev-Panfilov
//! reaction-diffusion model, then fuses the prediction with the ECG frame.
//! The prediction error is assumed sparse in the edge-difference domain and is
//! modeled with a generalized Gaussian prior (shape `p` near zero). A Gaussian
//! variational lower bound of that prior turns the update into conjugate
//! Gaussian inference whose per-edge precisions `λ` are learned by EM; the
//! posterior mean is restricted to the physiological voltage range.
//!
//! Module map:
//! - [`mesh`]: lattice meshes, the edge-difference operator, segment scars.
//! - [`epmodel`]: the Aliev-Panfilov predictor.
//! - [`forward`]: synthetic lead fields, ECG simulation and noise.
//! - [`sparseprior`]: generalized Gaussian density and its variational bound.
//! - [`inference`]: EM hyperparameter learning and the box-constrained update.
//! - [`pipeline`]: ensemble prediction and the per-frame filter.
//! - [`metrics`]: activation times, scar detection, Dice and distances.
//! - [`experiment`]: configs, scar sweeps, statistics and file export.

pub mod epmodel;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod inference;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod sparseprior;

pub use error::{Error, Result};
