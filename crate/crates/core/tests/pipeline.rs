mod support;

use ecgi::epmodel::{ApModel, ApParams, ApState, VoltageMap};
use ecgi::experiment::rmse;
use ecgi::forward::{add_noise, synth_lead_field};
use ecgi::inference::{GaussianBelief, Observation};
use ecgi::mesh::{build_lattice_mesh, make_scar, MeshGraph};
use ecgi::pipeline::{
    predict, run_filter, simulate_ground_truth, simulate_record, EnsembleSpec, FilterConfig, Method, Pacing,
    ReconstructionRun,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

fn left_column(mesh_nx: usize, ny: usize) -> Pacing {
    Pacing {
        nodes: (0..ny).map(|r| r * mesh_nx).collect(),
        ..Pacing::default()
    }
}

#[test]
fn degenerate_belief_gives_a_degenerate_ensemble() {
    let mesh = build_lattice_mesh(3, 2, 1, 1).unwrap();
    let model = ApModel::new(&ApParams::default(), &mesh, None).unwrap();
    let mean = DVector::from_vec(vec![-90.0, -40.0, 10.0, -88.0, -75.0, 0.0]);
    let prev = GaussianBelief::new(mean.clone(), DMatrix::zeros(6, 6)).unwrap();
    let v0 = vec![DVector::from_element(6, 0.1)];
    let pred = predict(&prev, &v0, &model, &FilterConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(pred.samples.len(), 13);
    assert!(pred.samples.iter().all(|s| s == &pred.samples[0]));
    assert_eq!(pred.c_pd, DMatrix::zeros(6, 6));
    let vmap = VoltageMap::default();
    let direct = model
        .step(&ApState {
            u: vmap.from_millivolts(&mean),
            v: v0[0].clone(),
        })
        .unwrap();
    assert!((&pred.u_bar_pd - vmap.to_millivolts(&direct.u)).amax() < 1e-12);
}

#[test]
fn resting_belief_stays_at_rest() {
    let mesh = build_lattice_mesh(4, 4, 1, 1).unwrap();
    let model = ApModel::new(&ApParams::default(), &mesh, None).unwrap();
    let prev = GaussianBelief::new(DVector::from_element(16, -90.0), DMatrix::zeros(16, 16)).unwrap();
    let pred = predict(
        &prev,
        &[DVector::zeros(16)],
        &model,
        &FilterConfig::default(),
        None,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(pred.u_bar_pd, DVector::from_element(16, -90.0));
}

/// Prediction mean against an independent Monte-Carlo propagation of the
/// same belief on a two-node mesh.
#[test]
fn ensemble_mean_matches_sampling() {
    let mesh = build_lattice_mesh(2, 1, 1, 1).unwrap();
    let model = ApModel::new(&ApParams::default(), &mesh, None).unwrap();
    let vmap = VoltageMap::default();
    let mean = DVector::from_vec(vec![-50.0, -85.0]);
    let cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
    let prev = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
    let v = DVector::zeros(2);

    let factor = cov.cholesky().unwrap().unpack();
    let mut rng = rng(5);
    let samples: Vec<DVector<f64>> = (0..100_000)
        .map(|_| {
            let u = &mean + &factor * normal_vec(&mut rng, 2);
            let s = model
                .step(&ApState {
                    u: vmap.from_millivolts(&u),
                    v: v.clone(),
                })
                .unwrap();
            vmap.to_millivolts(&s.u)
        })
        .collect();
    let (mc, se) = mean_and_se(&samples);

    for spec in [EnsembleSpec::SigmaPoints, EnsembleSpec::MonteCarlo { n_samples: 100_000 }] {
        let cfg = FilterConfig {
            ensemble: spec.clone(),
            ..FilterConfig::default()
        };
        let pred = predict(&prev, &[v.clone()], &model, &cfg, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // two independent estimates when sampling, so allow for both errors
        let tol = match spec {
            EnsembleSpec::SigmaPoints => 3.0,
            EnsembleSpec::MonteCarlo { .. } => 3.0 * 2f64.sqrt(),
        };
        for i in 0..2 {
            let gap = (pred.u_bar_pd[i] - mc[i]).abs();
            assert!(gap < tol * se[i], "{spec:?} node {i}: {} vs {} ± {}", pred.u_bar_pd[i], mc[i], se[i]);
        }
    }
}

#[test]
fn sigma_points_reproduce_the_belief() {
    let mut rng = rng(6);
    let n = 5;
    let mean = normal_vec(&mut rng, n) * 10.0;
    let cov = spd(&mut rng, n, 0.1);
    let prev = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
    let pts = ecgi::pipeline::ensemble_points(&prev, &EnsembleSpec::SigmaPoints, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let (m, c) = ecgi::pipeline::fit_gaussian(&pts, &EnsembleSpec::SigmaPoints);
    assert!((m - mean).amax() < 1e-10);
    assert!((c - cov).amax() < 1e-10);
}

struct Problem {
    mesh: MeshGraph,
    obs: Observation,
    pacing: Pacing,
    truth: Vec<DVector<f64>>,
    ecg: Vec<ecgi::forward::EcgFrame>,
}

fn problem(nx: usize, ny: usize, segments: usize, scar: Option<usize>, frames: usize, snr: Option<f64>) -> Problem {
    let mesh = build_lattice_mesh(nx, ny, 1, segments).unwrap();
    let ep = ApParams::default();
    let pacing = left_column(nx, ny);
    let scar = scar.map(|s| make_scar(&mesh, s).unwrap());
    let truth = simulate_ground_truth(&mesh, &ep, scar.as_ref(), &pacing, frames, &VoltageMap::default()).unwrap();
    let fwd = synth_lead_field(&mesh, 60, 1.5 * mesh.bounding_radius(), 3).unwrap();
    let clean = simulate_record(&fwd, &truth).unwrap();
    let (ecg, _) = add_noise(&clean, snr, 4).unwrap();
    Problem {
        obs: Observation::new(fwd.h.clone()),
        mesh,
        pacing,
        truth,
        ecg,
    }
}

fn run(p: &Problem, method: Method, cfg: &FilterConfig) -> ReconstructionRun {
    run_filter(&p.ecg, &p.obs, &p.mesh, &ApParams::default(), &p.pacing, method, cfg, 17).unwrap()
}

#[test]
fn scar_free_reconstruction_tracks_the_truth() {
    let p = problem(4, 4, 1, None, 12, None);
    for method in [Method::Proposed, Method::Baseline] {
        let r = run(&p, method, &FilterConfig::default());
        assert_eq!(r.n_frames(), 12);
        for (k, (m, t)) in r.means().iter().zip(&p.truth).enumerate().skip(3) {
            let e = ((m - t).norm_squared() / 16.0).sqrt();
            assert!(e < 5.0, "{method:?} step {k}: rmse {e}");
        }
    }
}

#[test]
fn error_model_reduces_scar_error() {
    let p = problem(8, 8, 4, Some(2), 20, Some(20.0));
    let cfg = ecgi::experiment::desk_filter();
    let prop = run(&p, Method::Proposed, &cfg);
    let base = run(&p, Method::Baseline, &cfg);
    let (ep, eb) = (rmse(&prop.means(), &p.truth), rmse(&base.means(), &p.truth));
    assert!(ep < eb, "proposed {ep} vs baseline {eb}");
    for r in [&prop, &base] {
        for m in r.means() {
            assert!(m.iter().all(|v| (-90.0..=20.0).contains(v)));
        }
    }
}

#[test]
fn frozen_em_reproduces_the_baseline() {
    let p = problem(5, 4, 2, Some(1), 3, Some(20.0));
    let mut cfg = FilterConfig::default();
    cfg.inference.max_em = 0;
    let prop = run(&p, Method::Proposed, &cfg);
    let base = run(&p, Method::Baseline, &cfg);
    for (a, b) in prop.steps.iter().zip(&base.steps) {
        assert_eq!(a.belief, b.belief);
        assert_eq!(a.prediction_mean, b.prediction_mean);
    }
}

#[test]
fn filter_is_deterministic() {
    let p = problem(5, 4, 2, Some(2), 6, Some(20.0));
    let cfg = FilterConfig::default();
    let a = run(&p, Method::Proposed, &cfg);
    let b = run(&p, Method::Proposed, &cfg);
    assert_eq!(a.means(), b.means());
    assert_eq!(a.edge_variances(), b.edge_variances());
    assert!(base_has_no_variances(&p));
}

fn base_has_no_variances(p: &Problem) -> bool {
    run(p, Method::Baseline, &FilterConfig::default()).edge_variances().is_none()
}

#[test]
fn mismatched_inputs_are_rejected() {
    let p = problem(4, 4, 1, None, 3, None);
    let other = build_lattice_mesh(3, 3, 1, 1).unwrap();
    let r = run_filter(&p.ecg, &p.obs, &other, &ApParams::default(), &p.pacing, Method::Proposed, &FilterConfig::default(), 0);
    assert!(matches!(r, Err(ecgi::Error::InvalidArgument(_))));
}
