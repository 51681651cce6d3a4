use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecgi::experiment::{
    aggregate, calibrate, evaluate_run, export_dataset, export_run, mix, resolved_config,
    run_experiment, simulate_dataset, write_summary, ExperimentConfig, RunManifest, Setup,
};
use ecgi::forward::EcgFrame;
use ecgi::inference::Observation;
use ecgi::io::{read_matrix_bin, read_vectors};
use ecgi::mesh::{MeshGraph, ScarMask};
use ecgi::metrics::activation_time;
use ecgi::pipeline::{run_filter, Method};
use ecgi::{Error, Result};

#[derive(Parser)]
#[command(name = "ecgi", version, about = "Sparse model-error estimation for ECG imaging on lattice meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed overriding every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Ground truth and ECG for one scar segment.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scar segment; defaults to the first one in the config, 0 for none.
        #[arg(long)]
        segment: Option<usize>,
    },
    /// One method on one dataset.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "proposed")]
        method: Method,
        /// Dataset directory written by `simulate`; simulated on the fly when
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Both methods over every scar segment.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarizes an existing sweep directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_master_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick_segment(cfg: &ExperimentConfig, segment: Option<usize>) -> Option<usize> {
    match segment {
        Some(0) => None,
        Some(s) => Some(s),
        None => cfg.scar_segments.first().copied(),
    }
}

fn simulate(common: &Common, segment: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let segment = pick_segment(&cfg, segment);
    let setup = Setup::new(&cfg)?;
    let seed = mix(cfg.seeds.noise, segment.unwrap_or(0) as u64);
    let data = simulate_dataset(&cfg, &setup, segment, seed)?;
    export_dataset(&common.out, &setup, &data)?;
    ecgi::io::write_json(common.out.join("config.json"), &cfg)?;
    println!(
        "wrote {} frames for {} to {}",
        data.truth.len(),
        segment.map_or("a scar-free heart".to_string(), |s| format!("segment {s}")),
        common.out.display()
    );
    Ok(())
}

struct LoadedData {
    mesh: MeshGraph,
    obs: Observation,
    ecg: Vec<EcgFrame>,
    scar: Option<ScarMask>,
    truth: Option<Vec<nalgebra::DVector<f64>>>,
}

fn load_data(dir: &Path) -> Result<LoadedData> {
    let mesh = MeshGraph::from_json(&std::fs::read_to_string(dir.join("mesh.json"))?)?;
    let obs = Observation::new(read_matrix_bin(dir, "H")?);
    let ecg = read_vectors(dir.join("ecg.csv"))?
        .into_iter()
        .enumerate()
        .map(|(k, y)| EcgFrame { y, k })
        .collect();
    let scar_path = dir.join("scar.json");
    let scar = scar_path
        .is_file()
        .then(|| serde_json::from_str(&std::fs::read_to_string(&scar_path)?).map_err(Error::from))
        .transpose()?;
    let truth_path = dir.join("truth.csv");
    let truth = truth_path.is_file().then(|| read_vectors(&truth_path)).transpose()?;
    Ok(LoadedData {
        mesh,
        obs,
        ecg,
        scar,
        truth,
    })
}

fn reconstruct(common: &Common, method: Method, data_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let setup = Setup::new(&cfg)?;
    let segment = pick_segment(&cfg, None);
    let data = match data_dir {
        Some(dir) => load_data(dir)?,
        None => {
            let d = simulate_dataset(&cfg, &setup, segment, mix(cfg.seeds.noise, segment.unwrap_or(0) as u64))?;
            LoadedData {
                mesh: setup.mesh.clone(),
                obs: setup.obs.clone(),
                ecg: d.ecg,
                scar: d.scar,
                truth: Some(d.truth),
            }
        }
    };
    let calibration = calibrate(&cfg, &setup)?;
    let resolved = resolved_config(&cfg, &calibration);
    let mut filter = resolved.filter.clone();
    filter.inference.lambda_init = calibration.baseline_scale;
    let filter_seed = mix(cfg.seeds.filter, data.scar.as_ref().map_or(0, |s| s.source_segment) as u64);
    let run = run_filter(
        &data.ecg,
        &data.obs,
        &data.mesh,
        &cfg.ep,
        &cfg.pacing(),
        method,
        &filter,
        filter_seed,
    )?;
    let manifest = RunManifest {
        method,
        scar_segment: data.scar.as_ref().map(|s| s.source_segment),
        filter_seed,
        experiment: resolved,
    };
    match (&data.scar, &data.truth) {
        (Some(scar), Some(truth)) => {
            let thr = cfg.detection.activation_threshold_mv;
            let truth_act = activation_time(truth, thr, cfg.detection.crossing)?;
            let window = ecgi::experiment::activation_window(&truth_act, truth.len());
            let ev = evaluate_run(
                run,
                scar,
                window,
                &data.mesh,
                &cfg.detection,
                calibration.late_threshold.get(method),
            )?;
            export_run(
                &common.out,
                &manifest,
                &ev.run,
                &data.mesh,
                Some((&ev.activation, &ev.detected, &ev.metrics, ev.variance.as_ref())),
            )?;
            println!("{}", serde_json::to_string_pretty(&ev.metrics)?);
        }
        _ => {
            export_run(&common.out, &manifest, &run, &data.mesh, None)?;
            println!("wrote {} frames to {} (no scar ground truth, metrics skipped)", run.n_frames(), common.out.display());
        }
    }
    Ok(())
}

fn sweep(common: &Common, jobs: Option<usize>) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    cfg.output_dir = Some(common.out.clone());
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let summary = run_experiment(&cfg)?;
    print!("{}", summary.render());
    Ok(if summary.is_partial() { ExitCode::from(4) } else { ExitCode::SUCCESS })
}

fn report(out: &Path) -> Result<ExitCode> {
    let summary = aggregate(out)?;
    write_summary(out, &summary)?;
    print!("{}", summary.render());
    Ok(if summary.is_partial() { ExitCode::from(4) } else { ExitCode::SUCCESS })
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
        Error::NumericFailure(_) | Error::Instability(_) | Error::ConvergenceFailure { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, segment } => simulate(common, *segment).map(|_| ExitCode::SUCCESS),
        Command::Reconstruct { common, method, data } => {
            reconstruct(common, *method, data.as_deref()).map(|_| ExitCode::SUCCESS)
        }
        Command::Sweep { common, jobs } => sweep(common, *jobs),
        Command::Report { out } => report(out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
