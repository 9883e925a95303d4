use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tpnica::elbo::{posterior_means, KernelParams, TpNicaModel};
use tpnica::evaluation::{linear_ica_baseline, mcc, MccOptions, MccReport};
use tpnica::lattice::KernelSpec;
use tpnica::mixing::{generate_dataset, MixingNetwork};
use tpnica::optim::{TraceRow, TrainState};
use tpnica::posterior::VariationalState;
use tpnica::tensor::Tensor;

use crate::config::{ExperimentConfig, KernelRegime};
use crate::error::{CliError, Result};
use crate::svg::{line_plot, Series};

type Mat = DMatrix<f64>;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVALUATION_DIR: &str = "evaluation";
pub const TRACE_FILE: &str = "elbo_trace.csv";
pub const REPORT_FILE: &str = "mcc_report.csv";

const MIXING_STREAM: u64 = 1;
const INIT_STREAM: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything needed to interpret and regenerate a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub kernels: Vec<KernelSpec>,
    pub noise_variances: Vec<f64>,
    pub mixing_seed: u64,
    pub mixing_stream: u64,
    pub data_seed: u64,
    pub files: Vec<ManifestFile>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_SCHEMA_VERSION as u64 => {}
        other => {
            return Err(CliError::Config(format!(
                "{}: unsupported manifest schema version {other:?}",
                path.display()
            )))
        }
    }
    Ok(serde_json::from_value(raw)?)
}

/// Threads for gradient evaluation: `NICA_THREADS`, else all cores.
pub fn thread_budget() -> usize {
    std::env::var("NICA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn prepare_dir(dir: &Path, force: bool, what: &str) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::Config(format!(
                "{what} directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn true_mixing(cfg: &ExperimentConfig) -> Result<MixingNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(MIXING_STREAM);
    Ok(MixingNetwork::random_orthogonal(cfg.components, cfg.observed, cfg.layers, &mut rng)?)
}

/// Writes observations, ground truth and the manifest into `<out>/dataset`.
pub fn generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let dir = out.join(DATASET_DIR);
    prepare_dir(&dir, force, "dataset")?;
    let lattice = cfg.build_lattice()?;
    let priors = cfg.priors()?;
    let net = true_mixing(cfg)?;
    let ds = generate_dataset(&lattice, &priors, &net, cfg.noise_fraction, cfg.samples, cfg.seed)?;

    let mut files = vec![
        ("observations.tpnc".to_string(), ds.observations.clone()),
        ("components.tpnc".to_string(), ds.components.clone()),
        ("taus.tpnc".to_string(), ds.taus.clone()),
        ("noise_variances.tpnc".to_string(), Tensor::new(vec![ds.noise_variances.len()], ds.noise_variances.clone())?),
    ];
    for (k, layer) in net.layers.iter().enumerate() {
        let (r, c) = layer.weight.shape();
        let w: Vec<f64> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| layer.weight[(i, j)]).collect();
        files.push((format!("mixing_{k}_weight.tpnc"), Tensor::new(vec![r, c], w)?));
        files.push((format!("mixing_{k}_bias.tpnc"), Tensor::new(vec![r], layer.bias.iter().copied().collect())?));
    }
    for (name, t) in &files {
        t.write_to(&dir.join(name))?;
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        kernels: priors.iter().map(|p| p.kernel).collect(),
        noise_variances: ds.noise_variances.clone(),
        mixing_seed: cfg.seed,
        mixing_stream: MIXING_STREAM,
        data_seed: cfg.seed,
        files: files.iter().map(|(n, t)| ManifestFile { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("wrote {} samples to {}", cfg.samples, dir.display());
    Ok(manifest)
}

pub struct LoadedData {
    pub manifest: Manifest,
    pub observations: Vec<Mat>,
    pub components: Vec<Mat>,
}

fn split(t: &Tensor) -> Vec<Mat> {
    (0..t.shape()[0]).map(|k| t.matrix(k)).collect()
}

/// Loads a dataset and checks it against the experiment shape.
pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<LoadedData> {
    let manifest = read_manifest(dir)?;
    let m = &manifest.config;
    if m.lattice != cfg.lattice || m.components != cfg.components || m.observed != cfg.observed || m.samples != cfg.samples {
        return Err(CliError::Config(format!(
            "dataset in {} has lattice {:?}, N={}, M={}, {} samples; config expects {:?}, N={}, M={}, {} samples",
            dir.display(),
            m.lattice,
            m.components,
            m.observed,
            m.samples,
            cfg.lattice,
            cfg.components,
            cfg.observed,
            cfg.samples
        )));
    }
    let obs = Tensor::read_from(&dir.join("observations.tpnc"))?;
    let comps = Tensor::read_from(&dir.join("components.tpnc"))?;
    let loc = cfg.location_count();
    if obs.shape() != [cfg.samples, cfg.observed, loc] || comps.shape() != [cfg.samples, cfg.components, loc] {
        return Err(CliError::Config(format!(
            "tensor shapes {:?} / {:?} do not match the manifest",
            obs.shape(),
            comps.shape()
        )));
    }
    Ok(LoadedData { manifest, observations: split(&obs), components: split(&comps) })
}

/// Estimation starting point: a random orthogonal decoder, a shared kernel
/// lengthscale with a small spread, and noise matched to `noise_fraction`.
pub fn initial_state(cfg: &ExperimentConfig, observations: &[Mat]) -> Result<TrainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let n = cfg.components;
    let mid = (cfg.lengthscale_min * cfg.lengthscale_ratio.sqrt()).ln();
    let kernels = (0..n)
        .map(|i| KernelParams {
            log_lengthscale: mid + 0.1 * (i as f64 - (n - 1) as f64 / 2.0),
            log_variance: cfg.kernel_variance.ln(),
        })
        .collect();
    let log_noise = (0..cfg.observed)
        .map(|c| {
            let vals = observations.iter().flat_map(|x| x.row(c).iter().copied().collect::<Vec<_>>());
            let (mut count, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for v in vals {
                count += 1.0;
                let d = v - mean;
                mean += d / count;
                m2 += d * (v - mean);
            }
            (cfg.noise_fraction * (m2 / count).max(1e-12)).ln()
        })
        .collect();
    let model = TpNicaModel {
        nu: cfg.dof(),
        kernels,
        decoder: MixingNetwork::random_orthogonal(n, cfg.observed, cfg.layers, &mut rng)?,
        log_noise,
    };
    let lattice = cfg.build_lattice()?;
    let z = lattice.regular_subgrid(cfg.pseudo_per_axis()?);
    let states = (0..observations.len())
        .map(|_| VariationalState::new(n, cfg.pseudo_points, cfg.dof(), cfg.factored))
        .collect();
    Ok(TrainState::new(model, z, states)?)
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Replaces `dir` with a freshly written checkpoint, via a sibling temp dir.
fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    state.save(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn check_resumable(cfg: &ExperimentConfig, st: &TrainState) -> Result<()> {
    let ok = st.model.nu == cfg.dof()
        && st.model.component_count() == cfg.components
        && st.model.observed_dim() == cfg.observed
        && st.model.decoder.depth() == cfg.layers
        && st.states.len() == cfg.samples
        && st.pseudo_locations.nrows() == cfg.pseudo_points;
    if ok {
        Ok(())
    } else {
        Err(CliError::Config("checkpoint does not match the experiment config".into()))
    }
}

/// Trains on `<data_dir>` and writes `<out>/checkpoint` plus the trace CSV.
pub fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    data_dir: &Path,
    resume: Option<&Path>,
    force: bool,
    threads: usize,
) -> Result<TrainState> {
    cfg.validate()?;
    let data = load_data(cfg, data_dir)?;
    if data.manifest.config.model != cfg.model || data.manifest.config.dof() != cfg.dof() {
        log::warn!(
            "training a {} model on data generated by a {} model",
            cfg.model,
            data.manifest.config.model
        );
    }
    let ckpt = out.join(CHECKPOINT_DIR);
    let mut state = match resume {
        Some(path) => {
            let st = TrainState::load(path)?;
            check_resumable(cfg, &st)?;
            log::info!("resuming from {} at step {}", path.display(), st.step);
            st
        }
        None => {
            if ckpt.exists() {
                if !force {
                    return Err(CliError::Config(format!(
                        "{} already exists; pass --force to retrain or --resume to continue",
                        ckpt.display()
                    )));
                }
                std::fs::remove_dir_all(&ckpt)?;
            }
            initial_state(cfg, &data.observations)?
        }
    };
    std::fs::create_dir_all(out)?;
    let trace_path = out.join(TRACE_FILE);
    let lattice = cfg.build_lattice()?;
    let result = state.train(&lattice, &data.observations, &cfg.train, threads, |st| {
        save_checkpoint(st, &ckpt).and_then(|_| write_trace(&trace_path, &st.trace)).map_err(|e| match e {
            CliError::Core(c) => c,
            other => tpnica::NicaError::Format(other.to_string()),
        })?;
        log::info!(
            "step {} epoch {} elbo {:.3}",
            st.step,
            st.epoch,
            st.trace.last().map_or(f64::NAN, |r| r.elbo)
        );
        Ok(())
    });
    if let Err(e) = result {
        log::error!("training stopped at step {}: {e}; last checkpoint kept in {}", state.step, ckpt.display());
        return Err(e.into());
    }
    if state.clip_events > 0 {
        log::info!("gradient clipping triggered on {} steps", state.clip_events);
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccRow {
    pub model: String,
    pub layers: usize,
    pub kernel_regime: KernelRegime,
    pub seed: u64,
    pub mcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PairRow {
    true_component: usize,
    estimated_component: usize,
    abs_correlation: f64,
    sign_flip: bool,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: MccReport,
    pub baseline: MccReport,
    pub baseline_converged: bool,
    pub rows: Vec<MccRow>,
}

pub fn read_report(path: &Path) -> Result<Vec<MccRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Scores posterior-mean components (or the ground truth itself) and the
/// linear ICA baseline against the generating components.
pub fn evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    data_dir: &Path,
    checkpoint: Option<&Path>,
    truth_as_estimate: bool,
    threads: usize,
) -> Result<Evaluation> {
    cfg.validate()?;
    let data = load_data(cfg, data_dir)?;
    let dir = out.join(EVALUATION_DIR);
    std::fs::create_dir_all(&dir)?;
    let lattice = cfg.build_lattice()?;

    let (label, estimates, curve) = if truth_as_estimate {
        ("truth".to_string(), data.components.clone(), Vec::new())
    } else {
        let path: PathBuf = checkpoint.map_or_else(|| out.join(CHECKPOINT_DIR), Path::to_path_buf);
        let st = TrainState::load(&path)?;
        check_resumable(cfg, &st)?;
        let refs: Vec<&VariationalState> = st.states.iter().collect();
        let means = posterior_means(&st.model, &lattice, &st.pseudo_locations, &refs, threads)?;
        (cfg.model.to_string(), means, st.epoch_means())
    };
    let report = mcc(&estimates, &data.components, MccOptions::default())?;
    let (ica, fit) = linear_ica_baseline(&data.observations, cfg.components, cfg.seed)?;
    if !fit.converged {
        log::warn!("linear ICA baseline did not converge");
    }
    let baseline = mcc(&ica, &data.components, MccOptions::default())?;

    let m = cfg.location_count();
    let mut comp = Tensor::zeros(vec![estimates.len(), cfg.components, m]);
    for (k, e) in estimates.iter().enumerate() {
        comp.set_matrix(k, e);
    }
    comp.write_to(&dir.join("components.tpnc"))?;

    let row = |model: String, r: &MccReport| MccRow {
        model,
        layers: cfg.layers,
        kernel_regime: cfg.kernel_regime,
        seed: cfg.seed,
        mcc: r.mcc,
    };
    let rows = vec![row(label.clone(), &report), row("linear_ica".into(), &baseline)];
    let mut w = csv::Writer::from_path(dir.join(REPORT_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("mcc_pairs.csv"))?;
    for (i, &k) in report.matching.iter().enumerate() {
        w.serialize(PairRow {
            true_component: i,
            estimated_component: k,
            abs_correlation: report.correlations[i],
            sign_flip: report.sign_flips[i],
        })?;
    }
    w.flush()?;

    let curve = Series {
        label: label.clone(),
        points: curve.into_iter().enumerate().map(|(e, v)| ((e + 1) as f64, v)).collect(),
        errors: None,
    };
    std::fs::write(dir.join("learning_curve.svg"), line_plot("Learning curve", "epoch", "mean ELBO", &[curve]))?;
    let depth = |label: &str, v: f64| Series { label: label.into(), points: vec![(cfg.layers as f64, v)], errors: None };
    std::fs::write(
        dir.join("mcc_vs_depth.svg"),
        line_plot(
            &format!("MCC, {} kernels", cfg.kernel_regime),
            "mixing layers",
            "MCC",
            &[depth(&label, report.mcc), depth("linear ICA", baseline.mcc)],
        ),
    )?;
    log::info!("{label} MCC {:.4}, linear ICA MCC {:.4}", report.mcc, baseline.mcc);
    Ok(Evaluation { model: report, baseline, baseline_converged: fit.converged, rows })
}
