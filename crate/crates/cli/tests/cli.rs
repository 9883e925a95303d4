use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use tpnica::optim::TrainConfig;
use tpnica::tensor::Tensor;
use tpnica_cli::commands::{
    evaluate, generate, read_manifest, read_report, read_trace, train, CHECKPOINT_DIR, DATASET_DIR, EVALUATION_DIR,
    REPORT_FILE, TRACE_FILE,
};
use tpnica_cli::config::{ExperimentConfig, KernelRegime, ModelKind, SweepConfig};
use tpnica_cli::sweep::{mean_stderr, sweep};
use tpnica_cli::CliError;

fn tiny(model: ModelKind) -> ExperimentConfig {
    ExperimentConfig {
        lattice: vec![4, 4],
        components: 2,
        observed: 3,
        layers: 2,
        model,
        samples: 6,
        pseudo_points: 4,
        lengthscale_min: 1.0,
        train: TrainConfig { epochs: 3, minibatch_size: 4, lr_model: 1e-2, ..Default::default() },
        ..Default::default()
    }
    .resolved()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tpnica"));
    c.env("RUST_LOG", "error").env("NICA_THREADS", "1");
    c
}

#[test]
fn generate_writes_the_shape_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { samples: 64, ..Default::default() };
    let manifest = generate(&cfg, tmp.path(), false).unwrap();
    let dir = tmp.path().join(DATASET_DIR);
    assert_eq!(Tensor::read_from(&dir.join("observations.tpnc")).unwrap().shape(), [64, 6, 256]);
    assert_eq!(Tensor::read_from(&dir.join("components.tpnc")).unwrap().shape(), [64, 3, 256]);
    assert_eq!(read_manifest(&dir).unwrap(), manifest);
    assert_eq!(manifest.kernels.len(), 3);
    assert!(manifest.files.iter().any(|f| f.name == "mixing_0_weight.tpnc" && f.shape == [6, 3]));
}

#[test]
fn generate_is_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::Tp);
    generate(&cfg, a.path(), false).unwrap();
    generate(&cfg, b.path(), false).unwrap();
    let (fa, fb) = (read_dir_bytes(&a.path().join(DATASET_DIR)), read_dir_bytes(&b.path().join(DATASET_DIR)));
    assert!(fa.len() >= 7);
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    generate(&ExperimentConfig { seed: 1, ..cfg }.resolved(), c.path(), false).unwrap();
    assert_ne!(fa["observations.tpnc"], read_dir_bytes(&c.path().join(DATASET_DIR))["observations.tpnc"]);
}

#[test]
fn equal_regime_echoes_one_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { kernel_regime: KernelRegime::Equal, components: 3, observed: 4, ..tiny(ModelKind::Gp) };
    let m = generate(&cfg, tmp.path(), false).unwrap();
    assert!(m.kernels.iter().all(|k| k == &m.kernels[0]));
    let distinct = generate(&ExperimentConfig { kernel_regime: KernelRegime::Distinct, ..cfg }, tmp.path(), true).unwrap();
    assert!(distinct.kernels[0].lengthscale < distinct.kernels[1].lengthscale);
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::Tp);
    generate(&cfg, tmp.path(), false).unwrap();
    let err = generate(&cfg, tmp.path(), false).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 2);
    generate(&cfg, tmp.path(), true).unwrap();
}

#[test]
fn unknown_manifest_schema_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    generate(&tiny(ModelKind::Tp), tmp.path(), false).unwrap();
    let path = tmp.path().join(DATASET_DIR).join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_manifest(&tmp.path().join(DATASET_DIR)), Err(CliError::Config(_))));
}

#[test]
fn trace_bookkeeping_and_gp_has_no_tau_term() {
    for model in [ModelKind::Tp, ModelKind::Gp] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(model);
        generate(&cfg, tmp.path(), false).unwrap();
        train(&cfg, tmp.path(), &tmp.path().join(DATASET_DIR), None, false, 1).unwrap();
        let trace = read_trace(&tmp.path().join(TRACE_FILE)).unwrap();
        assert_eq!(trace.len(), 3 * 2);
        assert_eq!(trace.iter().map(|r| r.step).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        match model {
            ModelKind::Gp => assert!(trace.iter().all(|r| r.kl_tau == 0.0)),
            ModelKind::Tp => assert!(trace.iter().any(|r| r.kl_tau != 0.0)),
        }
        let header = std::fs::read_to_string(tmp.path().join(TRACE_FILE)).unwrap();
        assert!(header.starts_with("step,epoch,elbo,data_term,kl_u,kl_tau,wallclock_s\n"));
    }
}

#[test]
fn resumed_training_concatenates_the_trace() {
    let full = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::Tp);
    generate(&cfg, full.path(), false).unwrap();
    let data = full.path().join(DATASET_DIR);
    let whole = train(&cfg, full.path(), &data, None, false, 1).unwrap();

    let part = tempfile::tempdir().unwrap();
    let short = ExperimentConfig { train: TrainConfig { epochs: 1, ..cfg.train.clone() }, ..cfg.clone() };
    train(&short, part.path(), &data, None, false, 1).unwrap();
    // Continuing without --resume or --force is refused.
    assert!(matches!(train(&cfg, part.path(), &data, None, false, 1), Err(CliError::Config(_))));
    let resumed = train(&cfg, part.path(), &data, Some(&part.path().join(CHECKPOINT_DIR)), false, 1).unwrap();

    let a = read_trace(&full.path().join(TRACE_FILE)).unwrap();
    let b = read_trace(&part.path().join(TRACE_FILE)).unwrap();
    assert_eq!(b.iter().map(|r| r.step).collect::<Vec<_>>(), (0..a.len() as u64).collect::<Vec<_>>());
    assert_eq!(
        a.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>(),
        b.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>()
    );
    assert_eq!(whole.model, resumed.model);
    assert_eq!(whole.states, resumed.states);
}

#[test]
fn mismatched_dataset_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::Tp);
    generate(&cfg, tmp.path(), false).unwrap();
    let other = ExperimentConfig { observed: 4, ..cfg };
    let err = train(&other, tmp.path(), &tmp.path().join(DATASET_DIR), None, false, 1).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(!tmp.path().join(CHECKPOINT_DIR).exists());
}

fn parse_svg(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}

#[test]
fn evaluate_reports_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::Tp);
    generate(&cfg, tmp.path(), false).unwrap();
    let data = tmp.path().join(DATASET_DIR);
    let truth = evaluate(&cfg, tmp.path(), &data, None, true, 1).unwrap();
    assert!((truth.model.mcc - 1.0).abs() < 1e-12);

    train(&cfg, tmp.path(), &data, None, false, 1).unwrap();
    let ev = evaluate(&cfg, tmp.path(), &data, None, false, 1).unwrap();
    assert!((0.0..=1.0).contains(&ev.model.mcc));
    let dir = tmp.path().join(EVALUATION_DIR);
    let rows = read_report(&dir.join(REPORT_FILE)).unwrap();
    assert_eq!(rows, ev.rows);
    assert_eq!(rows.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["tp", "linear_ica"]);
    let header = std::fs::read_to_string(dir.join(REPORT_FILE)).unwrap();
    assert!(header.starts_with("model,layers,kernel_regime,seed,mcc\n"));
    assert_eq!(Tensor::read_from(&dir.join("components.tpnc")).unwrap().shape(), [6, 2, 16]);
    parse_svg(&dir.join("learning_curve.svg"));
    parse_svg(&dir.join("mcc_vs_depth.svg"));
}

#[test]
fn sweep_grid_rows_and_aggregation() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ExperimentConfig { train: TrainConfig { epochs: 1, minibatch_size: 6, ..Default::default() }, ..tiny(ModelKind::Tp) };
    let grid = SweepConfig { base, layers: vec![1, 2], seeds: vec![0, 1], ..Default::default() };
    let res = sweep(&grid, tmp.path(), false, 1).unwrap();
    assert_eq!(res.rows.len(), 16);
    assert!(res.rows.iter().all(|r| r.status == "ok" && r.mcc.is_some()));
    for s in res.summary.iter().filter(|s| !s.model.starts_with("linear_ica")) {
        let vals: Vec<f64> = res
            .rows
            .iter()
            .filter(|r| r.model.to_string() == s.model && r.layers == s.layers && r.kernel_regime == s.kernel_regime)
            .map(|r| r.mcc.unwrap())
            .collect();
        assert_eq!(vals.len(), 2);
        let (mean, se) = mean_stderr(&vals);
        assert!((s.mean - (vals[0] + vals[1]) / 2.0).abs() < 1e-15);
        assert_eq!((s.mean, s.stderr), (mean, se));
    }
    let text = std::fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 17);
    parse_svg(&tmp.path().join("mcc_vs_depth_distinct.svg"));
    parse_svg(&tmp.path().join("mcc_vs_depth_equal.svg"));

    // Finished cells are reused; the rerun reproduces the table exactly.
    let again = sweep(&grid, tmp.path(), false, 1).unwrap();
    assert_eq!(again.rows, res.rows);
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ExperimentConfig { train: TrainConfig { epochs: 1, minibatch_size: 6, ..Default::default() }, ..tiny(ModelKind::Tp) };
    let grid = SweepConfig {
        base,
        layers: vec![1],
        kernel_regimes: vec![KernelRegime::Distinct],
        models: vec![ModelKind::Tp],
        seeds: vec![0, 1],
        ..Default::default()
    };
    // A regular file where seed 0's cell directory should go.
    std::fs::create_dir_all(tmp.path().join("cells")).unwrap();
    std::fs::write(tmp.path().join("cells").join("tp-distinct-L1-seed0"), b"x").unwrap();
    let res = sweep(&grid, tmp.path(), false, 1).unwrap();
    assert_eq!(res.rows[0].status, "failed");
    assert!(res.rows[0].mcc.is_none() && !res.rows[0].error.is_empty());
    assert_eq!(res.rows[1].status, "ok");
    let s = res.summary_for("tp", 1, KernelRegime::Distinct).unwrap();
    assert_eq!((s.count, s.failed), (1, 1));
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

#[test]
fn binary_end_to_end_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg_path = write_config(tmp.path(), &ExperimentConfig { train: TrainConfig { epochs: 1, ..tiny(ModelKind::Tp).train }, ..tiny(ModelKind::Tp) });
    let run = |args: &[&str]| bin().args(args).output().unwrap();
    let c = cfg_path.to_str().unwrap();
    let o = out.to_str().unwrap();

    assert!(run(&["generate", "--config", c, "--out", o, "--seed", "3"]).status.success());
    assert_eq!(run(&["generate", "--config", c, "--out", o]).status.code(), Some(2));
    assert!(run(&["train", "--config", c, "--out", o, "--seed", "3"]).status.success());
    let ev = run(&["evaluate", "--config", c, "--out", o, "--seed", "3"]);
    assert!(ev.status.success());
    assert!(String::from_utf8_lossy(&ev.stdout).contains("linear_ica"));
    let manifest = read_manifest(&out.join(DATASET_DIR)).unwrap();
    assert_eq!(manifest.config.seed, 3);

    // Flags override config fields; the model must match the checkpoint.
    assert_eq!(run(&["evaluate", "--config", c, "--out", o, "--model", "gp"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--out", o, "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));

    // Non-finite observations abort training as a numerical failure.
    let obs_path = out.join(DATASET_DIR).join("observations.tpnc");
    let mut obs = Tensor::read_from(&obs_path).unwrap();
    obs.data_mut()[0] = f64::NAN;
    obs.write_to(&obs_path).unwrap();
    assert_eq!(run(&["train", "--config", c, "--out", o, "--seed", "3", "--force"]).status.code(), Some(3));
}
