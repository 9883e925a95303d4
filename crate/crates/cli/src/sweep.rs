use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::commands::{evaluate, generate, read_report, train, DATASET_DIR, EVALUATION_DIR, REPORT_FILE};
use crate::config::{Cell, KernelRegime, ModelKind, SweepConfig};
use crate::error::Result;
use crate::svg::{line_plot, Series};

/// One NICA run of the grid. `mcc` is empty when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub layers: usize,
    pub kernel_regime: KernelRegime,
    pub seed: u64,
    pub mcc: Option<f64>,
    pub status: String,
    pub error: String,
}

/// Linear ICA on the same data as the matching NICA cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub data_model: ModelKind,
    pub layers: usize,
    pub kernel_regime: KernelRegime,
    pub seed: u64,
    pub mcc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub layers: usize,
    pub kernel_regime: KernelRegime,
    pub count: usize,
    pub failed: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub baselines: Vec<BaselineRow>,
    pub summary: Vec<SummaryRow>,
}

impl SweepOutcome {
    pub fn summary_for(&self, model: &str, layers: usize, regime: KernelRegime) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.model == model && r.layers == layers && r.kernel_regime == regime)
    }
}

/// Mean and standard error; the error is 0 for fewer than two values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn baseline_label(data_model: ModelKind) -> String {
    format!("linear_ica_{data_model}")
}

fn run_cell(sweep: &SweepConfig, cell: &Cell, out: &Path, force: bool, threads: usize) -> Result<(f64, f64)> {
    let dir = out.join("cells").join(cell.name());
    let report = dir.join(EVALUATION_DIR).join(REPORT_FILE);
    if !force && report.exists() {
        let rows = read_report(&report)?;
        if let (Some(m), Some(b)) = (rows.iter().find(|r| r.model == cell.model.to_string()), rows.iter().find(|r| r.model == "linear_ica")) {
            log::info!("{}: reusing finished result", cell.name());
            return Ok((m.mcc, b.mcc));
        }
    }
    let cfg = sweep.cell_config(cell);
    let t = Instant::now();
    generate(&cfg, &dir, true)?;
    train(&cfg, &dir, &dir.join(DATASET_DIR), None, true, threads)?;
    let ev = evaluate(&cfg, &dir, &dir.join(DATASET_DIR), None, false, threads)?;
    log::info!("{}: MCC {:.4} (linear ICA {:.4}) in {:.0}s", cell.name(), ev.model.mcc, ev.baseline.mcc, t.elapsed().as_secs_f64());
    Ok((ev.model.mcc, ev.baseline.mcc))
}

fn summarize(rows: &[SweepRow], baselines: &[BaselineRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, KernelRegime), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.model.to_string(), r.layers, r.kernel_regime)).or_default();
        match r.mcc {
            Some(v) => g.0.push(v),
            None => g.1 += 1,
        }
    }
    for b in baselines {
        let g = groups.entry((baseline_label(b.data_model), b.layers, b.kernel_regime)).or_default();
        match b.mcc {
            Some(v) => g.0.push(v),
            None => g.1 += 1,
        }
    }
    groups
        .into_iter()
        .map(|((model, layers, kernel_regime), (vals, failed))| {
            let (mean, stderr) = mean_stderr(&vals);
            SummaryRow { model, layers, kernel_regime, count: vals.len(), failed, mean, stderr }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every cell of the grid, continuing past failures.
///
/// Cells are spread over up to `threads` workers; finished cells under
/// `out` are reused unless `force` is set.
pub fn sweep(cfg: &SweepConfig, out: &Path, force: bool, threads: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let cells = cfg.cells();
    let workers = threads.clamp(1, cells.len());
    let per_cell = (threads / workers).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(f64, f64)>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(cfg, &cells[i], out, force, per_cell);
                if let Err(e) = &r {
                    log::error!("{} failed: {e}", cells[i].name());
                }
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().unwrap_or_else(|p| p.into_inner());

    let mut rows = Vec::with_capacity(cells.len());
    let mut baselines = Vec::with_capacity(cells.len());
    for (cell, res) in cells.iter().zip(results) {
        let (mcc, base, status, error) = match res {
            Some(Ok((m, b))) => (Some(m), Some(b), "ok".to_string(), String::new()),
            Some(Err(e)) => (None, None, "failed".to_string(), e.to_string()),
            None => (None, None, "failed".to_string(), "cell did not run".to_string()),
        };
        rows.push(SweepRow { model: cell.model, layers: cell.layers, kernel_regime: cell.kernel_regime, seed: cell.seed, mcc, status, error });
        baselines.push(BaselineRow { data_model: cell.model, layers: cell.layers, kernel_regime: cell.kernel_regime, seed: cell.seed, mcc: base });
    }
    let summary = summarize(&rows, &baselines);
    write_csv(&out.join("results.csv"), &rows)?;
    write_csv(&out.join("baseline.csv"), &baselines)?;
    write_csv(&out.join("summary.csv"), &summary)?;

    for &regime in &cfg.kernel_regimes {
        let mut by_model: BTreeMap<&str, Series> = BTreeMap::new();
        for r in summary.iter().filter(|r| r.kernel_regime == regime && r.count > 0) {
            let s = by_model.entry(&r.model).or_insert_with(|| Series { label: r.model.clone(), points: Vec::new(), errors: Some(Vec::new()) });
            s.points.push((r.layers as f64, r.mean));
            if let Some(e) = s.errors.as_mut() {
                e.push(r.stderr);
            }
        }
        let series: Vec<Series> = by_model.into_values().collect();
        std::fs::write(
            out.join(format!("mcc_vs_depth_{regime}.svg")),
            line_plot(&format!("MCC vs depth, {regime} kernels"), "mixing layers", "MCC", &series),
        )?;
    }
    Ok(SweepOutcome { rows, baselines, summary })
}
