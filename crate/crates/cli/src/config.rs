use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpnica::lattice::{KernelSpec, Lattice};
use tpnica::optim::TrainConfig;
use tpnica::processes::{Dof, TpPrior};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tp,
    Gp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Tp => "tp",
            ModelKind::Gp => "gp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelRegime {
    Distinct,
    Equal,
}

impl fmt::Display for KernelRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelRegime::Distinct => "distinct",
            KernelRegime::Equal => "equal",
        })
    }
}

/// One experiment: data generation, model and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lattice: Vec<usize>,
    pub components: usize,
    pub observed: usize,
    pub layers: usize,
    pub kernel_regime: KernelRegime,
    pub model: ModelKind,
    /// Degrees of freedom for tp runs; ignored for gp.
    pub nu: f64,
    pub noise_fraction: f64,
    pub samples: usize,
    pub pseudo_points: usize,
    /// Smallest generating lengthscale; the distinct regime spans
    /// `[lengthscale_min, lengthscale_min * lengthscale_ratio]` log-evenly.
    pub lengthscale_min: f64,
    pub lengthscale_ratio: f64,
    pub kernel_variance: f64,
    /// Drop cross-component terms of the pseudo-factor precision.
    pub factored: bool,
    pub seed: u64,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            lattice: vec![16, 16],
            components: 3,
            observed: 6,
            layers: 1,
            kernel_regime: KernelRegime::Distinct,
            model: ModelKind::Tp,
            nu: 4.0,
            noise_fraction: 0.1,
            samples: 256,
            pseudo_points: 25,
            lengthscale_min: 3.0,
            lengthscale_ratio: 10.0,
            kernel_variance: 1.0,
            factored: false,
            seed: 0,
            train: TrainConfig::default(),
            out: None,
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lattice.is_empty() || self.lattice.iter().any(|&s| s == 0) {
            return Err(bad(format!("lattice shape {:?} is empty", self.lattice)));
        }
        if self.components == 0 || self.observed < self.components {
            return Err(bad(format!("need 1 <= N <= M, got N={} M={}", self.components, self.observed)));
        }
        if !(1..=4).contains(&self.layers) {
            return Err(bad(format!("layer count must be in 1..=4, got {}", self.layers)));
        }
        if self.model == ModelKind::Tp && !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(bad(format!("nu must be positive and finite, got {}", self.nu)));
        }
        if !(self.noise_fraction > 0.0 && self.noise_fraction < 1.0) {
            return Err(bad(format!("noise_fraction must be in (0, 1), got {}", self.noise_fraction)));
        }
        if self.samples == 0 {
            return Err(bad("samples must be positive"));
        }
        self.pseudo_per_axis()?;
        if !(self.lengthscale_min > 0.0 && self.lengthscale_ratio >= 1.0 && self.kernel_variance > 0.0) {
            return Err(bad("kernel settings must be positive with lengthscale_ratio >= 1"));
        }
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Pseudo-points form a regular grid, so J must be a perfect d-th power.
    pub fn pseudo_per_axis(&self) -> Result<usize> {
        let d = self.lattice.len() as u32;
        let k = (self.pseudo_points as f64).powf(1.0 / d as f64).round() as usize;
        if self.pseudo_points == 0 || k.pow(d) != self.pseudo_points {
            return Err(bad(format!(
                "pseudo_points = {} is not a {d}-th power",
                self.pseudo_points
            )));
        }
        Ok(k)
    }

    pub fn location_count(&self) -> usize {
        self.lattice.iter().product()
    }

    pub fn dof(&self) -> Dof {
        match self.model {
            ModelKind::Tp => Dof::Finite(self.nu),
            ModelKind::Gp => Dof::Infinite,
        }
    }

    pub fn build_lattice(&self) -> Result<Lattice> {
        Ok(Lattice::grid(&self.lattice)?)
    }

    /// Generating lengthscales: log-even over the configured ratio, or the
    /// geometric midpoint copied to every component.
    pub fn lengthscales(&self) -> Vec<f64> {
        let n = self.components;
        let mid = self.lengthscale_min * self.lengthscale_ratio.sqrt();
        (0..n)
            .map(|i| match self.kernel_regime {
                KernelRegime::Equal => mid,
                KernelRegime::Distinct if n == 1 => mid,
                KernelRegime::Distinct => self.lengthscale_min * self.lengthscale_ratio.powf(i as f64 / (n - 1) as f64),
            })
            .collect()
    }

    pub fn priors(&self) -> Result<Vec<TpPrior>> {
        self.lengthscales()
            .into_iter()
            .map(|l| Ok(TpPrior { nu: self.dof(), kernel: KernelSpec::squared_exponential(l, self.kernel_variance)? }))
            .collect()
    }

    /// Training seed follows the experiment seed.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| bad("no output directory; pass --out or set \"out\""))
    }
}

/// Grid of experiments sharing a base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub layers: Vec<usize>,
    pub kernel_regimes: Vec<KernelRegime>,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: ExperimentConfig::default(),
            layers: vec![1, 2],
            kernel_regimes: vec![KernelRegime::Distinct, KernelRegime::Equal],
            models: vec![ModelKind::Tp, ModelKind::Gp],
            seeds: (0..6).collect(),
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub model: ModelKind,
    pub kernel_regime: KernelRegime,
    pub layers: usize,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}-{}-L{}-seed{}", self.model, self.kernel_regime, self.layers, self.seed)
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &layers in &self.layers {
            for &kernel_regime in &self.kernel_regimes {
                for &model in &self.models {
                    for &seed in &self.seeds {
                        cells.push(Cell { model, kernel_regime, layers, seed });
                    }
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> ExperimentConfig {
        ExperimentConfig {
            model: cell.model,
            kernel_regime: cell.kernel_regime,
            layers: cell.layers,
            seed: cell.seed,
            out: None,
            ..self.base.clone()
        }
        .resolved()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.kernel_regimes.is_empty() || self.models.is_empty() || self.seeds.is_empty() {
            return Err(bad("every sweep axis needs at least one value"));
        }
        for cell in self.cells() {
            self.cell_config(&cell).validate()?;
        }
        Ok(())
    }
}
