//! Adam training of model and variational parameters, with deterministic
//! minibatching and bit-exact checkpoints.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::{minibatch_gradient, BaseRandomness, ElboOptions, KernelParams, SampleInput, TpNicaModel};
use crate::error::{NicaError, Result};
use crate::lattice::Lattice;
use crate::mixing::{Layer, MixingNetwork};
use crate::posterior::{TauPosterior, VariationalState};
use crate::processes::Dof;
use crate::tensor::Tensor;

type Mat = DMatrix<f64>;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_variational: f64,
    pub lr_model: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub clip_norm: f64,
    pub elbo: ElboOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_variational: 1e-1,
            lr_model: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            minibatch_size: 8,
            epochs: 1,
            seed: 0,
            checkpoint_interval: 0,
            clip_norm: 100.0,
            elbo: ElboOptions::TRAINING,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NicaError::InvalidParameter(msg));
        if !(self.lr_variational >= 0.0 && self.lr_model >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.minibatch_size == 0 {
            return bad("minibatch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad(format!("bad Adam constants ({}, {}, {})", self.beta1, self.beta2, self.epsilon));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive".into());
        }
        if self.elbo.n_tau == 0 || self.elbo.n_samples == 0 {
            return bad("need at least one Monte Carlo draw".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.minibatch_size)
    }
}

/// Adam moments for one parameter vector. Ascends the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] += lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// One row of the ELBO trace; values are minibatch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub elbo: f64,
    pub data_term: f64,
    pub kl_u: f64,
    pub kl_tau: f64,
    pub wallclock_s: f64,
}

impl TraceRow {
    /// Every column except wall-clock time.
    pub fn deterministic_part(&self) -> (u64, usize, u64, u64, u64, u64) {
        (
            self.step,
            self.epoch,
            self.elbo.to_bits(),
            self.data_term.to_bits(),
            self.kl_u.to_bits(),
            self.kl_tau.to_bits(),
        )
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: TpNicaModel,
    pub model_flat: Vec<f64>,
    pub pseudo_locations: Mat,
    pub states: Vec<VariationalState>,
    pub local_flat: Vec<Vec<f64>>,
    pub adam_model: Adam,
    pub adam_pseudo: Adam,
    pub adam_local: Vec<Adam>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub trace: Vec<TraceRow>,
    /// Wall-clock seconds accumulated over earlier sessions.
    pub elapsed_s: f64,
    pub clip_events: u64,
}

impl TrainState {
    pub fn new(model: TpNicaModel, pseudo_locations: Mat, states: Vec<VariationalState>) -> Result<Self> {
        model.validate()?;
        for s in &states {
            s.validate()?;
            if s.component_count() != model.component_count() || s.pseudo_count() != pseudo_locations.nrows() {
                return Err(NicaError::Dimension("variational state does not match the model".into()));
            }
        }
        let model_flat = model.to_flat();
        let local_flat: Vec<Vec<f64>> = states.iter().map(|s| s.to_flat()).collect();
        Ok(TrainState {
            adam_model: Adam::new(model_flat.len()),
            adam_pseudo: Adam::new(pseudo_locations.len()),
            adam_local: local_flat.iter().map(|f| Adam::new(f.len())).collect(),
            model,
            model_flat,
            pseudo_locations,
            states,
            local_flat,
            step: 0,
            epoch: 0,
            trace: Vec::new(),
            elapsed_s: 0.0,
            clip_events: 0,
        })
    }

    fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.states.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4 + epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Trains until `config.epochs` epochs are complete.
    ///
    /// `on_checkpoint` runs every `checkpoint_interval` steps and after the
    /// final epoch. A failing step leaves `self` at the last completed step.
    pub fn train(
        &mut self,
        lattice: &Lattice,
        data: &[Mat],
        config: &TrainConfig,
        threads: usize,
        mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        config.validate()?;
        if data.is_empty() {
            return Err(NicaError::InvalidParameter("empty dataset".into()));
        }
        if data.len() != self.states.len() {
            return Err(NicaError::Dimension(format!(
                "{} observations for {} variational states",
                data.len(),
                self.states.len()
            )));
        }
        let n = self.model.component_count();
        let m = lattice.len();
        let per_epoch = config.steps_per_epoch(data.len());
        let session = Instant::now();
        while self.epoch < config.epochs {
            let order = self.epoch_order(config.seed, self.epoch);
            let first = (self.step as usize).saturating_sub(self.epoch * per_epoch);
            for b in first..per_epoch {
                let idx = &order[b * config.minibatch_size..((b + 1) * config.minibatch_size).min(order.len())];
                let bases: Vec<BaseRandomness> = idx
                    .iter()
                    .map(|&k| BaseRandomness::keyed(config.seed, self.step, k as u64, n, m, config.elbo))
                    .collect();
                let batch: Vec<SampleInput> = idx
                    .iter()
                    .zip(&bases)
                    .map(|(&k, base)| SampleInput { state: &self.states[k], x: &data[k], base })
                    .collect();
                let res = minibatch_gradient(&self.model, lattice, &self.pseudo_locations, &batch, threads)?;
                let mut g = res.gradient;

                let sq: f64 = g.model.iter().chain(g.pseudo_locations.iter()).chain(g.local.iter().flatten()).map(|v| v * v).sum();
                let norm = sq.sqrt();
                if norm > config.clip_norm {
                    let s = config.clip_norm / norm;
                    g.model.iter_mut().for_each(|v| *v *= s);
                    g.pseudo_locations.iter_mut().for_each(|v| *v *= s);
                    g.local.iter_mut().flatten().for_each(|v| *v *= s);
                    self.clip_events += 1;
                    log::info!("step {}: gradient norm {norm:.3e} clipped to {}", self.step, config.clip_norm);
                }

                self.adam_model.step(&mut self.model_flat, &g.model, config.lr_model, config);
                self.model.set_flat(&self.model_flat)?;
                self.adam_pseudo.step(self.pseudo_locations.as_mut_slice(), g.pseudo_locations.as_slice(), config.lr_variational, config);
                for (&k, gl) in idx.iter().zip(&g.local) {
                    self.adam_local[k].step(&mut self.local_flat[k], gl, config.lr_variational, config);
                    self.states[k].set_flat(&self.local_flat[k])?;
                }

                let mean = |f: fn(&crate::elbo::ElboEstimate) -> f64| {
                    res.estimates.iter().map(f).sum::<f64>() / res.estimates.len() as f64
                };
                self.trace.push(TraceRow {
                    step: self.step,
                    epoch: self.epoch,
                    elbo: res.objective,
                    data_term: mean(|e| e.data_term),
                    kl_u: mean(|e| e.kl_u),
                    kl_tau: mean(|e| e.kl_tau),
                    wallclock_s: self.elapsed_s + session.elapsed().as_secs_f64(),
                });
                self.step += 1;
                if config.checkpoint_interval > 0 && self.step % config.checkpoint_interval as u64 == 0 {
                    on_checkpoint(self)?;
                }
            }
            self.epoch += 1;
        }
        self.elapsed_s += session.elapsed().as_secs_f64();
        on_checkpoint(self)
    }

    /// Mean ELBO of each epoch in the trace.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); epochs];
        for r in &self.trace {
            sums[r.epoch].0 += r.elbo;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, c)| s / c.max(1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    nu: Dof,
    slope: f64,
    layer_shapes: Vec<(usize, usize)>,
    components: usize,
    observed: usize,
    pseudo_count: usize,
    dim: usize,
    samples: usize,
    factored: bool,
    step: u64,
    epoch: usize,
    elapsed_s: f64,
    clip_events: u64,
    adam_model_t: u64,
    adam_pseudo_t: u64,
    adam_local_t: Vec<u64>,
}

fn rows(vs: &[Vec<f64>], width: usize) -> Result<Tensor> {
    Tensor::new(vec![vs.len(), width], vs.iter().flatten().copied().collect())
}

fn split_rows(t: &Tensor, count: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    if t.shape() != [count, width] {
        return Err(NicaError::Format(format!("expected shape [{count}, {width}], got {:?}", t.shape())));
    }
    Ok(t.data().chunks(width.max(1)).take(count).map(|c| c.to_vec()).collect())
}

fn vector(t: &Tensor, len: usize) -> Result<Vec<f64>> {
    if t.shape() != [len] {
        return Err(NicaError::Format(format!("expected shape [{len}], got {:?}", t.shape())));
    }
    Ok(t.data().to_vec())
}

impl TrainState {
    /// Writes the state into `dir` as TensorFiles plus `checkpoint.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let s = self.states.len();
        let width = self.local_flat.first().map_or(0, |v| v.len());
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            nu: self.model.nu,
            slope: self.model.decoder.slope,
            layer_shapes: self.model.decoder.layers.iter().map(|l| l.weight.shape()).collect(),
            components: self.model.component_count(),
            observed: self.model.observed_dim(),
            pseudo_count: self.pseudo_locations.nrows(),
            dim: self.pseudo_locations.ncols(),
            samples: s,
            factored: self.states.first().is_some_and(|v| v.factored),
            step: self.step,
            epoch: self.epoch,
            elapsed_s: self.elapsed_s,
            clip_events: self.clip_events,
            adam_model_t: self.adam_model.t,
            adam_pseudo_t: self.adam_pseudo.t,
            adam_local_t: self.adam_local.iter().map(|a| a.t).collect(),
        };
        let (j, d) = self.pseudo_locations.shape();
        let pseudo_rows: Vec<f64> = (0..j).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| self.pseudo_locations[(r, c)]).collect();
        let p = self.model_flat.len();
        let files: Vec<(&str, Tensor)> = vec![
            ("model.tpnc", Tensor::new(vec![p], self.model_flat.clone())?),
            ("adam_model_m.tpnc", Tensor::new(vec![p], self.adam_model.m.clone())?),
            ("adam_model_v.tpnc", Tensor::new(vec![p], self.adam_model.v.clone())?),
            ("pseudo.tpnc", Tensor::new(vec![j, d], pseudo_rows)?),
            ("adam_pseudo_m.tpnc", Tensor::new(vec![j * d], self.adam_pseudo.m.clone())?),
            ("adam_pseudo_v.tpnc", Tensor::new(vec![j * d], self.adam_pseudo.v.clone())?),
            ("local.tpnc", rows(&self.local_flat, width)?),
            ("adam_local_m.tpnc", rows(&self.adam_local.iter().map(|a| a.m.clone()).collect::<Vec<_>>(), width)?),
            ("adam_local_v.tpnc", rows(&self.adam_local.iter().map(|a| a.v.clone()).collect::<Vec<_>>(), width)?),
            (
                "trace.tpnc",
                Tensor::new(
                    vec![self.trace.len(), 7],
                    self.trace
                        .iter()
                        .flat_map(|r| [r.step as f64, r.epoch as f64, r.elbo, r.data_term, r.kl_u, r.kl_tau, r.wallclock_s])
                        .collect(),
                )?,
            ),
        ];
        for (name, t) in files {
            t.write_to(&dir.join(name))?;
        }
        let json = serde_json::to_string_pretty(&meta).map_err(|e| NicaError::Format(e.to_string()))?;
        std::fs::write(dir.join("checkpoint.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("checkpoint.json"))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| NicaError::Format(e.to_string()))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => return Err(NicaError::Format(format!("unsupported checkpoint version {other:?}"))),
        }
        let meta: CheckpointMeta = serde_json::from_value(raw).map_err(|e| NicaError::Format(e.to_string()))?;
        let read = |name: &str| Tensor::read_from(&dir.join(name));

        let layers = meta
            .layer_shapes
            .iter()
            .map(|&(r, c)| Layer { weight: Mat::zeros(r, c), bias: nalgebra::DVector::zeros(r) })
            .collect();
        let mut model = TpNicaModel {
            nu: meta.nu,
            kernels: vec![KernelParams { log_lengthscale: 0.0, log_variance: 0.0 }; meta.components],
            decoder: MixingNetwork::new(layers, meta.slope)?,
            log_noise: vec![0.0; meta.observed],
        };
        let p = model.flat_len();
        let model_flat = vector(&read("model.tpnc")?, p)?;
        model.set_flat(&model_flat)?;
        let adam_model = Adam { m: vector(&read("adam_model_m.tpnc")?, p)?, v: vector(&read("adam_model_v.tpnc")?, p)?, t: meta.adam_model_t };

        let (j, d) = (meta.pseudo_count, meta.dim);
        let pt = read("pseudo.tpnc")?;
        if pt.shape() != [j, d] {
            return Err(NicaError::Format("pseudo-location tensor has the wrong shape".into()));
        }
        let pseudo_locations = Mat::from_row_slice(j, d, pt.data());
        let adam_pseudo = Adam {
            m: vector(&read("adam_pseudo_m.tpnc")?, j * d)?,
            v: vector(&read("adam_pseudo_v.tpnc")?, j * d)?,
            t: meta.adam_pseudo_t,
        };

        let width = VariationalState::flat_len(meta.components, j);
        let local_flat = split_rows(&read("local.tpnc")?, meta.samples, width)?;
        let lm = split_rows(&read("adam_local_m.tpnc")?, meta.samples, width)?;
        let lv = split_rows(&read("adam_local_v.tpnc")?, meta.samples, width)?;
        if meta.adam_local_t.len() != meta.samples {
            return Err(NicaError::Format("Adam step counters do not match the sample count".into()));
        }
        let adam_local = lm.into_iter().zip(lv).zip(&meta.adam_local_t).map(|((m, v), &t)| Adam { m, v, t }).collect();
        let mut states = Vec::with_capacity(meta.samples);
        for flat in &local_flat {
            let mut s = VariationalState::new(meta.components, j, meta.nu, meta.factored);
            s.tau_posteriors = vec![TauPosterior { log_shape: 0.0, log_rate: 0.0 }; meta.components];
            s.set_flat(flat)?;
            states.push(s);
        }

        let tt = read("trace.tpnc")?;
        if tt.shape().len() != 2 || tt.shape()[1] != 7 {
            return Err(NicaError::Format("trace tensor must have 7 columns".into()));
        }
        let trace = tt
            .data()
            .chunks(7)
            .map(|r| TraceRow {
                step: r[0] as u64,
                epoch: r[1] as usize,
                elbo: r[2],
                data_term: r[3],
                kl_u: r[4],
                kl_tau: r[5],
                wallclock_s: r[6],
            })
            .collect();
        Ok(TrainState {
            model,
            model_flat,
            pseudo_locations,
            states,
            local_flat,
            adam_model,
            adam_pseudo,
            adam_local,
            step: meta.step,
            epoch: meta.epoch,
            trace,
            elapsed_s: meta.elapsed_s,
            clip_events: meta.clip_events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::generate_dataset;
    use crate::lattice::KernelSpec;
    use crate::processes::TpPrior;

    fn setup(nu: Dof, samples: usize) -> (Lattice, Vec<Mat>, TrainState) {
        let lattice = Lattice::grid(&[4, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = MixingNetwork::random_orthogonal(2, 3, 2, &mut rng).unwrap();
        let priors = [
            TpPrior { nu, kernel: KernelSpec::squared_exponential(1.0, 1.0).unwrap() },
            TpPrior { nu, kernel: KernelSpec::squared_exponential(2.0, 1.0).unwrap() },
        ];
        let ds = generate_dataset(&lattice, &priors, &truth, 0.1, samples, 3).unwrap();
        let data: Vec<Mat> = (0..samples).map(|k| ds.observation(k)).collect();
        let model = TpNicaModel {
            nu,
            kernels: priors.iter().map(|p| KernelParams::from_spec(&p.kernel)).collect(),
            decoder: MixingNetwork::random_orthogonal(2, 3, 2, &mut rng).unwrap(),
            log_noise: vec![-1.0; 3],
        };
        let z = lattice.regular_subgrid(2);
        let states = (0..samples).map(|_| VariationalState::new(2, 4, nu, false)).collect();
        (lattice.clone(), data, TrainState::new(model, z, states).unwrap())
    }

    #[test]
    fn adam_solves_quadratic() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(1);
        let mut x = [5.0];
        for _ in 0..5000 {
            let g = [-2.0 * (x[0] - 1.5)];
            adam.step(&mut x, &g, 1e-2 * (1.0 - adam.t as f64 / 5000.0), &cfg);
        }
        assert!((x[0] - 1.5).abs() < 1e-6, "{}", x[0]);
    }

    #[test]
    fn frozen_optimizer_leaves_parameters() {
        let (lat, data, mut st) = setup(Dof::Finite(4.0), 5);
        let before = st.clone();
        let cfg = TrainConfig { lr_model: 0.0, lr_variational: 0.0, epochs: 3, minibatch_size: 2, ..Default::default() };
        st.train(&lat, &data, &cfg, 1, |_| Ok(())).unwrap();
        assert_eq!(st.model, before.model);
        assert_eq!(st.pseudo_locations, before.pseudo_locations);
        assert_eq!(st.states, before.states);
        assert_eq!(st.trace.len(), 9);
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let cfg = TrainConfig { lr_model: 1e-2, epochs: 4, minibatch_size: 2, ..Default::default() };
        let (lat, data, init) = setup(Dof::Finite(4.0), 5);
        let mut a = init.clone();
        a.train(&lat, &data, &cfg, 1, |_| Ok(())).unwrap();
        let mut b = init.clone();
        b.train(&lat, &data, &cfg, 2, |_| Ok(())).unwrap();
        assert_eq!(a.model_flat, b.model_flat);
        let det = |s: &TrainState| s.trace.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>();
        assert_eq!(det(&a), det(&b));

        // Stop mid-epoch, save, load, continue.
        let dir = std::env::temp_dir().join(format!("tpnica-ckpt-{}", std::process::id()));
        let mut c = init.clone();
        let stop = TrainConfig { checkpoint_interval: 7, ..cfg.clone() };
        let err = c.train(&lat, &data, &stop, 1, |s| {
            s.save(&dir)?;
            Err(NicaError::InvalidParameter("stop".into()))
        });
        assert!(err.is_err());
        let mut resumed = TrainState::load(&dir).unwrap();
        assert_eq!(resumed.step, 7);
        assert_eq!(resumed, c);
        resumed.train(&lat, &data, &cfg, 1, |_| Ok(())).unwrap();
        assert_eq!(resumed.model_flat, a.model_flat);
        assert_eq!(resumed.local_flat, a.local_flat);
        assert_eq!(det(&resumed), det(&a));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let (_, _, st) = setup(Dof::Infinite, 2);
        let dir = std::env::temp_dir().join(format!("tpnica-ver-{}", std::process::id()));
        st.save(&dir).unwrap();
        let path = dir.join("checkpoint.json");
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(TrainState::load(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn elbo_improves_on_small_problem() {
        let (lat, data, mut st) = setup(Dof::Finite(4.0), 8);
        let cfg = TrainConfig { lr_model: 1e-2, epochs: 30, minibatch_size: 4, ..Default::default() };
        st.train(&lat, &data, &cfg, 1, |_| Ok(())).unwrap();
        let means = st.epoch_means();
        assert!(means[29] > means[0], "{} vs {}", means[29], means[0]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { minibatch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_model: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().steps_per_epoch(9), 2);
    }
}
