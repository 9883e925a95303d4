//! Pointwise mixing networks, the Gaussian observation likelihood and
//! synthetic dataset generation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NicaError, Result};
use crate::lattice::Lattice;
use crate::processes::{TpPrior, TpSampler};
use crate::tensor::Tensor;

/// Slope of the leaky-tanh activation `a·x + (1−a)·tanh(x)`.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Multilayer perceptron `R^N → R^M`, applied independently at every location.
///
/// The activation sits between layers, never after the last one, so a single
/// layer is a linear (affine) map.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingNetwork {
    pub layers: Vec<Layer>,
    pub slope: f64,
}

pub fn leaky_tanh(x: f64, slope: f64) -> f64 {
    slope * x + (1.0 - slope) * x.tanh()
}

/// Random matrix with orthonormal columns (or rows, when wide).
fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // Sign fix makes the draw Haar-distributed.
    let rdiag = qr.r().diagonal();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if tall {
        q
    } else {
        q.transpose()
    }
}

impl MixingNetwork {
    pub fn new(layers: Vec<Layer>, slope: f64) -> Result<Self> {
        let net = MixingNetwork { layers, slope };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NicaError::InvalidParameter("mixing network needs a layer".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(NicaError::Dimension(format!("layer {k}: bias/weight mismatch")));
            }
            if k > 0 && self.layers[k - 1].weight.nrows() != l.weight.ncols() {
                return Err(NicaError::Dimension(format!("layer {k}: input width mismatch")));
            }
        }
        if self.output_dim() < self.input_dim() {
            return Err(NicaError::InvalidParameter(format!(
                "output dimension {} smaller than input dimension {}",
                self.output_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Layers with orthonormal columns: first `N → M`, then `M → M`.
    /// Biases are small Gaussian offsets.
    pub fn random_orthogonal(
        n: usize,
        m: usize,
        layer_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if m < n {
            return Err(NicaError::InvalidParameter(format!("need M ≥ N, got M={m} N={n}")));
        }
        if layer_count == 0 {
            return Err(NicaError::InvalidParameter("layer count must be ≥ 1".into()));
        }
        let layers = (0..layer_count)
            .map(|k| {
                let input = if k == 0 { n } else { m };
                Layer {
                    weight: orthogonal(m, input, rng),
                    bias: DVector::from_fn(m, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
                }
            })
            .collect();
        MixingNetwork::new(layers, LEAKY_SLOPE)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn mix(&self, s: &DVector<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut h = s.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = &layer.weight * h + &layer.bias;
            if k < last {
                h.apply(|v| *v = leaky_tanh(*v, self.slope));
            }
        }
        h
    }

    /// Mixes every column of `s` (`N × m`) into an `M × m` matrix.
    pub fn mix_columns(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut h = s.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = &layer.weight * h;
            for mut col in h.column_iter_mut() {
                col += &layer.bias;
            }
            if k < last {
                h.apply(|v| *v = leaky_tanh(*v, self.slope));
            }
        }
        h
    }
}

/// Independent Gaussian noise per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoise {
    pub variances: Vec<f64>,
}

impl ObservationNoise {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(NicaError::InvalidParameter("noise variances must be positive".into()));
        }
        Ok(ObservationNoise { variances })
    }
}

/// `log p(x | s) = Σ_c log N(x_c; f(s)_c, σ²_c)`.
pub fn observation_loglik(
    net: &MixingNetwork,
    noise: &ObservationNoise,
    x: &DVector<f64>,
    s: &DVector<f64>,
) -> f64 {
    let mean = net.mix(s);
    x.iter()
        .zip(mean.iter())
        .zip(&noise.variances)
        .map(|((xc, fc), v)| {
            let r = xc - fc;
            -0.5 * (2.0 * std::f64::consts::PI * v).ln() - r * r / (2.0 * v)
        })
        .sum()
}

/// Synthetic observations with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(samples, M, m)`
    pub observations: Tensor,
    /// `(samples, N, m)`
    pub components: Tensor,
    /// `(samples, N)`
    pub taus: Tensor,
    pub noise_variances: Vec<f64>,
}

impl Dataset {
    pub fn sample_count(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn observed_dim(&self) -> usize {
        self.observations.shape()[1]
    }

    pub fn location_count(&self) -> usize {
        self.observations.shape()[2]
    }

    pub fn component_count(&self) -> usize {
        self.components.shape()[1]
    }

    /// Observation `k` as an `M × m` matrix.
    pub fn observation(&self, k: usize) -> DMatrix<f64> {
        self.observations.matrix(k)
    }
}

/// Draws `sample_count` independent component fields, mixes them pointwise
/// and adds Gaussian noise whose per-channel variance is `noise_fraction`
/// times the empirical variance of the noise-free mixed channel.
///
/// Streams: components use `TpSampler(seed)`, noise uses stream 3 of `seed`.
pub fn generate_dataset(
    lattice: &Lattice,
    priors: &[TpPrior],
    net: &MixingNetwork,
    noise_fraction: f64,
    sample_count: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_fraction > 0.0 && noise_fraction < 1.0) {
        return Err(NicaError::InvalidParameter(format!(
            "noise fraction must lie in (0,1), got {noise_fraction}"
        )));
    }
    net.validate()?;
    if net.input_dim() != priors.len() {
        return Err(NicaError::Dimension(format!(
            "network input {} vs {} components",
            net.input_dim(),
            priors.len()
        )));
    }
    let (n, mdim, m) = (priors.len(), net.output_dim(), lattice.len());
    let mut sampler = TpSampler::new(lattice, priors, seed)?;
    let mut components = Tensor::zeros(vec![sample_count, n, m]);
    let mut observations = Tensor::zeros(vec![sample_count, mdim, m]);
    let mut taus = Tensor::zeros(vec![sample_count, n]);
    for k in 0..sample_count {
        let draw = sampler.draw()?;
        observations.set_matrix(k, &net.mix_columns(&draw.components));
        components.set_matrix(k, &draw.components);
        taus.data_mut()[k * n..(k + 1) * n].copy_from_slice(&draw.taus);
    }

    let per_channel = sample_count * m;
    let mut noise_variances = vec![0.0; mdim];
    for (c, nv) in noise_variances.iter_mut().enumerate() {
        let vals = (0..sample_count).flat_map(|k| {
            let start = (k * mdim + c) * m;
            observations.data()[start..start + m].iter().copied()
        });
        let (mut mean, mut m2, mut cnt) = (0.0, 0.0, 0.0);
        for v in vals {
            cnt += 1.0;
            let d = v - mean;
            mean += d / cnt;
            m2 += d * (v - mean);
        }
        let var = if per_channel > 1 { m2 / (cnt - 1.0) } else { 1.0 };
        *nv = noise_fraction * var.max(f64::MIN_POSITIVE);
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(3);
    let data = observations.data_mut();
    for k in 0..sample_count {
        for (c, nv) in noise_variances.iter().enumerate() {
            let sd = nv.sqrt();
            let start = (k * mdim + c) * m;
            for v in &mut data[start..start + m] {
                *v += sd * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(Dataset { observations, components, taus, noise_variances })
}
