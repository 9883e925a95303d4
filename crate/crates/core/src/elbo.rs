//! Stochastic evidence lower bound and its reparameterized gradient.
//!
//! Kernel factors (`L_i`, `A_i = L_i⁻¹K_us,i`, conditional variances) depend
//! only on kernel hyperparameters and pseudo-locations, so they are computed
//! once per minibatch on their own tape. Every sample then runs on a private
//! tape that treats those factors as leaves; the per-sample adjoints are summed
//! in sample order and pushed back through the kernel tape.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{NicaError, Result};
use crate::lattice::{se_kernel_var, KernelSpec, Lattice, JITTER};
use crate::mixing::MixingNetwork;
use crate::posterior::{conditional_vars, marginal_vars, precision_entries, sample_marginal, VariationalState};
use crate::processes::{gamma_kl_var, gamma_quantile_var, Dof};

type Mat = DMatrix<f64>;

/// Squared-exponential hyperparameters on the log scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_variance: f64,
}

impl KernelParams {
    pub fn from_spec(spec: &KernelSpec) -> Self {
        KernelParams { log_lengthscale: spec.lengthscale.ln(), log_variance: spec.variance.ln() }
    }

    pub fn spec(&self) -> Result<KernelSpec> {
        KernelSpec::squared_exponential(self.log_lengthscale.exp(), self.log_variance.exp())
    }
}

/// Generative parameters θ: kernels, decoder and observation noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TpNicaModel {
    /// Degrees of freedom, shared by all components and not learned.
    pub nu: Dof,
    pub kernels: Vec<KernelParams>,
    pub decoder: MixingNetwork,
    /// Log noise variance per observed channel.
    pub log_noise: Vec<f64>,
}

/// Named contiguous range of a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub range: Range<usize>,
}

impl TpNicaModel {
    pub fn component_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn observed_dim(&self) -> usize {
        self.log_noise.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.nu.validate()?;
        self.decoder.validate()?;
        if self.decoder.input_dim() != self.component_count() {
            return Err(NicaError::Dimension(format!(
                "decoder takes {} inputs, model has {} components",
                self.decoder.input_dim(),
                self.component_count()
            )));
        }
        if self.decoder.output_dim() != self.observed_dim() {
            return Err(NicaError::Dimension(format!(
                "decoder emits {} channels, noise has {}",
                self.decoder.output_dim(),
                self.observed_dim()
            )));
        }
        Ok(())
    }

    /// Flat layout: per layer weight (row-major) then bias; log noise;
    /// log lengthscales; log variances.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        let mut at = 0;
        let mut push = |name: String, len: usize| {
            out.push(ParamBlock { name, range: at..at + len });
            at += len;
        };
        for (k, l) in self.decoder.layers.iter().enumerate() {
            push(format!("decoder.{k}.weight"), l.weight.len());
            push(format!("decoder.{k}.bias"), l.bias.len());
        }
        push("noise.log_variance".into(), self.observed_dim());
        push("kernel.log_lengthscale".into(), self.component_count());
        push("kernel.log_variance".into(), self.component_count());
        out
    }

    pub fn flat_len(&self) -> usize {
        self.blocks().last().map_or(0, |b| b.range.end)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for l in &self.decoder.layers {
            for r in 0..l.weight.nrows() {
                out.extend(l.weight.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out.extend(&self.log_noise);
        out.extend(self.kernels.iter().map(|k| k.log_lengthscale));
        out.extend(self.kernels.iter().map(|k| k.log_variance));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(NicaError::Dimension(format!(
                "flat model vector has {} entries, expected {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.decoder.layers {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    l.weight[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        for v in &mut self.log_noise {
            *v = it.next().expect("length checked");
        }
        for k in &mut self.kernels {
            k.log_lengthscale = it.next().expect("length checked");
        }
        for k in &mut self.kernels {
            k.log_variance = it.next().expect("length checked");
        }
        Ok(())
    }
}

/// Monte Carlo draw counts: `n_tau` precision draws, `n_samples` latent draws per precision draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElboOptions {
    pub n_tau: usize,
    pub n_samples: usize,
}

impl ElboOptions {
    pub const TRAINING: ElboOptions = ElboOptions { n_tau: 1, n_samples: 1 };
    pub const EVALUATION: ElboOptions = ElboOptions { n_tau: 4, n_samples: 8 };
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self::TRAINING
    }
}

/// Common random numbers for one ELBO evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseRandomness {
    /// `n_tau × N` uniforms in (0, 1).
    pub tau_uniforms: Mat,
    /// `n_tau·n_samples` matrices of shape `m × N`, indexed `t·n_samples + s`.
    pub normals: Vec<Mat>,
}

impl BaseRandomness {
    pub fn from_rng(rng: &mut impl Rng, n: usize, m: usize, opts: ElboOptions) -> Self {
        let tau_uniforms = Mat::from_fn(opts.n_tau, n, |_, _| rng.sample(Open01));
        let normals = (0..opts.n_tau * opts.n_samples)
            .map(|_| Mat::from_fn(m, n, |_, _| rng.sample(StandardNormal)))
            .collect();
        BaseRandomness { tau_uniforms, normals }
    }

    /// Deterministic draw keyed by `(seed, step, index)`.
    pub fn keyed(seed: u64, step: u64, index: u64, n: usize, m: usize, opts: ElboOptions) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&step.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        key[24..].copy_from_slice(b"elbo-crn");
        Self::from_rng(&mut ChaCha8Rng::from_seed(key), n, m, opts)
    }

    fn options(&self) -> ElboOptions {
        let n_tau = self.tau_uniforms.nrows();
        ElboOptions { n_tau, n_samples: if n_tau == 0 { 0 } else { self.normals.len() / n_tau } }
    }
}

/// One ELBO evaluation with its breakdown.
///
/// `value = data_term − kl_u − kl_tau`, where `data_term` and `kl_u` are
/// averaged over the precision draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub data_term: f64,
    pub kl_u: f64,
    pub kl_tau: f64,
    pub n_tau: usize,
    pub n_samples: usize,
    /// Latent draws `Ŝ`, each `N × m`, in draw order.
    pub component_samples: Vec<Mat>,
}

/// Gradient of an ELBO (or of the minibatch mean) in the flat layouts of
/// [`TpNicaModel::to_flat`] and [`VariationalState::to_flat`].
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGradient {
    pub model: Vec<f64>,
    /// `J × d`, same layout as the pseudo-locations.
    pub pseudo_locations: Mat,
    /// One flat vector per sample.
    pub local: Vec<Vec<f64>>,
}

struct KernelFactors {
    l: Vec<Mat>,
    a: Vec<Mat>,
    r: Vec<Mat>,
}

struct KernelVars<'t> {
    z: Var<'t>,
    log_ls: Vec<Var<'t>>,
    log_var: Vec<Var<'t>>,
    l: Vec<Var<'t>>,
    a: Vec<Var<'t>>,
    r: Vec<Var<'t>>,
}

fn kernel_vars<'t>(tape: &'t Tape, lattice: &Lattice, z: &Mat, model: &TpNicaModel) -> Result<KernelVars<'t>> {
    if z.ncols() != lattice.dim() {
        return Err(NicaError::Dimension(format!(
            "pseudo-locations have dimension {}, lattice {}",
            z.ncols(),
            lattice.dim()
        )));
    }
    let m = lattice.len();
    let zv = tape.leaf(z.clone());
    let xv = tape.leaf(lattice.coords().clone());
    let ones = tape.column(&vec![1.0; m]);
    let mut kv = KernelVars { z: zv, log_ls: vec![], log_var: vec![], l: vec![], a: vec![], r: vec![] };
    for (i, k) in model.kernels.iter().enumerate() {
        let ls = tape.scalar(k.log_lengthscale);
        let lv = tape.scalar(k.log_variance);
        let var = lv.exp();
        let kuu = se_kernel_var(zv, zv, ls, lv).add_scaled_identity(var.scale(JITTER));
        let l = kuu
            .cholesky()
            .ok_or_else(|| NicaError::not_pd(format!("K_uu of component {i}"), &kuu.value()))?;
        let a = l.solve_lower(se_kernel_var(zv, xv, ls, lv));
        let r = ones.mul_scalar(var.scale(1.0 + JITTER)).sub(a.col_dots(a));
        kv.log_ls.push(ls);
        kv.log_var.push(lv);
        kv.l.push(l);
        kv.a.push(a);
        kv.r.push(r);
    }
    Ok(kv)
}

impl KernelVars<'_> {
    fn values(&self) -> KernelFactors {
        let grab = |v: &[Var]| v.iter().map(|x| (*x.value()).clone()).collect();
        KernelFactors { l: grab(&self.l), a: grab(&self.a), r: grab(&self.r) }
    }
}

/// Adjoints a single sample sends back to shared parameters.
struct SampleGrads {
    l: Vec<Mat>,
    a: Vec<Mat>,
    r: Vec<Mat>,
    decoder: Vec<f64>,
    local: Vec<f64>,
}

struct SamplePass {
    estimate: ElboEstimate,
    grads: Option<SampleGrads>,
}

fn decode<'t>(s: Var<'t>, layers: &[(Var<'t>, Var<'t>)], slope: f64) -> Var<'t> {
    let mut h = s;
    for (k, (w, b)) in layers.iter().enumerate() {
        h = h.matmul(w.transpose()).add_row(*b);
        if k + 1 < layers.len() {
            h = h.leaky_tanh(slope);
        }
    }
    h
}

fn check_sample(model: &TpNicaModel, state: &VariationalState, x: &Mat, kf: &KernelFactors, base: &BaseRandomness) -> Result<()> {
    state.validate()?;
    let n = model.component_count();
    let m = kf.a.first().map_or(0, |a| a.ncols());
    if state.component_count() != n || state.pseudo_count() != kf.l[0].nrows() {
        return Err(NicaError::Dimension(format!(
            "variational state has N={} J={}, model N={n} J={}",
            state.component_count(),
            state.pseudo_count(),
            kf.l[0].nrows()
        )));
    }
    if x.shape() != (model.observed_dim(), m) {
        return Err(NicaError::Dimension(format!(
            "observation is {:?}, expected ({}, {m})",
            x.shape(),
            model.observed_dim()
        )));
    }
    let opts = base.options();
    if opts.n_tau == 0 || opts.n_samples == 0 || base.tau_uniforms.ncols() != n {
        return Err(NicaError::Dimension("base randomness is empty or has the wrong width".into()));
    }
    if base.normals.len() != opts.n_tau * opts.n_samples || base.normals.iter().any(|e| e.shape() != (m, n)) {
        return Err(NicaError::Dimension("base normals have the wrong shape".into()));
    }
    Ok(())
}

fn sample_pass(
    model: &TpNicaModel,
    kf: &KernelFactors,
    state: &VariationalState,
    x: &Mat,
    base: &BaseRandomness,
    record: bool,
) -> Result<SamplePass> {
    check_sample(model, state, x, kf, base)?;
    let tape = if record { Tape::new() } else { Tape::forward_only() };
    let n = model.component_count();
    let m = x.ncols();
    let opts = base.options();

    let lv: Vec<Var> = kf.l.iter().map(|v| tape.leaf(v.clone())).collect();
    let av: Vec<Var> = kf.a.iter().map(|v| tape.leaf(v.clone())).collect();
    let rv: Vec<Var> = kf.r.iter().map(|v| tape.leaf(v.clone())).collect();
    let layers: Vec<(Var, Var)> = model
        .decoder
        .layers
        .iter()
        .map(|l| (tape.leaf(l.weight.clone()), tape.row(l.bias.as_slice())))
        .collect();
    let log_noise = tape.row(&model.log_noise);
    let raw = tape.leaf(state.raw_factor_matrix());
    let mt = tape.leaf(state.linear_matrix());
    let log_shape: Vec<Var> = state.tau_posteriors.iter().map(|t| tape.scalar(t.log_shape)).collect();
    let log_rate: Vec<Var> = state.tau_posteriors.iter().map(|t| tape.scalar(t.log_rate)).collect();
    let xt = tape.leaf(x.transpose());

    let lambda = precision_entries(raw, n, state.factored);
    let prior = model.nu.tau_prior();
    let shapes: Vec<Var> = log_shape.iter().map(|v| v.exp()).collect();
    let rates: Vec<Var> = log_rate.iter().map(|v| v.exp()).collect();
    let kl_tau = match &prior {
        Some(p) => {
            let mut acc = tape.scalar(0.0);
            for i in 0..n {
                acc = acc.add(gamma_kl_var(shapes[i], rates[i], p));
            }
            acc
        }
        None => tape.scalar(0.0),
    };

    // Constant part of the Gaussian log-likelihood for every draw.
    let log_norm = log_noise
        .sum()
        .add_const(model.observed_dim() as f64 * (2.0 * std::f64::consts::PI).ln())
        .scale(-0.5 * m as f64);
    let inv_noise = log_noise.neg().exp();

    let mut data_sum = tape.scalar(0.0);
    let mut kl_sum = tape.scalar(0.0);
    let mut draws = Vec::with_capacity(opts.n_tau * opts.n_samples);
    for t in 0..opts.n_tau {
        let mut tau_values = vec![1.0; n];
        let (l_t, a_t, r_t) = if prior.is_some() {
            let mut taus = Vec::with_capacity(n);
            for i in 0..n {
                let tau = gamma_quantile_var(shapes[i], rates[i], base.tau_uniforms[(t, i)])?;
                tau_values[i] = tau.scalar_value();
                taus.push(tau);
            }
            let inv_sqrt: Vec<Var> = taus.iter().map(|tau| tau.powf(-0.5)).collect();
            let inv: Vec<Var> = taus.iter().map(|tau| tau.recip()).collect();
            (
                (0..n).map(|i| lv[i].mul_scalar(inv_sqrt[i])).collect::<Vec<_>>(),
                (0..n).map(|i| av[i].mul_scalar(inv_sqrt[i])).collect::<Vec<_>>(),
                (0..n).map(|i| rv[i].mul_scalar(inv[i])).collect::<Vec<_>>(),
            )
        } else {
            (lv.clone(), av.clone(), rv.clone())
        };
        let cond = conditional_vars(&l_t, lambda, mt, state.factored).inspect_err(|_| {
            log::error!("posterior factorization failed at tau draw {t}: {tau_values:?}");
        })?;
        let (mu, d, p) = marginal_vars(&a_t, &r_t, &cond);
        kl_sum = kl_sum.add(cond.kl_u);
        let mut draw_sum = tape.scalar(0.0);
        for s in 0..opts.n_samples {
            let s_hat = sample_marginal(mu, d, p, &base.normals[t * opts.n_samples + s])?;
            let resid = xt.sub(decode(s_hat, &layers, model.decoder.slope));
            let ll = resid.square().scale_cols(inv_noise).sum().scale(-0.5).add(log_norm);
            draw_sum = draw_sum.add(ll);
            draws.push(s_hat.value().transpose());
        }
        data_sum = data_sum.add(draw_sum.scale(1.0 / opts.n_samples as f64));
    }
    let inv_t = 1.0 / opts.n_tau as f64;
    let data_term = data_sum.scale(inv_t);
    let kl_u = kl_sum.scale(inv_t);
    let elbo = data_term.sub(kl_u).sub(kl_tau);
    let estimate = ElboEstimate {
        value: elbo.scalar_value(),
        data_term: data_term.scalar_value(),
        kl_u: kl_u.scalar_value(),
        kl_tau: kl_tau.scalar_value(),
        n_tau: opts.n_tau,
        n_samples: opts.n_samples,
        component_samples: draws,
    };
    if !estimate.value.is_finite() {
        return Err(NicaError::NonFinite(format!(
            "ELBO (data {}, kl_u {}, kl_tau {})",
            estimate.data_term, estimate.kl_u, estimate.kl_tau
        )));
    }
    if !record {
        return Ok(SamplePass { estimate, grads: None });
    }

    let g = tape.backward(elbo);
    let mut decoder = Vec::new();
    for (w, b) in &layers {
        let gw = g.wrt(*w);
        for r in 0..gw.nrows() {
            decoder.extend(gw.row(r).iter());
        }
        decoder.extend(g.wrt(*b).iter());
    }
    decoder.extend(g.wrt(log_noise).iter());

    let g_raw = g.wrt(raw);
    let g_m = g.wrt(mt);
    let mut local = Vec::with_capacity(VariationalState::flat_len(n, state.pseudo_count()));
    for j in 0..g_raw.nrows() {
        local.extend(g_raw.row(j).iter());
    }
    for j in 0..g_m.nrows() {
        local.extend(g_m.row(j).iter());
    }
    for i in 0..n {
        local.push(g.wrt(log_shape[i])[(0, 0)]);
        local.push(g.wrt(log_rate[i])[(0, 0)]);
    }
    let grads = SampleGrads {
        l: lv.iter().map(|v| g.wrt(*v)).collect(),
        a: av.iter().map(|v| g.wrt(*v)).collect(),
        r: rv.iter().map(|v| g.wrt(*v)).collect(),
        decoder,
        local,
    };
    Ok(SamplePass { estimate, grads: Some(grads) })
}

/// Runs `f` over `0..count`, fanning out over at most `threads` workers.
/// Results come back in index order.
fn fan_out<T: Send>(count: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let f = &f;
                scope.spawn(move || (w * chunk..((w + 1) * chunk).min(count)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("ELBO worker panicked"))
            .collect()
    })
}

/// One sample of a minibatch.
pub struct SampleInput<'a> {
    pub state: &'a VariationalState,
    /// `M × m`
    pub x: &'a Mat,
    pub base: &'a BaseRandomness,
}

/// Minibatch objective (mean of per-sample ELBOs) and its gradient.
pub struct MinibatchResult {
    pub objective: f64,
    pub estimates: Vec<ElboEstimate>,
    pub gradient: ElboGradient,
}

fn ensure_finite(name: &str, values: &[f64]) -> Result<()> {
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(NicaError::NonFinite(format!("gradient block {name} (entry {k})")));
    }
    Ok(())
}

/// Mean ELBO over the given samples and its exact gradient under the fixed
/// base randomness. Per-sample work runs on up to `threads` workers; the
/// reduction order is fixed, so results do not depend on `threads`.
pub fn minibatch_gradient(
    model: &TpNicaModel,
    lattice: &Lattice,
    pseudo_locations: &Mat,
    batch: &[SampleInput],
    threads: usize,
) -> Result<MinibatchResult> {
    model.validate()?;
    if batch.is_empty() {
        return Err(NicaError::InvalidParameter("empty minibatch".into()));
    }
    let tape = Tape::new();
    let kv = kernel_vars(&tape, lattice, pseudo_locations, model)?;
    let kf = kv.values();
    let passes = fan_out(batch.len(), threads, |k| {
        let s = &batch[k];
        sample_pass(model, &kf, s.state, s.x, s.base, true)
    });
    let passes: Vec<SamplePass> = passes.into_iter().collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let n = model.component_count();
    let decoder_len = model.flat_len() - 2 * n;
    let mut model_grad = vec![0.0; model.flat_len()];
    let mut seeds_l: Vec<Mat> = kf.l.iter().map(|m| Mat::zeros(m.nrows(), m.ncols())).collect();
    let mut seeds_a: Vec<Mat> = kf.a.iter().map(|m| Mat::zeros(m.nrows(), m.ncols())).collect();
    let mut seeds_r: Vec<Mat> = kf.r.iter().map(|m| Mat::zeros(m.nrows(), m.ncols())).collect();
    let mut local = Vec::with_capacity(passes.len());
    let mut estimates = Vec::with_capacity(passes.len());
    let mut objective = 0.0;
    for pass in passes {
        let g = pass.grads.expect("recording pass");
        for (acc, v) in model_grad[..decoder_len].iter_mut().zip(&g.decoder) {
            *acc += scale * v;
        }
        for i in 0..n {
            seeds_l[i] += &g.l[i] * scale;
            seeds_a[i] += &g.a[i] * scale;
            seeds_r[i] += &g.r[i] * scale;
        }
        local.push(g.local.iter().map(|v| v * scale).collect::<Vec<f64>>());
        objective += scale * pass.estimate.value;
        estimates.push(pass.estimate);
    }

    let mut seeds = Vec::with_capacity(3 * n);
    for i in 0..n {
        seeds.push((kv.l[i], seeds_l[i].clone()));
        seeds.push((kv.a[i], seeds_a[i].clone()));
        seeds.push((kv.r[i], seeds_r[i].clone()));
    }
    let kg = tape.backward_from(&seeds);
    for i in 0..n {
        model_grad[decoder_len + i] = kg.wrt(kv.log_ls[i])[(0, 0)];
        model_grad[decoder_len + n + i] = kg.wrt(kv.log_var[i])[(0, 0)];
    }
    let z_grad = kg.wrt(kv.z);

    for b in model.blocks() {
        ensure_finite(&b.name, &model_grad[b.range.clone()])?;
    }
    ensure_finite("pseudo_locations", z_grad.as_slice())?;
    for (k, l) in local.iter().enumerate() {
        ensure_finite(&format!("variational[{k}]"), l)?;
    }
    Ok(MinibatchResult {
        objective,
        estimates,
        gradient: ElboGradient { model: model_grad, pseudo_locations: z_grad, local },
    })
}

/// ELBO of one sample under fixed base randomness.
pub fn elbo(
    model: &TpNicaModel,
    lattice: &Lattice,
    pseudo_locations: &Mat,
    state: &VariationalState,
    x: &Mat,
    base: &BaseRandomness,
) -> Result<ElboEstimate> {
    model.validate()?;
    let tape = Tape::forward_only();
    let kf = kernel_vars(&tape, lattice, pseudo_locations, model)?.values();
    Ok(sample_pass(model, &kf, state, x, base, false)?.estimate)
}

/// ELBO of one sample and its gradient with respect to every parameter.
pub fn elbo_gradient(
    model: &TpNicaModel,
    lattice: &Lattice,
    pseudo_locations: &Mat,
    state: &VariationalState,
    x: &Mat,
    base: &BaseRandomness,
) -> Result<(ElboEstimate, ElboGradient)> {
    let mut res = minibatch_gradient(model, lattice, pseudo_locations, &[SampleInput { state, x, base }], 1)?;
    Ok((res.estimates.remove(0), res.gradient))
}

/// Mean ELBO over samples without gradients.
pub fn minibatch_elbo(
    model: &TpNicaModel,
    lattice: &Lattice,
    pseudo_locations: &Mat,
    batch: &[SampleInput],
    threads: usize,
) -> Result<Vec<ElboEstimate>> {
    model.validate()?;
    let tape = Tape::forward_only();
    let kf = kernel_vars(&tape, lattice, pseudo_locations, model)?.values();
    fan_out(batch.len(), threads, |k| {
        let s = &batch[k];
        sample_pass(model, &kf, s.state, s.x, s.base, false).map(|p| p.estimate)
    })
    .into_iter()
    .collect()
}

/// Posterior mean components `μ̃` (`N × m`) for each state, evaluated at the
/// posterior mean precision `E_q[τ] = α/β` (or `τ = 1` in the Gaussian limit).
pub fn posterior_means(
    model: &TpNicaModel,
    lattice: &Lattice,
    pseudo_locations: &Mat,
    states: &[&VariationalState],
    threads: usize,
) -> Result<Vec<Mat>> {
    model.validate()?;
    let tape = Tape::forward_only();
    let kf = kernel_vars(&tape, lattice, pseudo_locations, model)?.values();
    let n = model.component_count();
    fan_out(states.len(), threads, |k| {
        let state = states[k];
        state.validate()?;
        let tape = Tape::forward_only();
        let mut l = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for i in 0..n {
            let tau = if model.nu.is_infinite() { 1.0 } else { state.tau_posteriors[i].params().mean() };
            l.push(tape.leaf(&kf.l[i] / tau.sqrt()));
            a.push(tape.leaf(&kf.a[i] / tau.sqrt()));
            r.push(tape.leaf(&kf.r[i] / tau));
        }
        let lambda = precision_entries(tape.leaf(state.raw_factor_matrix()), n, state.factored);
        let cond = conditional_vars(&l, lambda, tape.leaf(state.linear_matrix()), state.factored)?;
        let (mu, _, _) = marginal_vars(&a, &r, &cond);
        Ok(mu.value().transpose())
    })
    .into_iter()
    .collect()
}
