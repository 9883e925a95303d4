//! Multivariate-t and Gamma densities, inverse-CDF Gamma draws, and t-process
//! sampling through the Gamma-scaled Gaussian process construction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::autodiff::{cholesky_lower, Var};
use crate::error::{NicaError, Result};
use crate::lattice::{KernelSpec, Lattice, JITTER};
use crate::special::{reg_lower_gamma_da, std_gamma_pdf, std_gamma_quantile, trigamma};

/// Degrees of freedom; `Infinite` selects the Gaussian-process limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dof {
    Finite(f64),
    Infinite,
}

impl Dof {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Dof::Finite(nu) if !(nu > 0.0 && nu.is_finite()) => Err(NicaError::InvalidParameter(
                format!("degrees of freedom must be positive, got {nu}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Dof::Infinite)
    }

    /// Prior on the precision scale `τ ~ Gamma(ν/2, ν/2)`; `None` for the GP limit.
    pub fn tau_prior(&self) -> Option<GammaParams> {
        match *self {
            Dof::Finite(nu) => Some(GammaParams { shape: nu / 2.0, rate: nu / 2.0 }),
            Dof::Infinite => None,
        }
    }
}

/// Zero-mean t-process prior for one component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpPrior {
    pub nu: Dof,
    pub kernel: KernelSpec,
}

/// Gamma distribution in shape/rate form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = GammaParams { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite() {
            Ok(())
        } else {
            Err(NicaError::InvalidParameter(format!(
                "gamma parameters must be positive, got shape={} rate={}",
                self.shape, self.rate
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }
}

/// Log-density of `t_ν(μ, Σ)`; the Gaussian log-density when `ν` is infinite.
pub fn mvt_logpdf(x: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, nu: Dof) -> Result<f64> {
    nu.validate()?;
    let d = x.len();
    if mu.len() != d || sigma.shape() != (d, d) {
        return Err(NicaError::Dimension(format!(
            "x has length {d}, mu {}, sigma {:?}",
            mu.len(),
            sigma.shape()
        )));
    }
    let l = cholesky_lower(sigma).ok_or_else(|| NicaError::not_pd("mvt scale matrix", sigma))?;
    let mut r = x - mu;
    l.solve_lower_triangular_mut(&mut r);
    let maha = r.norm_squared();
    let half_logdet: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
    let d = d as f64;
    Ok(match nu {
        Dof::Infinite => -0.5 * d * (2.0 * std::f64::consts::PI).ln() - half_logdet - 0.5 * maha,
        Dof::Finite(nu) => {
            -0.5 * d * std::f64::consts::PI.ln() - half_logdet + 0.5 * nu * nu.ln()
                + ln_gamma(0.5 * (nu + d))
                - ln_gamma(0.5 * nu)
                - 0.5 * (nu + d) * (nu + maha).ln()
        }
    })
}

/// Inverse-CDF draw from `Gamma(α, β)` at uniform `u ∈ (0,1)`.
pub fn sample_gamma(params: &GammaParams, u: f64) -> Result<f64> {
    params.validate()?;
    Ok(std_gamma_quantile(params.shape, u)? / params.rate)
}

/// `(∂τ/∂α, ∂τ/∂β)` of `τ = F⁻¹(u; α, β)` at fixed `u`, by implicit differentiation.
pub fn gamma_quantile_grad(params: &GammaParams, tau: f64) -> (f64, f64) {
    let x = tau * params.rate;
    let dx_da = -reg_lower_gamma_da(params.shape, x) / std_gamma_pdf(params.shape, x);
    (dx_da / params.rate, -tau / params.rate)
}

/// Inverse-CDF Gamma draw on the tape; `alpha`, `beta` are 1x1.
pub fn gamma_quantile_var<'t>(alpha: Var<'t>, beta: Var<'t>, u: f64) -> Result<Var<'t>> {
    let p = GammaParams::new(alpha.scalar_value(), beta.scalar_value())?;
    let tau = sample_gamma(&p, u)?;
    let (da, db) = gamma_quantile_grad(&p, tau);
    if !(da.is_finite() && db.is_finite()) {
        return Err(NicaError::NonFinite(format!(
            "gamma quantile derivative at shape={} rate={} u={u}",
            p.shape, p.rate
        )));
    }
    Ok(Var::custom(&[alpha, beta], DMatrix::from_element(1, 1, tau), move |g| {
        vec![
            DMatrix::from_element(1, 1, g[(0, 0)] * da),
            DMatrix::from_element(1, 1, g[(0, 0)] * db),
        ]
    }))
}

fn gamma_natural(p: &GammaParams) -> [f64; 2] {
    [p.shape - 1.0, -p.rate]
}

fn gamma_log_normalizer(p: &GammaParams) -> f64 {
    ln_gamma(p.shape) - p.shape * p.rate.ln()
}

/// Mean parameters `E[ln τ], E[τ]` (gradient of the log-normalizer).
fn gamma_mean_params(p: &GammaParams) -> [f64; 2] {
    [digamma(p.shape) - p.rate.ln(), p.shape / p.rate]
}

/// `KL(q ‖ p)` between Gamma distributions via the exponential-family identity
/// `A(η_p) − A(η_q) − (η_p − η_q)ᵀ∇A(η_q)`.
pub fn gamma_kl(q: &GammaParams, p: &GammaParams) -> f64 {
    let (eq, ep) = (gamma_natural(q), gamma_natural(p));
    let mq = gamma_mean_params(q);
    let kl = gamma_log_normalizer(p)
        - gamma_log_normalizer(q)
        - ((ep[0] - eq[0]) * mq[0] + (ep[1] - eq[1]) * mq[1]);
    kl.max(0.0)
}

/// `KL(q ‖ p)` on the tape, differentiable in the shape and rate of `q`.
pub fn gamma_kl_var<'t>(alpha: Var<'t>, beta: Var<'t>, p: &GammaParams) -> Var<'t> {
    let q = GammaParams { shape: alpha.scalar_value(), rate: beta.scalar_value() };
    let kl = gamma_kl(&q, p);
    let da = (q.shape - p.shape) * trigamma(q.shape) + p.rate / q.rate - 1.0;
    let db = p.shape / q.rate - q.shape * p.rate / (q.rate * q.rate);
    Var::custom(&[alpha, beta], DMatrix::from_element(1, 1, kl), move |g| {
        vec![
            DMatrix::from_element(1, 1, g[(0, 0)] * da),
            DMatrix::from_element(1, 1, g[(0, 0)] * db),
        ]
    })
}

/// One draw of N independent components over a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct TpSample {
    /// `N × m`
    pub components: DMatrix<f64>,
    pub taus: Vec<f64>,
}

/// Reusable sampler holding one Cholesky factor per component.
///
/// Precision scales and Gaussian bases come from separate streams so that a
/// GP-limit sampler and a finite-ν sampler seeded alike share the Gaussian bases.
pub struct TpSampler {
    priors: Vec<TpPrior>,
    factors: Vec<DMatrix<f64>>,
    tau_rng: ChaCha8Rng,
    base_rng: ChaCha8Rng,
}

impl TpSampler {
    pub fn new(lattice: &Lattice, priors: &[TpPrior], seed: u64) -> Result<Self> {
        let mut factors = Vec::with_capacity(priors.len());
        for (i, prior) in priors.iter().enumerate() {
            prior.nu.validate()?;
            prior.kernel.validate()?;
            let mut k = prior.kernel.matrix(lattice.coords(), lattice.coords());
            for a in 0..lattice.len() {
                k[(a, a)] += JITTER * prior.kernel.variance;
            }
            let l = cholesky_lower(&k)
                .ok_or_else(|| NicaError::not_pd(format!("prior kernel of component {i}"), &k))?;
            factors.push(l);
        }
        let mut tau_rng = ChaCha8Rng::seed_from_u64(seed);
        tau_rng.set_stream(1);
        let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
        base_rng.set_stream(2);
        Ok(TpSampler { priors: priors.to_vec(), factors, tau_rng, base_rng })
    }

    pub fn draw(&mut self) -> Result<TpSample> {
        let n = self.priors.len();
        let m = self.factors.first().map_or(0, |f| f.nrows());
        let mut components = DMatrix::zeros(n, m);
        let mut taus = Vec::with_capacity(n);
        for i in 0..n {
            let tau = match self.priors[i].nu.tau_prior() {
                Some(g) => {
                    let u: f64 = self.tau_rng.sample(Open01);
                    sample_gamma(&g, u)?
                }
                None => 1.0,
            };
            let z = DVector::from_fn(m, |_, _| self.base_rng.sample::<f64, _>(StandardNormal));
            let s = &self.factors[i] * z / tau.sqrt();
            components.row_mut(i).copy_from(&s.transpose());
            taus.push(tau);
        }
        Ok(TpSample { components, taus })
    }
}

/// Draws τ⁽ⁱ⁾ ~ Gamma(ν/2, ν/2) and s⁽ⁱ⁾ ~ N(0, K⁽ⁱ⁾/τ⁽ⁱ⁾) for each component.
pub fn sample_tp_components(lattice: &Lattice, priors: &[TpPrior], seed: u64) -> Result<TpSample> {
    TpSampler::new(lattice, priors, seed)?.draw()
}
