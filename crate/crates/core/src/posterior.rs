//! Structured approximate posterior over pseudo-latents and precision scales.
//!
//! For each pseudo-location `j` a Gaussian factor
//! `ψ(u_j) = exp(−½ u_jᵀΛ_j u_j + u_jᵀm̃_j)` with `Λ_j = W̃_jᵀW̃_j` multiplies the
//! prior `N(u; 0, K_uu)`. The posterior system is solved in the whitened form
//! `B = I + LᵀΛL` where `K_uu = LLᵀ` per component, so no matrix is ever
//! inverted explicitly:
//!
//! * `log|ΛK_uu + I| = log|B|`
//! * `mᵀ(K_uu⁻¹ + Λ)⁻¹m = ‖L_B⁻¹Lᵀm‖²`
//! * `KL(q(u)‖p(u)) = ½(Tr B⁻¹ + ‖w‖² + log|B| − NJ)` with `w = B⁻¹Lᵀm`.
//!
//! Internally everything is component-major (`i·J + j`); the public
//! dense accessors return location-major matrices like [`BlockCovariance`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    block_diag, block_grid, cholesky_adjoint, cholesky_lower, hcat, softplus_f64, softplus_inverse,
    solve_lower, sigmoid_f64, Tape, Var,
};
use crate::error::{NicaError, Result};
use crate::lattice::BlockCovariance;
use crate::processes::{Dof, GammaParams};

type Mat = DMatrix<f64>;

/// Initial scale of the factor Cholesky diagonals.
pub const INIT_FACTOR_SCALE: f64 = 0.1;

/// Conjugate Gaussian factor at one pseudo-location.
///
/// `w_raw` holds the lower triangle of `W̃_j` with the diagonal stored
/// before a softplus; entries above the diagonal are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFactor {
    pub w_raw: DMatrix<f64>,
    pub m: DVector<f64>,
}

impl PseudoFactor {
    /// Factor with `W̃ = scale·I` and zero linear term.
    pub fn isotropic(n: usize, scale: f64) -> Self {
        let mut w_raw = DMatrix::zeros(n, n);
        w_raw.fill_diagonal(softplus_inverse(scale));
        PseudoFactor { w_raw, m: DVector::zeros(n) }
    }

    /// From an explicit lower-triangular `W̃` with positive diagonal.
    pub fn from_cholesky(w: &DMatrix<f64>, m: DVector<f64>) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n || m.len() != n {
            return Err(NicaError::Dimension("factor must be N×N with an N-vector".into()));
        }
        let mut w_raw = w.lower_triangle();
        for i in 0..n {
            if !(w[(i, i)] > 0.0) {
                return Err(NicaError::InvalidParameter(format!(
                    "factor diagonal must be positive, got {}",
                    w[(i, i)]
                )));
            }
            w_raw[(i, i)] = softplus_inverse(w[(i, i)]);
        }
        Ok(PseudoFactor { w_raw, m })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// `W̃_j`; off-diagonal entries are dropped when `factored`.
    pub fn cholesky(&self, factored: bool) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Equal => softplus_f64(self.w_raw[(a, a)]),
            std::cmp::Ordering::Greater if !factored => self.w_raw[(a, b)],
            _ => 0.0,
        })
    }

    /// `Λ_j = W̃_jᵀW̃_j`.
    pub fn precision(&self, factored: bool) -> DMatrix<f64> {
        let w = self.cholesky(factored);
        w.tr_mul(&w)
    }
}

/// `q(τ) = Gamma(exp(log_shape), exp(log_rate))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauPosterior {
    pub log_shape: f64,
    pub log_rate: f64,
}

impl TauPosterior {
    pub fn from_params(p: &GammaParams) -> Self {
        TauPosterior { log_shape: p.shape.ln(), log_rate: p.rate.ln() }
    }

    pub fn params(&self) -> GammaParams {
        GammaParams { shape: self.log_shape.exp(), rate: self.log_rate.exp() }
    }
}

/// Per-sample variational parameters. Pseudo-locations are shared across
/// samples and live with the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub factors: Vec<PseudoFactor>,
    pub tau_posteriors: Vec<TauPosterior>,
    /// Drop cross-component couplings: each `Λ_j` is diagonal.
    pub factored: bool,
}

impl VariationalState {
    /// `W̃_j = 0.1·I`, `m̃_j = 0`, `q(τ)` equal to the prior (or `Gamma(1,1)`,
    /// unused, in the Gaussian limit).
    pub fn new(n: usize, j: usize, nu: Dof, factored: bool) -> Self {
        let tau = match nu.tau_prior() {
            Some(p) => TauPosterior::from_params(&p),
            None => TauPosterior { log_shape: 0.0, log_rate: 0.0 },
        };
        VariationalState {
            factors: (0..j).map(|_| PseudoFactor::isotropic(n, INIT_FACTOR_SCALE)).collect(),
            tau_posteriors: vec![tau; n],
            factored,
        }
    }

    pub fn pseudo_count(&self) -> usize {
        self.factors.len()
    }

    pub fn component_count(&self) -> usize {
        self.tau_posteriors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.component_count();
        if self.factors.is_empty() {
            return Err(NicaError::InvalidParameter("need at least one pseudo-point".into()));
        }
        for (j, f) in self.factors.iter().enumerate() {
            if f.w_raw.shape() != (n, n) || f.m.len() != n {
                return Err(NicaError::Dimension(format!("factor {j} is not {n}-dimensional")));
            }
        }
        Ok(())
    }

    /// Number of scalars in [`Self::to_flat`].
    pub fn flat_len(n: usize, j: usize) -> usize {
        j * n * n + j * n + 2 * n
    }

    /// Layout: `w_raw` (J × N × N row-major), `m̃` (J × N), then
    /// `(log_shape, log_rate)` per component.
    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.component_count();
        let mut out = Vec::with_capacity(Self::flat_len(n, self.pseudo_count()));
        for f in &self.factors {
            for a in 0..n {
                for b in 0..n {
                    out.push(f.w_raw[(a, b)]);
                }
            }
        }
        for f in &self.factors {
            out.extend(f.m.iter());
        }
        for t in &self.tau_posteriors {
            out.push(t.log_shape);
            out.push(t.log_rate);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let (n, j) = (self.component_count(), self.pseudo_count());
        if flat.len() != Self::flat_len(n, j) {
            return Err(NicaError::Dimension(format!(
                "flat variational vector has {} entries, expected {}",
                flat.len(),
                Self::flat_len(n, j)
            )));
        }
        let mut it = flat.iter().copied();
        for f in &mut self.factors {
            for a in 0..n {
                for b in 0..n {
                    f.w_raw[(a, b)] = it.next().expect("length checked");
                }
            }
        }
        for f in &mut self.factors {
            for v in f.m.iter_mut() {
                *v = it.next().expect("length checked");
            }
        }
        for t in &mut self.tau_posteriors {
            t.log_shape = it.next().expect("length checked");
            t.log_rate = it.next().expect("length checked");
        }
        Ok(())
    }

    /// `w_raw` as a `J × N²` matrix, row `j` holding `W̃_j` row-major.
    pub(crate) fn raw_factor_matrix(&self) -> Mat {
        let n = self.component_count();
        DMatrix::from_fn(self.pseudo_count(), n * n, |j, k| self.factors[j].w_raw[(k / n, k % n)])
    }

    /// `m̃` as a `J × N` matrix.
    pub(crate) fn linear_matrix(&self) -> Mat {
        DMatrix::from_fn(self.pseudo_count(), self.component_count(), |j, i| self.factors[j].m[i])
    }
}

/// Entries of every `Λ_j` from raw factor parameters.
///
/// Input and output are `J × N²`; output column `i·N + i'` holds `Λ_j[i, i']`.
pub(crate) fn precision_entries<'t>(raw: Var<'t>, n: usize, factored: bool) -> Var<'t> {
    let r = raw.value();
    let jn = r.nrows();
    let w_of = move |r: &Mat, j: usize| {
        Mat::from_fn(n, n, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Equal => softplus_f64(r[(j, a * n + a)]),
            std::cmp::Ordering::Greater if !factored => r[(j, a * n + b)],
            _ => 0.0,
        })
    };
    let mut out = Mat::zeros(jn, n * n);
    let mut ws = Vec::with_capacity(jn);
    for j in 0..jn {
        let w = w_of(&r, j);
        let lam = w.tr_mul(&w);
        for k in 0..n * n {
            out[(j, k)] = lam[(k / n, k % n)];
        }
        ws.push(w);
    }
    Var::custom(&[raw], out, move |g| {
        let mut gr = Mat::zeros(jn, n * n);
        for (j, w) in ws.iter().enumerate() {
            let gl = Mat::from_fn(n, n, |a, b| g[(j, a * n + b)]);
            let gw = w * (&gl + gl.transpose());
            for a in 0..n {
                gr[(j, a * n + a)] = gw[(a, a)] * sigmoid_f64(r[(j, a * n + a)]);
                if !factored {
                    for b in 0..a {
                        gr[(j, a * n + b)] = gw[(a, b)];
                    }
                }
            }
        }
        vec![gr]
    })
}

/// Posterior quantities on a tape. `l_b` is the Cholesky factor of `B`,
/// `w = B⁻¹Lᵀm` (component-major column).
pub(crate) struct ConditionalVars<'t> {
    pub l_b: Var<'t>,
    /// `L_B⁻¹`, from a triangular solve against the identity.
    pub l_b_inv: Var<'t>,
    pub w: Var<'t>,
    pub log_z: Var<'t>,
    pub kl_u: Var<'t>,
}

/// Builds the conditional posterior from per-component prior factors
/// `l[i]` (`J × J`, already scaled by `τ_i`), precision entries `lambda`
/// (`J × N²`, see [`precision_entries`]) and linear terms `mt` (`J × N`).
pub(crate) fn conditional_vars<'t>(
    l: &[Var<'t>],
    lambda: Var<'t>,
    mt: Var<'t>,
    factored: bool,
) -> Result<ConditionalVars<'t>> {
    let n = l.len();
    let j = l[0].shape().0;
    let tape = l[0].tape();
    let lam = |i: usize, k: usize| lambda.column_at(i * n + k);

    let l_b = if factored {
        let mut blocks = Vec::with_capacity(n);
        for (i, li) in l.iter().enumerate() {
            let b = li.tr_matmul(li.scale_rows(lam(i, i))).add(tape.identity(j));
            blocks.push(b.cholesky().ok_or_else(|| {
                NicaError::not_pd(format!("posterior system of component {i}"), &b.value())
            })?);
        }
        block_diag(&blocks)
    } else {
        let mut grid: Vec<Vec<Option<Var<'t>>>> = vec![vec![None; n]; n];
        for i in 0..n {
            for k in i..n {
                let blk = l[i].tr_matmul(l[k].scale_rows(lam(i, k)));
                if k == i {
                    grid[i][i] = Some(blk.add(tape.identity(j)));
                } else {
                    grid[k][i] = Some(blk.transpose());
                    grid[i][k] = Some(blk);
                }
            }
        }
        let b = block_grid(&grid, j);
        b.cholesky()
            .ok_or_else(|| NicaError::not_pd("posterior system", &b.value()))?
    };

    let c_parts: Vec<Var<'t>> = (0..n).map(|i| l[i].tr_matmul(mt.column_at(i))).collect();
    let c = crate::autodiff::vcat(&c_parts);
    let v = l_b.solve_lower(c);
    let quad = v.sum_squares();
    let logdet_b = l_b.chol_logdet();
    let w = l_b.solve_lower_t(v);
    let log_z = quad.sub(logdet_b).scale(0.5);
    let l_b_inv = l_b.solve_lower(tape.identity(n * j));
    let kl_u = l_b_inv
        .sum_squares()
        .add(w.sum_squares())
        .add(logdet_b)
        .add_const(-((n * j) as f64))
        .scale(0.5);
    Ok(ConditionalVars { l_b, l_b_inv, w, log_z, kl_u })
}

/// Per-location marginals of `q̃(s|τ)`.
///
/// `a[i] = L_i⁻¹K_us,i` (`J × m`) and `r[i] = diag(K_ss,i) − colsq(a[i])`
/// (`m × 1`), both already scaled by `τ_i`. Returns
/// `(μ̃ as m × N, conditional variances d as m × N, P = L_B⁻¹ blockdiag(a))`,
/// where the block at location `l` is `diag(d_l) + P_lᵀP_l`.
pub(crate) fn marginal_vars<'t>(
    a: &[Var<'t>],
    r: &[Var<'t>],
    cond: &ConditionalVars<'t>,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let j = a[0].shape().0;
    let mu_parts: Vec<Var<'t>> = a
        .iter()
        .enumerate()
        .map(|(i, ai)| ai.tr_matmul(cond.w.rows(i * j, j)))
        .collect();
    let mu = hcat(&mu_parts);
    let d = hcat(r);
    let p_parts: Vec<Var<'t>> = a
        .iter()
        .enumerate()
        .map(|(i, ai)| cond.l_b_inv.columns(i * j, j).matmul(*ai))
        .collect();
    (mu, d, hcat(&p_parts))
}

/// `Σ̃_l = diag(d_l) + P_lᵀP_l` for every location.
pub(crate) fn location_covariances(d: &Mat, p: &Mat) -> Vec<Mat> {
    let (m, n) = d.shape();
    (0..m)
        .map(|l| {
            let mut s = Mat::zeros(n, n);
            for i in 0..n {
                for k in 0..=i {
                    let v = p.column(i * m + l).dot(&p.column(k * m + l));
                    s[(i, k)] = v;
                    s[(k, i)] = v;
                }
                s[(i, i)] += d[(l, i)];
            }
            s
        })
        .collect()
}

/// Reparameterized draw `ŝ_l = μ̃_l + chol(Σ̃_l)·ε_l` for all locations.
/// `eps` is `m × N`; output is `m × N`.
pub(crate) fn sample_marginal<'t>(mu: Var<'t>, d: Var<'t>, p: Var<'t>, eps: &Mat) -> Result<Var<'t>> {
    let (dv, pv, muv) = (d.value(), p.value(), mu.value());
    let (m, n) = dv.shape();
    let covs = location_covariances(&dv, &pv);
    let mut chols = Vec::with_capacity(m);
    let mut out = (*muv).clone();
    for (l, s) in covs.iter().enumerate() {
        let c = cholesky_lower(s).ok_or_else(|| NicaError::not_pd(format!("marginal at location {l}"), s))?;
        let e = eps.row(l).transpose();
        let draw = &c * e;
        for i in 0..n {
            out[(l, i)] += draw[i];
        }
        chols.push(c);
    }
    let eps = eps.clone();
    Ok(Var::custom(&[mu, d, p], out, move |g| {
        let mut gd = Mat::zeros(m, n);
        let mut gp = Mat::zeros(pv.nrows(), pv.ncols());
        for (l, c) in chols.iter().enumerate() {
            let gl = g.row(l).transpose();
            let el = eps.row(l);
            let c_bar = (&gl * el).lower_triangle();
            let s_bar = cholesky_adjoint(c, &c_bar);
            for i in 0..n {
                gd[(l, i)] = s_bar[(i, i)];
                for k in 0..n {
                    // ∂(P_lᵀP_l)[i,k] contributes to both columns; S̄ is symmetric.
                    let w = 2.0 * s_bar[(i, k)];
                    if w != 0.0 {
                        let src = pv.column(k * m + l).into_owned();
                        gp.column_mut(i * m + l).axpy(w, &src, 1.0);
                    }
                }
            }
        }
        vec![g.clone(), gd, gp]
    }))
}

/// Solved form of `q(u|τ) ∝ ψ(u)·N(u; 0, K_uu)`.
#[derive(Clone, Debug)]
pub struct ConditionalPosterior {
    n: usize,
    j: usize,
    uu_factors: Vec<Mat>,
    l_b: Mat,
    w: DVector<f64>,
    log_normalizer: f64,
    kl: f64,
    lambda: Mat,
}

impl ConditionalPosterior {
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// `h = J_mat⁻¹m`, location-major.
    pub fn mean(&self) -> DVector<f64> {
        let (n, j) = (self.n, self.j);
        let mut h = DVector::zeros(n * j);
        for i in 0..n {
            let hi = &self.uu_factors[i] * self.w.rows(i * j, j);
            for a in 0..j {
                h[a * n + i] = hi[a];
            }
        }
        h
    }

    /// `J_mat = K_uu⁻¹ + Λ`, location-major, assembled through triangular solves.
    pub fn precision(&self) -> DMatrix<f64> {
        let (n, j) = (self.n, self.j);
        let mut out = DMatrix::zeros(n * j, n * j);
        for i in 0..n {
            let li = &self.uu_factors[i];
            let inv_l = solve_lower(li, &Mat::identity(j, j));
            let kinv = inv_l.tr_mul(&inv_l);
            for a in 0..j {
                for b in 0..j {
                    out[(a * n + i, b * n + i)] = kinv[(a, b)];
                }
            }
        }
        for jj in 0..j {
            for i in 0..n {
                for k in 0..n {
                    out[(jj * n + i, jj * n + k)] += self.lambda[(jj, i * n + k)];
                }
            }
        }
        out
    }
}

/// Per-location Gaussian marginals of `q̃(s|τ)`.
#[derive(Clone, Debug)]
pub struct Marginals {
    /// `N × m`
    pub means: DMatrix<f64>,
    /// One `N × N` block per location.
    pub covariances: Vec<DMatrix<f64>>,
}

fn check_consistent(k: &BlockCovariance, n: usize, j: usize) -> Result<()> {
    if k.n_components != n || k.pseudo_count() != j {
        return Err(NicaError::Dimension(format!(
            "covariance has N={} J={}, posterior N={n} J={j}",
            k.n_components,
            k.pseudo_count()
        )));
    }
    Ok(())
}

/// Conditional posterior for a `τ`-scaled prior covariance.
pub fn build_conditional(k: &BlockCovariance, state: &VariationalState) -> Result<ConditionalPosterior> {
    state.validate()?;
    let (n, j) = (state.component_count(), state.pseudo_count());
    check_consistent(k, n, j)?;
    let blocks = k.component_blocks();
    let mut uu_factors = Vec::with_capacity(n);
    for (i, kuu) in blocks.k_uu.iter().enumerate() {
        uu_factors.push(
            cholesky_lower(kuu).ok_or_else(|| NicaError::not_pd(format!("K_uu of component {i}"), kuu))?,
        );
    }
    let tape = Tape::forward_only();
    let l: Vec<Var> = uu_factors.iter().map(|f| tape.leaf(f.clone())).collect();
    let lambda = precision_entries(tape.leaf(state.raw_factor_matrix()), n, state.factored);
    let cond = conditional_vars(&l, lambda, tape.leaf(state.linear_matrix()), state.factored)?;
    let lambda = (*lambda.value()).clone();
    Ok(ConditionalPosterior {
        n,
        j,
        uu_factors,
        l_b: (*cond.l_b.value()).clone(),
        w: cond.w.value().column(0).into_owned(),
        log_normalizer: cond.log_z.scalar_value(),
        kl: cond.kl_u.scalar_value(),
        lambda,
    })
}

/// Per-location means and `N × N` covariance blocks of `q̃(s|τ)`.
pub fn marginal_qs(k: &BlockCovariance, cond: &ConditionalPosterior) -> Result<Marginals> {
    let (n, j) = (cond.n, cond.j);
    check_consistent(k, n, j)?;
    let blocks = k.component_blocks();
    let tape = Tape::forward_only();
    let mut a = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for i in 0..n {
        let ai = solve_lower(&cond.uu_factors[i], &blocks.k_su[i].transpose());
        let ri = Mat::from_fn(ai.ncols(), 1, |l, _| blocks.k_ss[i][(l, l)] - ai.column(l).norm_squared());
        a.push(tape.leaf(ai));
        r.push(tape.leaf(ri));
    }
    let vars = ConditionalVars {
        l_b: tape.leaf(cond.l_b.clone()),
        l_b_inv: tape.leaf(solve_lower(&cond.l_b, &Mat::identity(n * j, n * j))),
        w: tape.leaf(Mat::from_column_slice(n * j, 1, cond.w.as_slice())),
        log_z: tape.scalar(cond.log_normalizer),
        kl_u: tape.scalar(cond.kl),
    };
    let (mu, d, p) = marginal_vars(&a, &r, &vars);
    Ok(Marginals {
        means: mu.value().transpose(),
        covariances: location_covariances(&d.value(), &p.value()),
    })
}

/// `KL(q(u|τ) ‖ p(u|τ))`.
pub fn kl_u(k: &BlockCovariance, state: &VariationalState, cond: &ConditionalPosterior) -> Result<f64> {
    check_consistent(k, state.component_count(), state.pseudo_count())?;
    check_consistent(k, cond.n, cond.j)?;
    Ok(cond.kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{assemble_covariance, scale_by_tau, KernelSpec, Lattice};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_state(n: usize, j: usize, rng: &mut ChaCha8Rng, factored: bool) -> VariationalState {
        let mut s = VariationalState::new(n, j, Dof::Finite(4.0), factored);
        for f in &mut s.factors {
            f.w_raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            f.m = DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5));
        }
        s
    }

    fn random_instance(n: usize, j: usize, m_side: usize, rng: &mut ChaCha8Rng) -> BlockCovariance {
        let lat = Lattice::grid(&[m_side, m_side]).unwrap();
        let pseudo = DMatrix::from_fn(j, 2, |_, _| rng.gen_range(0.0..(m_side - 1) as f64));
        let specs: Vec<KernelSpec> = (0..n)
            .map(|_| KernelSpec::squared_exponential(rng.gen_range(0.7..3.0), rng.gen_range(0.5..2.0)).unwrap())
            .collect();
        let k = assemble_covariance(&lat, &pseudo, &specs).unwrap();
        let taus: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..3.0)).collect();
        scale_by_tau(&k, &taus).unwrap()
    }

    /// Dense location-major `Λ` and `m`.
    fn dense_factors(state: &VariationalState) -> (Mat, DVector<f64>) {
        let (n, j) = (state.component_count(), state.pseudo_count());
        let mut lam = Mat::zeros(n * j, n * j);
        let mut m = DVector::zeros(n * j);
        for (jj, f) in state.factors.iter().enumerate() {
            lam.view_mut((jj * n, jj * n), (n, n)).copy_from(&f.precision(state.factored));
            m.rows_mut(jj * n, n).copy_from(&f.m);
        }
        (lam, m)
    }

    fn gauss_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &Mat) -> f64 {
        let d = x.len() as f64;
        let inv = cov.clone().try_inverse().unwrap();
        let r = x - mean;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + (r.transpose() * inv * &r)[0])
    }

    /// Log of `∫ ψ(u) N(u; 0, K) du` by exact Laplace evaluation at the mode.
    fn dense_log_z(k_uu: &Mat, lam: &Mat, m: &DVector<f64>) -> f64 {
        let d = m.len();
        let h = k_uu.clone().try_inverse().unwrap() + lam;
        let mode = h.clone().try_inverse().unwrap() * m;
        let log_psi = -0.5 * (mode.transpose() * lam * &mode)[0] + mode.dot(m);
        let log_prior = gauss_logpdf(&mode, &DVector::zeros(d), k_uu);
        log_psi + log_prior + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * h.determinant().ln()
    }

    #[test]
    fn uninformative_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_instance(2, 3, 3, &mut rng);
        let mut s = VariationalState::new(2, 3, Dof::Finite(4.0), false);
        for f in &mut s.factors {
            *f = PseudoFactor::isotropic(2, 1e-8);
        }
        let cond = build_conditional(&k, &s).unwrap();
        assert!(cond.log_normalizer().abs() < 1e-6);
        assert!(kl_u(&k, &s, &cond).unwrap().abs() < 1e-6);
        let marg = marginal_qs(&k, &cond).unwrap();
        let blocks = k.component_blocks();
        assert!(marg.means.abs().max() < 1e-6);
        for (l, cov) in marg.covariances.iter().enumerate() {
            for i in 0..2 {
                for i2 in 0..2 {
                    let prior = if i == i2 { blocks.k_ss[i][(l, l)] } else { 0.0 };
                    assert!((cov[(i, i2)] - prior).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn scalar_closed_forms() {
        let lat = Lattice::grid(&[1]).unwrap();
        let kspec = KernelSpec::squared_exponential(1.0, 1.3).unwrap();
        let pseudo = DMatrix::from_element(1, 1, 0.4);
        let k = assemble_covariance(&lat, &pseudo, &[kspec]).unwrap();
        let (kuu, ksu, kss) = (k.k_uu[(0, 0)], k.k_su[(0, 0)], k.k_ss[(0, 0)]);
        let (w, c) = (0.7, 1.9);
        let state = VariationalState {
            factors: vec![PseudoFactor::from_cholesky(&DMatrix::from_element(1, 1, w), DVector::from_element(1, c)).unwrap()],
            tau_posteriors: vec![TauPosterior { log_shape: 0.0, log_rate: 0.0 }],
            factored: false,
        };
        let cond = build_conditional(&k, &state).unwrap();
        let w2 = w * w;
        let expected = 0.5 * c * c * kuu / (w2 * kuu + 1.0) - 0.5 * (w2 * kuu + 1.0).ln();
        assert_relative_eq!(cond.log_normalizer(), expected, epsilon = 1e-12);

        let marg = marginal_qs(&k, &cond).unwrap();
        assert_relative_eq!(marg.means[(0, 0)], ksu * c / (w2 * kuu + 1.0), epsilon = 1e-12);
        let var = kss - ksu * ksu / kuu + ksu * ksu / (kuu * kuu) / (1.0 / kuu + w2);
        assert_relative_eq!(marg.covariances[0][(0, 0)], var, epsilon = 1e-12);

        // Worked by hand: S = 1/(1/k + w²), h = S·c.
        let s = 1.0 / (1.0 / kuu + w2);
        let h = s * c;
        let kl = 0.5 * (s / kuu + h * h / kuu - 1.0 + kuu.ln() - s.ln());
        assert_relative_eq!(kl_u(&k, &state, &cond).unwrap(), kl, epsilon = 1e-12);
    }

    #[test]
    fn dense_oracles_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..40 {
            let n = 1 + trial % 3;
            let j = 1 + trial % 4;
            let factored = trial % 5 == 4;
            let k = random_instance(n, j, 3, &mut rng);
            let state = random_state(n, j, &mut rng, factored);
            let cond = build_conditional(&k, &state).unwrap();
            let (lam, m) = dense_factors(&state);

            let lz = dense_log_z(&k.k_uu, &lam, &m);
            assert!((cond.log_normalizer() - lz).abs() < 1e-8 * (1.0 + lz.abs()), "{} vs {lz}", cond.log_normalizer());

            let kinv = k.k_uu.clone().try_inverse().unwrap();
            let jm = &kinv + &lam;
            assert!((cond.precision() - &jm).abs().max() < 1e-8 * jm.abs().max());
            let s = jm.clone().try_inverse().unwrap();
            let h = &s * &m;
            assert!((cond.mean() - &h).abs().max() < 1e-8 * (1.0 + h.abs().max()));

            let d = (n * j) as f64;
            let kl = 0.5 * ((&kinv * &s).trace() + (h.transpose() * &kinv * &h)[0] - d + k.k_uu.determinant().ln()
                - s.determinant().ln());
            let got = kl_u(&k, &state, &cond).unwrap();
            assert!((got - kl).abs() < 1e-8 * (1.0 + kl.abs()), "{got} vs {kl}");

            let marg = marginal_qs(&k, &cond).unwrap();
            let proj = &k.k_su * &kinv;
            let mu = &proj * &h;
            let sigma = &k.k_ss - &proj * k.k_su.transpose() + &proj * &s * proj.transpose();
            for l in 0..k.location_count() {
                for i in 0..n {
                    assert!((marg.means[(i, l)] - mu[l * n + i]).abs() < 1e-8);
                    for i2 in 0..n {
                        assert!((marg.covariances[l][(i, i2)] - sigma[(l * n + i, l * n + i2)]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn densified_posterior_matches_product_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_instance(2, 3, 3, &mut rng);
        let state = random_state(2, 3, &mut rng, false);
        let cond = build_conditional(&k, &state).unwrap();
        let (lam, m) = dense_factors(&state);
        let cov = cond.precision().try_inverse().unwrap();
        let h = cond.mean();
        for _ in 0..100 {
            let u = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal) * 1.5);
            let lhs = gauss_logpdf(&u, &h, &cov);
            let log_psi = -0.5 * (u.transpose() * &lam * &u)[0] + u.dot(&m);
            let rhs = log_psi + gauss_logpdf(&u, &DVector::zeros(6), &k.k_uu) - cond.log_normalizer();
            assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn relabelling_components_leaves_normalizer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = Lattice::grid(&[3, 3]).unwrap();
        let pseudo = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(0.0..2.0));
        let specs = [
            KernelSpec::squared_exponential(0.8, 1.0).unwrap(),
            KernelSpec::squared_exponential(1.7, 0.6).unwrap(),
            KernelSpec::squared_exponential(2.4, 1.4).unwrap(),
        ];
        let state = random_state(3, 3, &mut rng, false);
        let perm = [2usize, 0, 1];
        let k = assemble_covariance(&lat, &pseudo, &specs).unwrap();
        let base = build_conditional(&k, &state).unwrap().log_normalizer();

        let specs_p: Vec<KernelSpec> = perm.iter().map(|&p| specs[p]).collect();
        let kp = assemble_covariance(&lat, &pseudo, &specs_p).unwrap();
        let mut sp = state.clone();
        for (f, fp) in state.factors.iter().zip(&mut sp.factors) {
            let lam = f.precision(false);
            let lam_p = DMatrix::from_fn(3, 3, |a, b| lam[(perm[a], perm[b])]);
            // Lower-triangular W with WᵀW = Λ, from the Cholesky factor of the reversed matrix.
            let rev = DMatrix::from_fn(3, 3, |a, b| lam_p[(2 - a, 2 - b)]);
            let lr = rev.cholesky().unwrap().l();
            let wl = DMatrix::from_fn(3, 3, |a, b| lr[(2 - a, 2 - b)]).transpose();
            assert!((wl.tr_mul(&wl) - &lam_p).abs().max() < 1e-12);
            let m_p = DVector::from_fn(3, |a, _| f.m[perm[a]]);
            *fp = PseudoFactor::from_cholesky(&wl, m_p).unwrap();
        }
        let permuted = build_conditional(&kp, &sp).unwrap().log_normalizer();
        assert!((base - permuted).abs() < 1e-10, "{base} vs {permuted}");
    }

    #[test]
    fn factored_state_drops_cross_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_instance(2, 2, 3, &mut rng);
        let mut state = random_state(2, 2, &mut rng, true);
        let a = build_conditional(&k, &state).unwrap();
        for f in &mut state.factors {
            f.w_raw[(1, 0)] = 0.0;
        }
        state.factored = false;
        let b = build_conditional(&k, &state).unwrap();
        assert_relative_eq!(a.log_normalizer(), b.log_normalizer(), epsilon = 1e-12);
    }

    #[test]
    fn precision_entries_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let weights = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        for factored in [false, true] {
            let f = |r: &Mat| {
                let tape = Tape::forward_only();
                precision_entries(tape.leaf(r.clone()), 2, factored).value().dot(&weights)
            };
            let tape = Tape::new();
            let x = tape.leaf(raw.clone());
            let out = precision_entries(x, 2, factored).dot(tape.leaf(weights.clone()));
            let g = tape.backward(out).wrt(x);
            for idx in 0..raw.len() {
                let mut p = raw.clone();
                let mut q = raw.clone();
                p[idx] += 1e-6;
                q[idx] -= 1e-6;
                let fd = (f(&p) - f(&q)) / 2e-6;
                assert!((fd - g[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn sample_marginal_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, n, nj) = (3, 2, 4);
        let mu = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let d = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.2..1.0));
        let p = DMatrix::from_fn(nj, n * m, |_, _| rng.gen_range(-1.0..1.0));
        let eps = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let wts = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let f = |mu: &Mat, d: &Mat, p: &Mat| {
            let tape = Tape::forward_only();
            sample_marginal(tape.leaf(mu.clone()), tape.leaf(d.clone()), tape.leaf(p.clone()), &eps)
                .unwrap()
                .value()
                .dot(&wts)
        };
        let tape = Tape::new();
        let (vm, vd, vp) = (tape.leaf(mu.clone()), tape.leaf(d.clone()), tape.leaf(p.clone()));
        let out = sample_marginal(vm, vd, vp, &eps).unwrap().dot(tape.leaf(wts.clone()));
        let g = tape.backward(out);
        let (gm, gd, gp) = (g.wrt(vm), g.wrt(vd), g.wrt(vp));
        let h = 1e-6;
        for idx in 0..d.len() {
            let (mut a, mut b) = (d.clone(), d.clone());
            a[idx] += h;
            b[idx] -= h;
            assert!(((f(&mu, &a, &p) - f(&mu, &b, &p)) / (2.0 * h) - gd[idx]).abs() < 1e-7);
            let (mut a, mut b) = (mu.clone(), mu.clone());
            a[idx] += h;
            b[idx] -= h;
            assert!(((f(&a, &d, &p) - f(&b, &d, &p)) / (2.0 * h) - gm[idx]).abs() < 1e-7);
        }
        for idx in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[idx] += h;
            b[idx] -= h;
            assert!(((f(&mu, &d, &a) - f(&mu, &d, &b)) / (2.0 * h) - gp[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_state(3, 4, &mut rng, false);
        let flat = s.to_flat();
        assert_eq!(flat.len(), VariationalState::flat_len(3, 4));
        let mut t = VariationalState::new(3, 4, Dof::Infinite, false);
        t.set_flat(&flat).unwrap();
        assert_eq!(t.to_flat(), flat);
        assert!(t.set_flat(&flat[1..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn kl_is_nonnegative_and_blocks_are_psd(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=3);
            let j = rng.gen_range(1..=3);
            let k = random_instance(n, j, 2, &mut rng);
            let factored = rng.gen_bool(0.3);
            let state = random_state(n, j, &mut rng, factored);
            let cond = build_conditional(&k, &state).unwrap();
            prop_assert!(kl_u(&k, &state, &cond).unwrap() >= -1e-9);
            for cov in marginal_qs(&k, &cond).unwrap().covariances {
                prop_assert!((&cov - cov.transpose()).abs().max() < 1e-12);
                prop_assert!(cov.symmetric_eigenvalues().min() > -1e-12);
            }
        }
    }
}
