//! Index sets, covariance kernels and the interleaved block covariance.
//!
//! Rows of the block matrices follow location-major interleaving: entry
//! `a·N + i` is component `i` at location `a`. Component-major views are only
//! produced through [`BlockCovariance::component_blocks`] or
//! [`interleave_permutation`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{NicaError, Result};

/// Relative diagonal jitter added to kernel Gram matrices.
pub const JITTER: f64 = 1e-6;

/// Ordered set of unique locations in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    dim: usize,
    /// One location per row.
    coords: DMatrix<f64>,
}

impl Lattice {
    pub fn new(dim: usize, locations: &[Vec<f64>]) -> Result<Self> {
        if dim == 0 {
            return Err(NicaError::InvalidParameter("lattice dimension must be positive".into()));
        }
        if locations.is_empty() {
            return Err(NicaError::InvalidParameter("lattice needs at least one location".into()));
        }
        for (k, loc) in locations.iter().enumerate() {
            if loc.len() != dim {
                return Err(NicaError::Dimension(format!(
                    "location {k} has {} coordinates, expected {dim}",
                    loc.len()
                )));
            }
        }
        let mut sorted: Vec<&Vec<f64>> = locations.iter().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(NicaError::InvalidParameter("duplicate lattice location".into()));
        }
        let coords = DMatrix::from_fn(locations.len(), dim, |r, c| locations[r][c]);
        Ok(Lattice { dim, coords })
    }

    /// Regular integer grid, row-major (last axis varies fastest).
    pub fn grid(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(NicaError::InvalidParameter(format!("bad grid shape {shape:?}")));
        }
        let count: usize = shape.iter().product();
        let mut locs = Vec::with_capacity(count);
        for mut flat in 0..count {
            let mut loc = vec![0.0; shape.len()];
            for (axis, &extent) in shape.iter().enumerate().rev() {
                loc[axis] = (flat % extent) as f64;
                flat /= extent;
            }
            locs.push(loc);
        }
        Lattice::new(shape.len(), &locs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn location(&self, k: usize) -> Vec<f64> {
        self.coords.row(k).iter().copied().collect()
    }

    /// Per-axis (min, max).
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|c| {
                let col = self.coords.column(c);
                (col.min(), col.max())
            })
            .collect()
    }

    /// `per_axis^dim` points spaced evenly across the bounding box.
    pub fn regular_subgrid(&self, per_axis: usize) -> DMatrix<f64> {
        let bbox = self.bounding_box();
        let count = per_axis.pow(self.dim as u32);
        DMatrix::from_fn(count, self.dim, |r, c| {
            let stride = per_axis.pow((self.dim - 1 - c) as u32);
            let k = (r / stride) % per_axis;
            let (lo, hi) = bbox[c];
            if per_axis == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (per_axis - 1) as f64
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub variance: f64,
}

impl KernelSpec {
    pub fn squared_exponential(lengthscale: f64, variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            family: KernelFamily::SquaredExponential,
            lengthscale,
            variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(NicaError::InvalidParameter(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(NicaError::InvalidParameter(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        Ok(())
    }

    fn eval_sqdist(&self, d2: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                self.variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
        }
    }

    /// Gram matrix between the rows of `x1` and `x2`.
    pub fn matrix(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x1.nrows(), x2.nrows(), |a, b| {
            self.eval_sqdist(sqdist(x1, a, x2, b))
        })
    }
}

fn sqdist(x1: &DMatrix<f64>, a: usize, x2: &DMatrix<f64>, b: usize) -> f64 {
    (0..x1.ncols())
        .map(|c| {
            let d = x1[(a, c)] - x2[(b, c)];
            d * d
        })
        .sum()
}

pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NicaError::Dimension(format!(
            "kernel inputs of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(spec.eval_sqdist(d2))
}

/// Squared-exponential Gram matrix on the tape.
///
/// `x1`, `x2` hold locations as rows; `log_ls` and `log_var` are 1x1.
pub fn se_kernel_var<'t>(x1: Var<'t>, x2: Var<'t>, log_ls: Var<'t>, log_var: Var<'t>) -> Var<'t> {
    let (a, b) = (x1.value(), x2.value());
    let ls = log_ls.scalar_value().exp();
    let var = log_var.scalar_value().exp();
    let inv_ls2 = 1.0 / (ls * ls);
    let d2 = DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| sqdist(&a, i, &b, j));
    let k = d2.map(|d| var * (-0.5 * d * inv_ls2).exp());
    let kc = k.clone();
    Var::custom(&[x1, x2, log_ls, log_var], k, move |g| {
        let gk = g.component_mul(&kc);
        let dim = a.ncols();
        let mut ga = DMatrix::zeros(a.nrows(), dim);
        let mut gb = DMatrix::zeros(b.nrows(), dim);
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let w = gk[(i, j)] * inv_ls2;
                if w == 0.0 {
                    continue;
                }
                for c in 0..dim {
                    let diff = a[(i, c)] - b[(j, c)];
                    ga[(i, c)] -= w * diff;
                    gb[(j, c)] += w * diff;
                }
            }
        }
        let gls = gk.component_mul(&d2).sum() * inv_ls2;
        let gvar = gk.sum();
        vec![
            ga,
            gb,
            DMatrix::from_element(1, 1, gls),
            DMatrix::from_element(1, 1, gvar),
        ]
    })
}

/// Partitioned prior covariance of latents `s` and pseudo-latents `u`,
/// location-major interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCovariance {
    pub n_components: usize,
    /// `(m·N) × (m·N)`
    pub k_ss: DMatrix<f64>,
    /// `(m·N) × (J·N)`
    pub k_su: DMatrix<f64>,
    /// `(J·N) × (J·N)`
    pub k_uu: DMatrix<f64>,
}

/// Per-component (component-major) view of a [`BlockCovariance`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentBlocks {
    pub k_ss: Vec<DMatrix<f64>>,
    pub k_su: Vec<DMatrix<f64>>,
    pub k_uu: Vec<DMatrix<f64>>,
}

impl BlockCovariance {
    pub fn location_count(&self) -> usize {
        self.k_ss.nrows() / self.n_components
    }

    pub fn pseudo_count(&self) -> usize {
        self.k_uu.nrows() / self.n_components
    }

    /// Extracts the `N` independent per-component matrices.
    pub fn component_blocks(&self) -> ComponentBlocks {
        let n = self.n_components;
        let pick = |src: &DMatrix<f64>, i: usize| {
            DMatrix::from_fn(src.nrows() / n, src.ncols() / n, |a, b| src[(a * n + i, b * n + i)])
        };
        ComponentBlocks {
            k_ss: (0..n).map(|i| pick(&self.k_ss, i)).collect(),
            k_su: (0..n).map(|i| pick(&self.k_su, i)).collect(),
            k_uu: (0..n).map(|i| pick(&self.k_uu, i)).collect(),
        }
    }
}

/// `perm[c] = r`: component-major position `c = i·count + a` holds
/// location-major row `r = a·n + i`.
pub fn interleave_permutation(count: usize, n: usize) -> Vec<usize> {
    (0..count * n)
        .map(|c| {
            let (i, a) = (c / count, c % count);
            a * n + i
        })
        .collect()
}

/// Reorders rows and columns of a square location-major matrix into component-major order.
pub fn to_component_major(m: &DMatrix<f64>, count: usize, n: usize) -> DMatrix<f64> {
    let perm = interleave_permutation(count, n);
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(perm[r], perm[c])])
}

fn interleaved(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    specs: &[KernelSpec],
    jitter_diag: bool,
) -> DMatrix<f64> {
    let n = specs.len();
    let mut out = DMatrix::zeros(x1.nrows() * n, x2.nrows() * n);
    for (i, spec) in specs.iter().enumerate() {
        let k = spec.matrix(x1, x2);
        for a in 0..x1.nrows() {
            for b in 0..x2.nrows() {
                out[(a * n + i, b * n + i)] = k[(a, b)];
            }
        }
        if jitter_diag {
            for a in 0..x1.nrows() {
                out[(a * n + i, a * n + i)] += JITTER * spec.variance;
            }
        }
    }
    out
}

/// Builds `K_ss`, `K_su`, `K_uu` for the lattice and pseudo-locations (rows of
/// `pseudo`). Jitter `JITTER·σ²_i` is added on the diagonals of `K_ss` and `K_uu`.
pub fn assemble_covariance(
    lattice: &Lattice,
    pseudo: &DMatrix<f64>,
    specs: &[KernelSpec],
) -> Result<BlockCovariance> {
    if specs.is_empty() {
        return Err(NicaError::InvalidParameter("need at least one kernel".into()));
    }
    for s in specs {
        s.validate()?;
    }
    if pseudo.nrows() > 0 && pseudo.ncols() != lattice.dim() {
        return Err(NicaError::Dimension(format!(
            "pseudo-locations have dimension {}, lattice {}",
            pseudo.ncols(),
            lattice.dim()
        )));
    }
    let bbox = lattice.bounding_box();
    for r in 0..pseudo.nrows() {
        let outside = (0..lattice.dim()).any(|c| {
            let v = pseudo[(r, c)];
            v < bbox[c].0 || v > bbox[c].1
        });
        if outside {
            log::warn!("pseudo-location {r} lies outside the lattice bounding box");
        }
    }
    let x = lattice.coords();
    Ok(BlockCovariance {
        n_components: specs.len(),
        k_ss: interleaved(x, x, specs, true),
        k_su: interleaved(x, pseudo, specs, false),
        k_uu: interleaved(pseudo, pseudo, specs, true),
    })
}

/// Divides every entry of component `i` by `taus[i]`.
pub fn scale_by_tau(k: &BlockCovariance, taus: &[f64]) -> Result<BlockCovariance> {
    let n = k.n_components;
    if taus.len() != n {
        return Err(NicaError::Dimension(format!("{} taus for {n} components", taus.len())));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(NicaError::InvalidParameter(format!("tau must be positive, got {t}")));
    }
    let scale = |m: &DMatrix<f64>| {
        // Off-component entries are zero, so the row component decides.
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] / taus[r % n])
    };
    Ok(BlockCovariance {
        n_components: n,
        k_ss: scale(&k.k_ss),
        k_su: scale(&k.k_su),
        k_uu: scale(&k.k_uu),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_examples() {
        let s = KernelSpec::squared_exponential(1.0, 1.0).unwrap();
        assert_eq!(kernel_eval(&s, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let s2 = KernelSpec::squared_exponential(2.0, 3.0).unwrap();
        let v = kernel_eval(&s2, &[0.0, 0.0], &[0.0, 2.0]).unwrap();
        assert_relative_eq!(v, 3.0 * (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v, 1.81959, epsilon = 1e-5);
        assert!(kernel_eval(&s, &[0.0, 0.0], &[10.0, 10.0]).unwrap() < 1e-40);
        assert!(kernel_eval(&s, &[0.0], &[0.0, 1.0]).is_err());
        assert!(KernelSpec::squared_exponential(0.0, 1.0).is_err());
        assert!(KernelSpec::squared_exponential(1.0, -1.0).is_err());
    }

    #[test]
    fn kernel_symmetry_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let s = KernelSpec::squared_exponential(rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0))
                .unwrap();
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert_eq!(kernel_eval(&s, &a, &b).unwrap(), kernel_eval(&s, &b, &a).unwrap());
        }
    }

    #[test]
    fn lattice_rejects_bad_input() {
        assert!(Lattice::new(2, &[vec![0.0, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(Lattice::new(2, &[vec![0.0]]).is_err());
        let g = Lattice::grid(&[2, 3]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.location(4), vec![1.0, 1.0]);
        assert_eq!(g.bounding_box(), vec![(0.0, 1.0), (0.0, 2.0)]);
        let sub = Lattice::grid(&[16, 16]).unwrap().regular_subgrid(5);
        assert_eq!(sub.shape(), (25, 2));
        assert_eq!(sub.row(24).iter().copied().collect::<Vec<_>>(), vec![15.0, 15.0]);
    }

    #[test]
    fn single_entry_assembly() {
        let lat = Lattice::new(1, &[vec![0.0]]).unwrap();
        let spec = KernelSpec::squared_exponential(1.0, 2.0).unwrap();
        let k = assemble_covariance(&lat, &DMatrix::zeros(0, 1), &[spec]).unwrap();
        assert_eq!(k.k_ss.shape(), (1, 1));
        assert_eq!(k.k_ss[(0, 0)], 2.0 + JITTER * 2.0);
        assert_eq!(k.k_uu.shape(), (0, 0));
    }

    #[test]
    fn cross_component_blocks_are_zero() {
        let lat = Lattice::grid(&[2]).unwrap();
        let specs = [
            KernelSpec::squared_exponential(1.0, 1.0).unwrap(),
            KernelSpec::squared_exponential(2.0, 1.0).unwrap(),
        ];
        let k = assemble_covariance(&lat, &DMatrix::from_row_slice(1, 1, &[0.5]), &specs).unwrap();
        assert_eq!(k.k_ss[(0, 3)], 0.0);
        assert_eq!(k.k_su[(1, 0)], 0.0);
        assert!(k.k_ss[(0, 2)] > 0.0);
    }

    #[test]
    fn grid_gram_is_positive_definite() {
        let lat = Lattice::grid(&[2, 2]).unwrap();
        let spec = KernelSpec::squared_exponential(1.0, 1.0).unwrap();
        let k = assemble_covariance(&lat, &DMatrix::zeros(0, 2), &[spec]).unwrap();
        let eig = k.k_ss.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        assert!(k.k_ss.clone().cholesky().is_some());
    }

    #[test]
    fn tau_scaling() {
        let lat = Lattice::grid(&[3]).unwrap();
        let pseudo = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let specs = [
            KernelSpec::squared_exponential(1.0, 1.0).unwrap(),
            KernelSpec::squared_exponential(2.0, 1.5).unwrap(),
        ];
        let k = assemble_covariance(&lat, &pseudo, &specs).unwrap();
        assert_eq!(scale_by_tau(&k, &[1.0, 1.0]).unwrap(), k);
        let scaled = scale_by_tau(&k, &[1.0, 4.0]).unwrap();
        for a in 0..3 {
            assert_eq!(scaled.k_ss[(a * 2, a * 2)], k.k_ss[(a * 2, a * 2)]);
            assert_eq!(scaled.k_ss[(a * 2 + 1, a * 2 + 1)], k.k_ss[(a * 2 + 1, a * 2 + 1)] / 4.0);
        }
        assert!(scale_by_tau(&k, &[1.0, 0.0]).is_err());
        assert!(scale_by_tau(&k, &[1.0]).is_err());

        let one = assemble_covariance(&lat, &pseudo, &specs[..1]).unwrap();
        let half = scale_by_tau(&one, &[2.0]).unwrap();
        assert_eq!(half.k_su, &one.k_su / 2.0);
        assert_eq!(half.k_uu, &one.k_uu / 2.0);
    }

    #[test]
    fn component_major_is_block_diagonal() {
        let lat = Lattice::grid(&[3, 2]).unwrap();
        let specs = [
            KernelSpec::squared_exponential(0.7, 1.0).unwrap(),
            KernelSpec::squared_exponential(1.3, 2.0).unwrap(),
            KernelSpec::squared_exponential(2.9, 0.5).unwrap(),
        ];
        let k = assemble_covariance(&lat, &DMatrix::zeros(0, 2), &specs).unwrap();
        let cm = to_component_major(&k.k_ss, lat.len(), 3);
        let m = lat.len();
        let mut expected = DMatrix::zeros(3 * m, 3 * m);
        for (i, s) in specs.iter().enumerate() {
            let mut blk = s.matrix(lat.coords(), lat.coords());
            for a in 0..m {
                blk[(a, a)] += JITTER * s.variance;
            }
            expected.view_mut((i * m, i * m), (m, m)).copy_from(&blk);
        }
        assert_eq!(cm, expected);
        assert_eq!(k.component_blocks().k_ss[1], expected.view((m, m), (m, m)).into_owned());
    }

    #[test]
    fn tape_kernel_matches_plain() {
        use crate::autodiff::Tape;
        let lat = Lattice::grid(&[2, 2]).unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.9, 0.7]);
        let spec = KernelSpec::squared_exponential(0.8, 1.7).unwrap();
        let t = Tape::new();
        let k = se_kernel_var(
            t.leaf(z.clone()),
            t.leaf(lat.coords().clone()),
            t.scalar(0.8f64.ln()),
            t.scalar(1.7f64.ln()),
        );
        let plain = spec.matrix(&z, lat.coords());
        assert!((&*k.value() - plain).abs().max() < 1e-14);
    }

    proptest! {
        #[test]
        fn assembly_always_factorizes(
            ls in prop::collection::vec(0.3f64..6.0, 1..4),
            var in 0.1f64..4.0,
            side in 2usize..5,
        ) {
            let lat = Lattice::grid(&[side, side]).unwrap();
            let specs: Vec<_> = ls.iter().map(|&l| KernelSpec::squared_exponential(l, var).unwrap()).collect();
            let pseudo = lat.regular_subgrid(2);
            let k = assemble_covariance(&lat, &pseudo, &specs).unwrap();
            prop_assert!(k.k_ss.clone().cholesky().is_some());
            prop_assert!(k.k_uu.clone().cholesky().is_some());
        }
    }
}
