//! Identifiability metrics and the linear ICA baseline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NicaError, Result};

type Mat = DMatrix<f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One correlation per component pair over all samples and locations.
    #[default]
    Pooled,
    /// Optimal matching per sample, then the mean of per-sample MCCs.
    PerSample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MccOptions {
    pub correlation: Correlation,
    pub pooling: Pooling,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MccReport {
    pub mcc: f64,
    /// `matching[i]` is the estimated component paired with true component `i`.
    pub matching: Vec<usize>,
    /// Absolute correlation of each matched pair, indexed by true component.
    pub correlations: Vec<f64>,
    /// Whether the matched estimate is negatively correlated.
    pub sign_flips: Vec<bool>,
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let r = 0.5 * (k + e) as f64;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Signed correlation matrix `C[i][k]` between rows of `truth` and `est`.
fn correlation_matrix(truth: &[Vec<f64>], est: &[Vec<f64>], kind: Correlation) -> Result<Mat> {
    let prep = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let r = match kind {
                    Correlation::Pearson => r.clone(),
                    Correlation::Spearman => average_ranks(r),
                };
                let mean = r.iter().sum::<f64>() / r.len() as f64;
                let c: Vec<f64> = r.iter().map(|x| x - mean).collect();
                let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(NicaError::ZeroVariance(i));
                }
                Ok(c.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    };
    let t = prep(truth)?;
    let e = prep(est)?;
    Ok(Mat::from_fn(t.len(), e.len(), |i, k| {
        t[i].iter().zip(&e[k]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
    }))
}

/// Assignment maximizing `Σ_i w[i, perm[i]]` for a square matrix, by the
/// Hungarian method with row/column potentials.
pub fn max_weight_assignment(w: &Mat) -> Vec<usize> {
    let n = w.nrows();
    assert_eq!(n, w.ncols(), "assignment needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -w[(i - 1, j - 1)];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Exhaustive maximum over all permutations, for small `n`.
pub fn brute_force_assignment(w: &Mat) -> (Vec<usize>, f64) {
    let n = w.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), f64::NEG_INFINITY);
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &k)| w[(i, k)]).sum::<f64>();
    best.1 = score(&perm);
    best.0 = perm.clone();
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let s = score(&perm);
            if s > best.1 {
                best = (perm.clone(), s);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn rows_of(samples: &[Mat]) -> Vec<Vec<f64>> {
    let n = samples[0].nrows();
    (0..n)
        .map(|i| samples.iter().flat_map(|s| s.row(i).iter().copied().collect::<Vec<_>>()).collect())
        .collect()
}

fn report_from(c: &Mat) -> MccReport {
    let abs = c.abs();
    let matching = max_weight_assignment(&abs);
    let correlations: Vec<f64> = matching.iter().enumerate().map(|(i, &k)| abs[(i, k)]).collect();
    let sign_flips = matching.iter().enumerate().map(|(i, &k)| c[(i, k)] < 0.0).collect();
    MccReport {
        mcc: correlations.iter().sum::<f64>() / correlations.len() as f64,
        matching,
        correlations,
        sign_flips,
    }
}

/// Mean absolute correlation between matched true and estimated components.
///
/// Each slice entry is one sample of shape `N × m`.
pub fn mcc(estimated: &[Mat], truth: &[Mat], opts: MccOptions) -> Result<MccReport> {
    if estimated.is_empty() || estimated.len() != truth.len() {
        return Err(NicaError::Dimension(format!(
            "{} estimated vs {} true samples",
            estimated.len(),
            truth.len()
        )));
    }
    let shape = truth[0].shape();
    if estimated.iter().chain(truth).any(|s| s.shape() != shape) {
        return Err(NicaError::Dimension("all samples must share one N × m shape".into()));
    }
    match opts.pooling {
        Pooling::Pooled => Ok(report_from(&correlation_matrix(&rows_of(truth), &rows_of(estimated), opts.correlation)?)),
        Pooling::PerSample => {
            let mut total = 0.0;
            let mut abs_sum = Mat::zeros(shape.0, shape.0);
            let mut signed_sum = Mat::zeros(shape.0, shape.0);
            for (e, t) in estimated.iter().zip(truth) {
                let c = correlation_matrix(&rows_of(std::slice::from_ref(t)), &rows_of(std::slice::from_ref(e)), opts.correlation)?;
                total += report_from(&c).mcc;
                abs_sum += c.abs();
                signed_sum += c;
            }
            let mut rep = report_from(&abs_sum);
            rep.mcc = total / estimated.len() as f64;
            rep.correlations.iter_mut().for_each(|v| *v /= estimated.len() as f64);
            rep.sign_flips = rep.matching.iter().enumerate().map(|(i, &k)| signed_sum[(i, k)] < 0.0).collect();
            Ok(rep)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearIcaResult {
    /// `N × n_obs`
    pub sources: Mat,
    /// Total unmixing map `N × M` applied to centred observations.
    pub unmixing: Mat,
    pub mean: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

pub const ICA_TOLERANCE: f64 = 1e-6;
pub const ICA_MAX_ITER: usize = 500;

fn symmetric_decorrelate(w: &Mat) -> Mat {
    let e = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.max(1e-300).sqrt()));
    &e.eigenvectors * inv_sqrt * e.eigenvectors.transpose() * w
}

/// FastICA with tanh contrast and symmetric decorrelation on `observations`
/// (`M × n_obs`, one observation per column).
pub fn fast_ica(observations: &Mat, n: usize, seed: u64) -> Result<LinearIcaResult> {
    let (mdim, count) = observations.shape();
    if n == 0 || n > mdim {
        return Err(NicaError::InvalidParameter(format!("cannot extract {n} components from {mdim} channels")));
    }
    if count < 2 {
        return Err(NicaError::InvalidParameter("need at least two observations".into()));
    }
    let mean = observations.column_mean();
    let mut xc = observations.clone();
    for mut col in xc.column_iter_mut() {
        col -= &mean;
    }
    let cov = &xc * xc.transpose() / count as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..mdim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut whiten = Mat::zeros(n, mdim);
    for (r, &k) in order.iter().take(n).enumerate() {
        let lam = eig.eigenvalues[k];
        if !(lam > 0.0) {
            return Err(NicaError::ZeroVariance(r));
        }
        let mut v = eig.eigenvectors.column(k).transpose() / lam.sqrt();
        // Deterministic sign: largest-magnitude loading positive.
        let imax = v.iamax_full().1;
        if v[imax] < 0.0 {
            v = -v;
        }
        whiten.row_mut(r).copy_from(&v);
    }
    let z = &whiten * &xc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = symmetric_decorrelate(&Mat::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng)));
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=ICA_MAX_ITER {
        iterations = it;
        let y = &w * &z;
        let g = y.map(f64::tanh);
        let g_prime_mean = DVector::from_fn(n, |i, _| g.row(i).iter().map(|t| 1.0 - t * t).sum::<f64>() / count as f64);
        let mut w_new = &g * z.transpose() / count as f64;
        for i in 0..n {
            let row = w.row(i) * g_prime_mean[i];
            let mut r = w_new.row_mut(i);
            r -= row;
        }
        let w_new = symmetric_decorrelate(&w_new);
        let lim = (&w_new * w.transpose()).diagonal().iter().map(|d| (d.abs() - 1.0).abs()).fold(0.0, f64::max);
        w = w_new;
        if lim < ICA_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA did not converge in {ICA_MAX_ITER} iterations");
    }
    let unmixing = &w * &whiten;
    Ok(LinearIcaResult { sources: &w * z, unmixing, mean, converged, iterations })
}

/// Linear ICA treating every (sample, location) as an independent
/// observation. Returns per-sample `N × m` estimates and the fit.
pub fn linear_ica_baseline(observations: &[Mat], n: usize, seed: u64) -> Result<(Vec<Mat>, LinearIcaResult)> {
    if observations.is_empty() {
        return Err(NicaError::InvalidParameter("no observations".into()));
    }
    let (mdim, m) = observations[0].shape();
    if observations.iter().any(|o| o.shape() != (mdim, m)) {
        return Err(NicaError::Dimension("observations must share one shape".into()));
    }
    let stacked = Mat::from_fn(mdim, m * observations.len(), |c, k| observations[k / m][(c, k % m)]);
    let fit = fast_ica(&stacked, n, seed)?;
    let per_sample = (0..observations.len())
        .map(|s| fit.sources.columns(s * m, m).into_owned())
        .collect();
    Ok((per_sample, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn random_samples(rng: &mut ChaCha8Rng, count: usize, n: usize, m: usize) -> Vec<Mat> {
        (0..count).map(|_| Mat::from_fn(n, m, |_, _| rng.sample(StandardNormal))).collect()
    }

    #[test]
    fn perfect_and_permuted_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_samples(&mut rng, 4, 3, 50);
        assert!((mcc(&truth, &truth, MccOptions::default()).unwrap().mcc - 1.0).abs() < 1e-12);
        let perm = [2usize, 0, 1];
        let est: Vec<Mat> = truth
            .iter()
            .map(|t| Mat::from_fn(3, 50, |i, l| if i == 1 { -t[(perm[i], l)] } else { t[(perm[i], l)] }))
            .collect();
        let rep = mcc(&est, &truth, MccOptions::default()).unwrap();
        assert!((rep.mcc - 1.0).abs() < 1e-12);
        assert_eq!(rep.matching, vec![1, 2, 0]);
        assert_eq!(rep.sign_flips, vec![true, false, false]);
        for opts in [
            MccOptions { correlation: Correlation::Spearman, pooling: Pooling::Pooled },
            MccOptions { correlation: Correlation::Pearson, pooling: Pooling::PerSample },
        ] {
            assert!((mcc(&est, &truth, opts).unwrap().mcc - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_noise_scores_low() {
        // Null check: for n = 10 000 pooled values |r| concentrates at ~1/√n.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_samples(&mut rng, 10, 3, 1000);
        let est = random_samples(&mut rng, 10, 3, 1000);
        assert!(mcc(&est, &truth, MccOptions::default()).unwrap().mcc < 0.05);
    }

    #[test]
    fn spearman_sees_through_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_samples(&mut rng, 2, 2, 300);
        let est: Vec<Mat> = truth.iter().map(|t| t.map(|v| v.powi(3) + v.exp())).collect();
        let opts = MccOptions { correlation: Correlation::Spearman, pooling: Pooling::Pooled };
        assert!((mcc(&est, &truth, opts).unwrap().mcc - 1.0).abs() < 1e-12);
        assert!(mcc(&est, &truth, MccOptions::default()).unwrap().mcc < 0.99);
    }

    #[test]
    fn zero_variance_is_reported() {
        let truth = vec![Mat::from_fn(2, 5, |i, l| (i + l) as f64)];
        let est = vec![Mat::from_fn(2, 5, |i, l| if i == 1 { 3.0 } else { l as f64 })];
        assert!(matches!(mcc(&est, &truth, MccOptions::default()), Err(NicaError::ZeroVariance(1))));
    }

    #[test]
    fn average_ranks_handle_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(n in 1usize..=6, seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Mat::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
            let perm = max_weight_assignment(&w);
            let total: f64 = perm.iter().enumerate().map(|(i, &k)| w[(i, k)]).sum();
            let (_, best) = brute_force_assignment(&w);
            prop_assert!((total - best).abs() < 1e-12);
            let mut sorted = perm.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn mcc_invariant_under_affine_maps(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_samples(&mut rng, 2, 3, 40);
            let est = random_samples(&mut rng, 2, 3, 40);
            let scales: Vec<f64> = (0..3).map(|_| {
                let s: f64 = rng.gen_range(0.1..10.0);
                if rng.gen_bool(0.5) { -s } else { s }
            }).collect();
            let shifts: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mapped: Vec<Mat> = est.iter().map(|e| Mat::from_fn(3, 40, |i, l| scales[i] * e[(i, l)] + shifts[i])).collect();
            let a = mcc(&est, &truth, MccOptions::default()).unwrap();
            let b = mcc(&mapped, &truth, MccOptions::default()).unwrap();
            prop_assert!((a.mcc - b.mcc).abs() < 1e-12);
            prop_assert_eq!(a.matching, b.matching);
        }
    }

    #[test]
    fn fastica_unmixes_uniform_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 500;
        let sources: Vec<Mat> = (0..4).map(|_| Mat::from_fn(2, m, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let theta: f64 = 0.7;
        let q = Mat::from_row_slice(3, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos(), 0.0, 0.0]);
        let obs: Vec<Mat> = sources.iter().map(|s| &q * s).collect();
        let (est, fit) = linear_ica_baseline(&obs, 2, 0).unwrap();
        assert!(fit.converged);
        assert!(mcc(&est, &sources, MccOptions::default()).unwrap().mcc >= 0.95);
    }

    #[test]
    fn fastica_flags_gaussian_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Low-dimensional Gaussian samples can still have spurious fixed points.
        let x = Mat::from_fn(6, 20000, |_, _| rng.sample(StandardNormal));
        let fit = fast_ica(&x, 6, 1).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, ICA_MAX_ITER);
    }

    #[test]
    fn fastica_single_component_is_first_principal_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Mat::from_fn(2, 400, |r, _| rng.sample::<f64, _>(StandardNormal) * if r == 0 { 3.0 } else { 0.5 });
        let fit = fast_ica(&base, 1, 0).unwrap();
        assert!(fit.converged);
        let dir = fit.unmixing.row(0).normalize();
        assert!(dir[0].abs() > 0.99);
        let var = fit.sources.row(0).iter().map(|v| v * v).sum::<f64>() / 400.0;
        assert!((var - 1.0).abs() < 1e-10);
    }
}
