//! Budgeted latent transport and its distributional verification.
//!
//! The transport map mixes a latent with fresh noise around a drawn mean
//! offset: `z* = (z + n)/sqrt(2)` with `n ~ N(alpha*sqrt(2)*1, I)` and
//! `alpha ~ U(-rho, rho)`. For a standard-normal source this keeps the
//! covariance at identity while moving the mean by `alpha` per coordinate,
//! so the per-coordinate Gaussian 2-Wasserstein distance from the source
//! law stays within the budget `rho`. `verify_proposition1` checks exactly
//! that by Monte-Carlo and emits a JSON-serializable report.

use crate::coremath::linalg::{min_eigenvalue, sqrtm_psd, SquareMatrix};
use crate::coremath::{standard_normal, SeededRng};
use crate::error::{Error, Result};
use crate::{Real, Tensor};

const SQRT_2: Real = std::f64::consts::SQRT_2;

/// Distribution-distance budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransportConfig {
    pub rho: Real,
}

impl TransportConfig {
    pub fn new(rho: Real) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!(
                "transport budget rho must be >= 0, got {rho}"
            )));
        }
        Ok(TransportConfig { rho })
    }
}

/// Provenance of one transported latent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransportRecord {
    pub alpha: Real,
    pub rho: Real,
    pub source: usize,
}

/// Deterministic transport core with the mean offset and noise pinned:
/// `z* = (z + alpha*sqrt(2)*1 + noise) / sqrt(2)`.
pub fn apply_transport_pinned(z: &Tensor, alpha: Real, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != z.shape() {
        return Err(Error::shape(
            format!("{:?}", z.shape()),
            format!("{:?}", noise.shape()),
        ));
    }
    let offset = alpha * SQRT_2;
    let data = z
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&zi, &ni)| (zi + offset + ni) / SQRT_2)
        .collect();
    Ok(Tensor::from_vec_unchecked(z.shape().to_vec(), data))
}

/// Transport with `alpha ~ U(-rho, rho)` and fresh standard-normal noise.
/// Draw order: `alpha`, then the noise coordinates.
pub fn apply_transport(
    z: &Tensor,
    rho: Real,
    rng: &mut SeededRng,
    source: usize,
) -> Result<(Tensor, TransportRecord)> {
    let cfg = TransportConfig::new(rho)?;
    let alpha = rng.uniform(-cfg.rho, cfg.rho);
    let noise = standard_normal(rng, z.shape());
    let z_star = apply_transport_pinned(z, alpha, &noise)?;
    Ok((
        z_star,
        TransportRecord {
            alpha,
            rho: cfg.rho,
            source,
        },
    ))
}

/// Ablation counterpart: a fresh draw from `N(rho*1, I)` that ignores the
/// source latent entirely.
pub fn random_transform(rho: Real, dim: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let cfg = TransportConfig::new(rho)?;
    let data = (0..dim).map(|_| cfg.rho + rng.normal()).collect();
    Ok(Tensor::from_vec_unchecked(vec![dim], data))
}

/// Mean vector and covariance matrix of a Gaussian law.
///
/// Construction validates symmetry (within 1e-10) and positive
/// semi-definiteness (smallest eigenvalue >= -1e-10, scaled).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    mean: Vec<Real>,
    cov: SquareMatrix<Real>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<Real>, cov_rows: Vec<Real>) -> Result<Self> {
        let dim = mean.len();
        let cov = SquareMatrix::from_rows(dim, cov_rows)?;
        let scale = cov
            .data
            .iter()
            .fold(1.0f64, |acc, v| acc.max(v.abs()));
        if cov.max_asymmetry() > 1e-10 * scale {
            return Err(Error::invalid("covariance is not symmetric".to_string()));
        }
        let min_eig = min_eigenvalue(&cov);
        if min_eig < -1e-10 * scale {
            return Err(Error::invalid(format!(
                "covariance is not PSD (min eigenvalue {min_eig})"
            )));
        }
        Ok(GaussianMoments { mean, cov })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        GaussianMoments {
            mean: vec![0.0; dim],
            cov: SquareMatrix::identity(dim),
        }
    }

    /// `N(mu*1, I)`.
    pub fn isotropic_shifted(dim: usize, mu: Real) -> Self {
        GaussianMoments {
            mean: vec![mu; dim],
            cov: SquareMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[Real] {
        &self.mean
    }

    pub fn cov(&self) -> &SquareMatrix<Real> {
        &self.cov
    }

    /// Largest entrywise deviation of the covariance from identity.
    pub fn cov_max_abs_dev_from_identity(&self) -> Real {
        let n = self.cov.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.cov.at(i, j) - target).abs());
            }
        }
        worst
    }
}

/// Streaming mean/covariance accumulator (unbiased covariance).
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    dim: usize,
    n: usize,
    sum: Vec<Real>,
    prod: Vec<Real>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        MomentAccumulator {
            dim,
            n: 0,
            sum: vec![0.0; dim],
            prod: vec![0.0; dim * dim],
        }
    }

    pub fn push(&mut self, sample: &Tensor) -> Result<()> {
        if sample.shape() != [self.dim] {
            return Err(Error::shape(
                format!("[{}]", self.dim),
                format!("{:?}", sample.shape()),
            ));
        }
        let x = sample.data();
        for i in 0..self.dim {
            self.sum[i] += x[i];
            let xi = x[i];
            let row = &mut self.prod[i * self.dim..];
            for (j, &xj) in x.iter().enumerate().skip(i) {
                row[j] += xi * xj;
            }
        }
        self.n += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<GaussianMoments> {
        if self.n < 2 {
            return Err(Error::invalid(format!(
                "moment estimation needs >= 2 samples, got {}",
                self.n
            )));
        }
        let n = self.n as Real;
        let mean: Vec<Real> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            for j in i..self.dim {
                let raw = self.prod[i * self.dim + j];
                let c = (raw - n * mean[i] * mean[j]) / (n - 1.0);
                cov[i * self.dim + j] = c;
                cov[j * self.dim + i] = c;
            }
        }
        GaussianMoments::new(mean, cov)
    }
}

/// Sample mean and unbiased sample covariance of a set of vectors.
pub fn estimate_moments(samples: &[Tensor]) -> Result<GaussianMoments> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "moment estimation needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    let mut acc = MomentAccumulator::new(samples[0].len());
    for s in samples {
        acc.push(s)?;
    }
    acc.finish()
}

/// Closed-form Gaussian 2-Wasserstein distance:
/// `sqrt(|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2))`,
/// with matrix square roots via symmetric eigendecomposition.
pub fn gaussian_w2(a: &GaussianMoments, b: &GaussianMoments) -> Result<Real> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("dim {}", a.dim()),
            format!("dim {}", b.dim()),
        ));
    }
    let mean_sq: Real = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = sqrtm_psd(&a.cov);
    let mut inner = root_a.matmul(&b.cov).matmul(&root_a);
    // symmetrize against rounding before the second square root
    let n = inner.n;
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (inner.at(i, j) + inner.at(j, i));
            inner.set(i, j, avg);
            inner.set(j, i, avg);
        }
    }
    let cross = sqrtm_psd(&inner);
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok((mean_sq + trace_term.max(0.0)).sqrt())
}

/// Per-coordinate transport distance `W2 / sqrt(d)`; equals `|alpha|` for
/// `N(0, I)` against `N(alpha*1, I)` in any dimension.
pub fn normalized_latent_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<Real> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("dim {}", a.dim()),
            format!("dim {}", b.dim()),
        ));
    }
    Ok(gaussian_w2(a, b)? / (a.dim() as Real).sqrt())
}

/// Monte-Carlo tolerance on the normalized distance (~3 standard errors
/// at n = 10^5).
pub const PROP1_DIST_TOL: Real = 0.03;
/// Entrywise covariance tolerance against identity.
pub const PROP1_COV_TOL: Real = 0.05;
/// Tolerance on a fixed-alpha stratum's per-coordinate mean.
pub const PROP1_MEAN_TOL: Real = 0.02;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StratumReport {
    pub alpha: Real,
    /// Per-coordinate mean of the transported latents, averaged over
    /// coordinates; should sit at `alpha`.
    pub mean: Real,
    pub normalized_distance: Real,
    pub cov_max_abs_dev: Real,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prop1Report {
    pub rho: Real,
    pub dim: usize,
    pub n: usize,
    pub alpha_strata: Vec<StratumReport>,
    /// Normalized distance of the alpha-resampled (mixture) law from the
    /// standard normal.
    pub normalized_distance: Real,
    /// Worst entrywise covariance deviation from identity across strata.
    pub cov_max_abs_dev: Real,
    pub pass: bool,
}

/// Monte-Carlo check of the transport budget: for standard-normal sources,
/// every fixed-alpha stratum must sit at distance `|alpha| <= rho` with
/// identity covariance, and the alpha-resampled law must stay within the
/// budget too.
pub fn verify_proposition1(
    cfg: &TransportConfig,
    dim: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Prop1Report> {
    if n < 10_000 {
        return Err(Error::invalid(format!(
            "verification needs n >= 10^4 draws, got {n}"
        )));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be >= 1"));
    }
    let rho = cfg.rho;
    let standard = GaussianMoments::standard(dim);

    let mut strata_alphas = vec![-rho, 0.0, rho];
    strata_alphas.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut alpha_strata = Vec::new();
    let mut worst_cov_dev = 0.0f64;
    let mut all_ok = true;
    for &alpha in &strata_alphas {
        let mut acc = MomentAccumulator::new(dim);
        for _ in 0..n {
            let z = standard_normal(rng, &[dim]);
            let noise = standard_normal(rng, &[dim]);
            let z_star = apply_transport_pinned(&z, alpha, &noise)?;
            acc.push(&z_star)?;
        }
        let moments = acc.finish()?;
        let distance = normalized_latent_distance(&standard, &moments)?;
        let mean = moments.mean().iter().sum::<Real>() / dim as Real;
        let cov_dev = moments.cov_max_abs_dev_from_identity();
        worst_cov_dev = worst_cov_dev.max(cov_dev);
        all_ok &= distance <= rho + PROP1_DIST_TOL;
        all_ok &= (mean - alpha).abs() <= PROP1_MEAN_TOL;
        all_ok &= cov_dev <= PROP1_COV_TOL;
        alpha_strata.push(StratumReport {
            alpha,
            mean,
            normalized_distance: distance,
            cov_max_abs_dev: cov_dev,
        });
    }

    // alpha resampled per draw
    let mut acc = MomentAccumulator::new(dim);
    for i in 0..n {
        let z = standard_normal(rng, &[dim]);
        let (z_star, _) = apply_transport(&z, rho, rng, i)?;
        acc.push(&z_star)?;
    }
    let mixture = acc.finish()?;
    let mixture_distance = normalized_latent_distance(&standard, &mixture)?;
    all_ok &= mixture_distance <= rho + PROP1_DIST_TOL;

    Ok(Prop1Report {
        rho,
        dim,
        n,
        alpha_strata,
        normalized_distance: mixture_distance,
        cov_max_abs_dev: worst_cov_dev,
        pass: all_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pinned_transport_with_mean_noise() {
        // noise pinned at its mean (zero), alpha = 1/sqrt(2) so the offset is 1
        let z = Tensor::vector(&[1.0, 1.0]).unwrap();
        let noise = Tensor::zeros(&[2]);
        let alpha = 1.0 / SQRT_2;
        let out = apply_transport_pinned(&z, alpha, &noise).unwrap();
        for &v in out.data() {
            assert!((v - 1.4142135623730951).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_rho_rejected() {
        let z = Tensor::zeros(&[2]);
        let mut rng = SeededRng::new(1);
        assert!(apply_transport(&z, -0.1, &mut rng, 0).is_err());
        assert!(random_transform(-0.1, 2, &mut rng).is_err());
    }

    #[test]
    fn rho_zero_preserves_the_distribution() {
        let dim = 16;
        let n = 100_000;
        let mut rng = SeededRng::new(42);
        let mut acc = MomentAccumulator::new(dim);
        for i in 0..n {
            let z = standard_normal(&mut rng, &[dim]);
            let (z_star, rec) = apply_transport(&z, 0.0, &mut rng, i).unwrap();
            assert_eq!(rec.alpha, 0.0);
            acc.push(&z_star).unwrap();
        }
        let m = acc.finish().unwrap();
        for &mu in m.mean() {
            assert!(mu.abs() < 0.02, "mean {mu}");
        }
        assert!(m.cov_max_abs_dev_from_identity() < 0.03);
    }

    // Conditional on alpha the transported mean is alpha per coordinate;
    // over symmetric resampled alpha it averages to zero.
    #[test]
    fn stratified_means() {
        let dim = 16;
        let n = 100_000;
        let mut rng = SeededRng::new(7);
        let mut acc = MomentAccumulator::new(dim);
        for _ in 0..n {
            let z = standard_normal(&mut rng, &[dim]);
            let noise = standard_normal(&mut rng, &[dim]);
            acc.push(&apply_transport_pinned(&z, 0.3, &noise).unwrap())
                .unwrap();
        }
        let m = acc.finish().unwrap();
        let avg = m.mean().iter().sum::<f64>() / dim as f64;
        assert!((avg - 0.3).abs() < 0.02, "stratum mean {avg}");

        let mut acc = MomentAccumulator::new(dim);
        for i in 0..n {
            let z = standard_normal(&mut rng, &[dim]);
            let (z_star, rec) = apply_transport(&z, 0.3, &mut rng, i).unwrap();
            assert!(rec.alpha.abs() <= 0.3);
            acc.push(&z_star).unwrap();
        }
        let m = acc.finish().unwrap();
        let avg = m.mean().iter().sum::<f64>() / dim as f64;
        assert!(avg.abs() < 0.02, "resampled mean {avg}");
    }

    #[test]
    fn random_transform_moments_and_independence() {
        let dim = 16;
        let n = 100_000;
        let mut rng = SeededRng::new(3);
        // rho = 0: standard normal
        let mut acc = MomentAccumulator::new(dim);
        for _ in 0..n / 10 {
            acc.push(&random_transform(0.0, dim, &mut rng).unwrap())
                .unwrap();
        }
        let m = acc.finish().unwrap();
        assert!(m.mean().iter().all(|v| v.abs() < 0.05));

        // rho = 0.5: mean 0.5 per coordinate, uncorrelated with any source
        let mut acc = MomentAccumulator::new(dim);
        let mut sum_src = vec![0.0; dim];
        let mut sum_dst = vec![0.0; dim];
        let mut sum_cross = vec![0.0; dim];
        let mut sum_src_sq = vec![0.0; dim];
        let mut sum_dst_sq = vec![0.0; dim];
        for _ in 0..n {
            let z = standard_normal::<f64>(&mut rng, &[dim]);
            let out = random_transform(0.5, dim, &mut rng).unwrap();
            acc.push(&out).unwrap();
            for j in 0..dim {
                let (s, d) = (z.data()[j], out.data()[j]);
                sum_src[j] += s;
                sum_dst[j] += d;
                sum_cross[j] += s * d;
                sum_src_sq[j] += s * s;
                sum_dst_sq[j] += d * d;
            }
        }
        let m = acc.finish().unwrap();
        for &mu in m.mean() {
            assert!((mu - 0.5).abs() < 0.02, "mean {mu}");
        }
        let nf = n as f64;
        for j in 0..dim {
            let cov = sum_cross[j] / nf - sum_src[j] / nf * (sum_dst[j] / nf);
            let var_s = sum_src_sq[j] / nf - (sum_src[j] / nf).powi(2);
            let var_d = sum_dst_sq[j] / nf - (sum_dst[j] / nf).powi(2);
            let corr = cov / (var_s * var_d).sqrt();
            assert!(corr.abs() < 0.02, "corr {corr}");
        }
    }

    #[test]
    fn moments_of_antipodal_pair() {
        let v = Tensor::vector(&[1.0, -2.0]).unwrap();
        let m = estimate_moments(&[v.clone(), v.scale(-1.0)]).unwrap();
        assert_eq!(m.mean(), &[0.0, 0.0]);
        // unbiased covariance of {v, -v} is 2 v v^T
        let expected = [2.0, -4.0, -4.0, 8.0];
        for (a, b) in m.cov().data.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_of_constant_samples_have_zero_cov() {
        let v = Tensor::vector(&[0.5, 0.5, 0.5]).unwrap();
        let m = estimate_moments(&[v.clone(), v.clone(), v]).unwrap();
        assert!(m.cov().data.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn moments_need_two_samples() {
        let v = Tensor::vector(&[1.0]).unwrap();
        assert!(estimate_moments(&[v]).is_err());
    }

    #[test]
    fn w2_identical_moments_is_zero() {
        let a = GaussianMoments::new(vec![0.3, -0.1], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        assert!(gaussian_w2(&a, &a).unwrap().abs() < 1e-9);
    }

    // Closed forms evaluated by hand:
    //   N(0,I) vs N((0.5,0.5), I): sqrt(0.25 + 0.25) = 0.70710678
    //   d=1, equal means, vars 4 and 1: tr(4 + 1 - 2*2) = 1 -> distance 1
    //   Sa = [[2,1],[1,2]], Sb = I, equal means: sqrt((sqrt(3)-1)^2) = sqrt(3)-1
    #[test]
    fn w2_hand_computed_closed_forms() {
        let a = GaussianMoments::standard(2);
        let b = GaussianMoments::isotropic_shifted(2, 0.5);
        assert!((gaussian_w2(&a, &b).unwrap() - 0.7071067811865476).abs() < 1e-8);

        let a = GaussianMoments::new(vec![0.0], vec![4.0]).unwrap();
        let b = GaussianMoments::new(vec![0.0], vec![1.0]).unwrap();
        assert!((gaussian_w2(&a, &b).unwrap() - 1.0).abs() < 1e-8);

        let a = GaussianMoments::new(vec![0.0, 0.0], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let b = GaussianMoments::standard(2);
        let expected = 3.0f64.sqrt() - 1.0;
        assert!((gaussian_w2(&a, &b).unwrap() - expected).abs() < 1e-8);

        // same non-diagonal covariance on both sides: only the mean term remains
        let c = GaussianMoments::new(vec![1.0, 0.0], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((gaussian_w2(&a, &c).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn w2_is_symmetric() {
        let a = GaussianMoments::new(vec![0.0, 1.0], vec![1.5, 0.2, 0.2, 0.7]).unwrap();
        let b = GaussianMoments::new(vec![-1.0, 0.5], vec![0.9, -0.1, -0.1, 2.0]).unwrap();
        let ab = gaussian_w2(&a, &b).unwrap();
        let ba = gaussian_w2(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.0);
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let err = GaussianMoments::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let err = GaussianMoments::new(vec![0.0, 0.0], vec![1.0, 0.3, 0.1, 1.0]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn normalized_distance_is_alpha_in_any_dimension() {
        for dim in [2usize, 16, 64] {
            let a = GaussianMoments::standard(dim);
            for alpha in [0.0, 0.5, -0.8] {
                let b = GaussianMoments::isotropic_shifted(dim, alpha);
                let d = normalized_latent_distance(&a, &b).unwrap();
                assert!((d - alpha.abs()).abs() < 1e-10, "dim {dim} alpha {alpha}");
            }
        }
    }

    #[test]
    fn normalized_distance_rejects_dim_mismatch() {
        let a = GaussianMoments::standard(2);
        let b = GaussianMoments::standard(3);
        assert!(normalized_latent_distance(&a, &b).is_err());
    }

    #[test]
    fn proposition1_holds_at_half_budget() {
        let mut rng = SeededRng::new(11);
        let cfg = TransportConfig::new(0.5).unwrap();
        let report = verify_proposition1(&cfg, 16, 100_000, &mut rng).unwrap();
        assert!(report.pass, "{report:?}");
        let top = report
            .alpha_strata
            .iter()
            .find(|s| (s.alpha - 0.5).abs() < 1e-12)
            .unwrap();
        assert!((top.normalized_distance - 0.5).abs() < 0.03);
    }

    #[test]
    fn proposition1_rho_zero_distance_is_noise_level() {
        let mut rng = SeededRng::new(12);
        let cfg = TransportConfig::new(0.0).unwrap();
        let report = verify_proposition1(&cfg, 16, 100_000, &mut rng).unwrap();
        assert!(report.pass);
        assert!(report.normalized_distance <= 0.03);
    }

    #[test]
    fn proposition1_smallest_budget() {
        let mut rng = SeededRng::new(13);
        let cfg = TransportConfig::new(0.05).unwrap();
        let report = verify_proposition1(&cfg, 16, 100_000, &mut rng).unwrap();
        assert!(report.pass);
        assert!(report.normalized_distance <= 0.08);
    }

    #[test]
    fn proposition1_requires_enough_draws() {
        let mut rng = SeededRng::new(1);
        let cfg = TransportConfig::new(0.5).unwrap();
        assert!(verify_proposition1(&cfg, 4, 100, &mut rng).is_err());
    }

    proptest! {
        // Budget respect: |alpha| <= rho always.
        #[test]
        fn budget_respected(rho in 0.0f64..2.0, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let z = standard_normal(&mut rng, &[4]);
            let (_, rec) = apply_transport(&z, rho, &mut rng, 0).unwrap();
            prop_assert!(rec.alpha.abs() <= rho);
        }

        // w2 >= 0 and zero iff same moments (on a random PSD pair).
        #[test]
        fn w2_nonnegative(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let make = |rng: &mut SeededRng| {
                let m: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                // A^T A + eps I is PSD
                let a: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
                let mut cov = vec![0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += a[k * 3 + i] * a[k * 3 + j];
                        }
                        cov[i * 3 + j] = acc + if i == j { 1e-6 } else { 0.0 };
                    }
                }
                GaussianMoments::new(m, cov).unwrap()
            };
            let a = make(&mut rng);
            let b = make(&mut rng);
            let d = gaussian_w2(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            // self-distance is sqrt of a ~1e-12 rounding residual
            prop_assert!(gaussian_w2(&a, &a).unwrap() < 1e-5);
        }
    }
}
