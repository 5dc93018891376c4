//! Diagonal-Gaussian latents: reparameterized sampling, the closed-form KL
//! against the standard prior `N(0, I)`, and the KL against the age prior
//! `N(y·1, I)`.
//!
//! The encoder produces log-variance internally and exponentiates half of it,
//! so stddev is positive by construction; log-variances are clamped to
//! [`LOGVAR_CLAMP`] before exponentiation.

use rand::Rng;

use crate::error::{Result, UvaError};
use crate::tensor::Scalar;

/// Log-variance magnitude bound applied before exponentiation.
pub const LOGVAR_CLAMP: f64 = 20.0;

/// Diagonal Gaussian over a C-dimensional latent.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<F> {
    pub mean: Vec<F>,
    pub stddev: Vec<F>,
}

impl<F: Scalar> GaussianDiag<F> {
    /// Validates: equal lengths, finite mean, strictly positive finite stddev.
    pub fn new(mean: Vec<F>, stddev: Vec<F>) -> Result<Self> {
        let g = GaussianDiag { mean, stddev };
        g.validate()?;
        Ok(g)
    }

    /// Build from a raw (mean, log-variance) pair, clamping the log-variance.
    pub fn from_mean_logvar(mean: Vec<F>, logvar: &[F]) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(UvaError::invalid(format!(
                "mean has {} coordinates but logvar has {}",
                mean.len(),
                logvar.len()
            )));
        }
        let stddev = logvar
            .iter()
            .map(|&lv| (clamp_logvar(lv) * F::from_f64(0.5)).exp())
            .collect();
        GaussianDiag::new(mean, stddev)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.stddev.len() {
            return Err(UvaError::invalid(format!(
                "mean has {} coordinates but stddev has {}",
                self.mean.len(),
                self.stddev.len()
            )));
        }
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(UvaError::invalid("non-finite mean coordinate"));
        }
        if !self
            .stddev
            .iter()
            .all(|v| v.is_finite() && *v > F::zero())
        {
            return Err(UvaError::invalid(
                "stddev must be strictly positive and finite",
            ));
        }
        Ok(())
    }

    /// Standard normal of dimension `c`.
    pub fn standard(c: usize) -> Self {
        GaussianDiag {
            mean: vec![F::zero(); c],
            stddev: vec![F::one(); c],
        }
    }
}

/// Clamp a raw log-variance into the numerically safe band.
#[inline]
pub fn clamp_logvar<F: Scalar>(lv: F) -> F {
    let hi = F::from_f64(LOGVAR_CLAMP);
    lv.min(hi).max(-hi)
}

/// The (age-related, age-irrelevant) posterior pair inferred from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledPosterior<F> {
    pub age: GaussianDiag<F>,
    pub irrel: GaussianDiag<F>,
}

impl<F: Scalar> DisentangledPosterior<F> {
    pub fn new(age: GaussianDiag<F>, irrel: GaussianDiag<F>) -> Result<Self> {
        if age.dim() != irrel.dim() {
            return Err(UvaError::invalid(format!(
                "age part has C={} but irrelevant part has C={}",
                age.dim(),
                irrel.dim()
            )));
        }
        Ok(DisentangledPosterior { age, irrel })
    }

    pub fn dim(&self) -> usize {
        self.age.dim()
    }
}

/// One reparameterized draw from a disentangled posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<F> {
    pub z_age: Vec<F>,
    pub z_irrel: Vec<F>,
}

/// `z = mean + eps ⊙ stddev`.
pub fn reparameterize<F: Scalar>(g: &GaussianDiag<F>, eps: &[F]) -> Result<Vec<F>> {
    g.validate()?;
    if eps.len() != g.dim() {
        return Err(UvaError::invalid(format!(
            "eps has {} coordinates, distribution has {}",
            eps.len(),
            g.dim()
        )));
    }
    Ok(g.mean
        .iter()
        .zip(g.stddev.iter())
        .zip(eps.iter())
        .map(|((&m, &s), &e)| m + e * s)
        .collect())
}

/// KL(q ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1). Nonnegative.
pub fn kl_standard<F: Scalar>(g: &GaussianDiag<F>) -> Result<F> {
    kl_age(g, F::zero())
}

/// KL(q ‖ N(y·1, I)) = ½ Σ ((μ − y)² + σ² − log σ² − 1).
///
/// Equals [`kl_standard`] applied to the mean-shifted distribution.
pub fn kl_age<F: Scalar>(g: &GaussianDiag<F>, y: F) -> Result<F> {
    g.validate()?;
    if !y.is_finite() {
        return Err(UvaError::invalid("age label must be finite"));
    }
    let half = F::from_f64(0.5);
    let mut acc = F::zero();
    for (&m, &s) in g.mean.iter().zip(g.stddev.iter()) {
        let d = m - y;
        let var = s * s;
        acc += d * d + var - var.ln() - F::one();
    }
    Ok(half * acc)
}

/// Analytic gradient of [`kl_standard`] with respect to (mean, stddev):
/// `(μ, σ − 1/σ)`.
pub fn kl_standard_grad<F: Scalar>(g: &GaussianDiag<F>) -> Result<(Vec<F>, Vec<F>)> {
    kl_age_grad(g, F::zero())
}

/// Analytic gradient of [`kl_age`]: `(μ − y, σ − 1/σ)`.
pub fn kl_age_grad<F: Scalar>(g: &GaussianDiag<F>, y: F) -> Result<(Vec<F>, Vec<F>)> {
    g.validate()?;
    let dmean = g.mean.iter().map(|&m| m - y).collect();
    let dstd = g.stddev.iter().map(|&s| s - s.recip()).collect();
    Ok((dmean, dstd))
}

/// Draw from the age prior `N(y·1, I)`.
pub fn sample_age_prior<F: Scalar, R: Rng + ?Sized>(y: F, c: usize, rng: &mut R) -> Result<Vec<F>> {
    if c == 0 {
        return Err(UvaError::invalid("latent dimension must be at least 1"));
    }
    if !y.is_finite() {
        return Err(UvaError::invalid("age must be finite"));
    }
    Ok((0..c).map(|_| y + F::std_normal(rng)).collect())
}

/// Draw from the age-irrelevant prior `N(0, I)`.
pub fn sample_irrel_prior<F: Scalar, R: Rng + ?Sized>(c: usize, rng: &mut R) -> Result<Vec<F>> {
    sample_age_prior(F::zero(), c, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{role_rng, Role};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Monte-Carlo KL oracle: E_q[log q(z) − log p(z)] with q, p diagonal
    /// Gaussians, estimated from `n` reparameterized draws. Independent of
    /// the closed forms above.
    fn mc_kl(
        q_mean: &[f64],
        q_std: &[f64],
        p_mean: &[f64],
        p_std: &[f64],
        n: usize,
        seed: u64,
    ) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = q_mean.len();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut ll = 0.0;
            for i in 0..c {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = q_mean[i] + e * q_std[i];
                let lq = -0.5 * e * e - q_std[i].ln();
                let dp = (z - p_mean[i]) / p_std[i];
                let lp = -0.5 * dp * dp - p_std[i].ln();
                ll += lq - lp;
            }
            sum += ll;
            sum_sq += ll * ll;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn reparameterize_zero_noise_is_identity() {
        let g = GaussianDiag::new(vec![0.0f64, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn reparameterize_direct_arithmetic() {
        // mu + eps*sigma per coordinate: [2+0.5, -1-3]
        let g = GaussianDiag::new(vec![2.0f64, -1.0], vec![0.5, 3.0]).unwrap();
        assert_eq!(reparameterize(&g, &[1.0, -1.0]).unwrap(), vec![2.5, -4.0]);
    }

    #[test]
    fn reparameterize_dimension_mismatch_errors() {
        let g = GaussianDiag::new(vec![0.0f64], vec![1.0]).unwrap();
        assert!(matches!(
            reparameterize(&g, &[0.0, 0.0]),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn reparameterize_moments_match_distribution() {
        let g = GaussianDiag::new(vec![3.0f64], vec![2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = reparameterize(&g, &[e]).unwrap()[0];
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * 2.0 / 1e3, "mean {mean}");
        assert!((std - 2.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn kl_standard_zero_at_prior() {
        let g = GaussianDiag::<f64>::standard(4);
        assert_eq!(kl_standard(&g).unwrap(), 0.0);
    }

    #[test]
    fn kl_standard_matches_monte_carlo() {
        // Frozen from the MC oracle: KL(N(1,1) || N(0,1)) -> 0.5,
        // KL(N(0,4) || N(0,1)) -> (4 - ln 4 - 1)/2.
        let g = GaussianDiag::new(vec![1.0f64], vec![1.0]).unwrap();
        let (mc, se) = mc_kl(&[1.0], &[1.0], &[0.0], &[1.0], 1_000_000, 11);
        assert!((mc - 0.5).abs() < 3.0 * se);
        assert_relative_eq!(kl_standard(&g).unwrap(), 0.5, max_relative = 1e-12);

        let g = GaussianDiag::new(vec![0.0f64], vec![2.0]).unwrap();
        let expect = 0.5 * (4.0 - 4.0f64.ln() - 1.0);
        let (mc, se) = mc_kl(&[0.0], &[2.0], &[0.0], &[1.0], 1_000_000, 12);
        assert!((mc - expect).abs() < 3.0 * se);
        assert_relative_eq!(kl_standard(&g).unwrap(), expect, max_relative = 1e-12);
        assert_relative_eq!(expect, 0.80685, max_relative = 1e-4);
    }

    #[test]
    fn kl_age_examples() {
        let g = GaussianDiag::new(vec![35.0f64; 2], vec![1.0; 2]).unwrap();
        assert_eq!(kl_age(&g, 35.0).unwrap(), 0.0);

        // KL(N(3,1) || N(1,1)) = 2.0, cross-checked against the MC oracle.
        let g = GaussianDiag::new(vec![3.0f64], vec![1.0]).unwrap();
        let (mc, se) = mc_kl(&[3.0], &[1.0], &[1.0], &[1.0], 1_000_000, 13);
        assert!((mc - 2.0).abs() < 3.0 * se);
        assert_relative_eq!(kl_age(&g, 1.0).unwrap(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn kl_age_equals_shifted_kl_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = 4;
            let mean: Vec<f64> = (0..c).map(|_| f64::uniform(&mut rng, -2.0, 2.0)).collect();
            let std: Vec<f64> = (0..c).map(|_| f64::uniform(&mut rng, 0.5, 2.0)).collect();
            let y = f64::uniform(&mut rng, 0.0, 100.0);
            let g = GaussianDiag::new(mean.clone(), std.clone()).unwrap();
            let shifted =
                GaussianDiag::new(mean.iter().map(|m| m - y).collect(), std.clone()).unwrap();
            assert_eq!(kl_age(&g, y).unwrap(), kl_standard(&shifted).unwrap());
            assert_eq!(kl_age(&g, 0.0).unwrap(), kl_standard(&g).unwrap());
        }
    }

    #[test]
    fn kl_nonnegative_zero_only_at_prior() {
        let g = GaussianDiag::new(vec![0.0f64, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(kl_standard(&g).unwrap().abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mean: Vec<f64> = (0..3).map(|_| f64::uniform(&mut rng, -2.0, 2.0)).collect();
            let std: Vec<f64> = (0..3).map(|_| f64::uniform(&mut rng, 0.5, 2.0)).collect();
            let depart = mean.iter().any(|m| m.abs() > 1e-6)
                || std.iter().any(|s| (s - 1.0).abs() > 1e-6);
            let g = GaussianDiag::new(mean, std).unwrap();
            let kl = kl_standard(&g).unwrap();
            assert!(kl >= 0.0);
            if depart {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn kl_rejects_nonpositive_stddev() {
        let g = GaussianDiag {
            mean: vec![0.0f64],
            stddev: vec![0.0],
        };
        assert!(matches!(kl_standard(&g), Err(UvaError::InvalidArgument(_))));
        let g = GaussianDiag {
            mean: vec![0.0f64],
            stddev: vec![-1.0],
        };
        assert!(matches!(kl_age(&g, 1.0), Err(UvaError::InvalidArgument(_))));
    }

    #[test]
    fn kl_grads_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        // Moderate y keeps the KL magnitude small enough that central
        // differences resolve 1e-6 relative error; the y-shift identity test
        // covers the full label range.
        for _ in 0..20 {
            let c = 4;
            let mean: Vec<f64> = (0..c).map(|_| f64::uniform(&mut rng, -2.0, 2.0)).collect();
            let std: Vec<f64> = (0..c).map(|_| f64::uniform(&mut rng, 0.5, 2.0)).collect();
            let y = f64::uniform(&mut rng, 0.0, 6.0);
            let g = GaussianDiag::new(mean.clone(), std.clone()).unwrap();
            let (dm, ds) = kl_age_grad(&g, y).unwrap();
            for i in 0..c {
                let mut lo = g.clone();
                let mut hi = g.clone();
                lo.mean[i] -= h;
                hi.mean[i] += h;
                let fd = (kl_age(&hi, y).unwrap() - kl_age(&lo, y).unwrap()) / (2.0 * h);
                assert_relative_eq!(dm[i], fd, max_relative = 1e-6, epsilon = 1e-9);

                let mut lo = g.clone();
                let mut hi = g.clone();
                lo.stddev[i] -= h;
                hi.stddev[i] += h;
                let fd = (kl_age(&hi, y).unwrap() - kl_age(&lo, y).unwrap()) / (2.0 * h);
                assert_relative_eq!(ds[i], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn age_prior_moments_and_determinism() {
        let mut rng = role_rng(3, Role::Prior);
        let n = 100_000usize;
        let c = 4;
        let mut sums = vec![0.0f64; c];
        for _ in 0..n {
            let z = sample_age_prior(60.0f64, c, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(z.iter()) {
                *s += v;
            }
        }
        for s in &sums {
            let mean = s / n as f64;
            assert!((mean - 60.0).abs() < 3.0 / (n as f64).sqrt() * 3.0, "{mean}");
        }

        let mut a = role_rng(8, Role::Prior);
        let mut b = role_rng(8, Role::Prior);
        assert_eq!(
            sample_age_prior(60.0f64, 4, &mut a).unwrap(),
            sample_age_prior(60.0f64, 4, &mut b).unwrap()
        );
        assert!(matches!(
            sample_age_prior(60.0f64, 0, &mut a),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn irrel_prior_moments_covariance_identity() {
        let mut rng = role_rng(4, Role::Prior);
        let n = 100_000usize;
        let c = 3;
        let mut sums = vec![0.0f64; c];
        let mut cov = vec![0.0f64; c * c];
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_irrel_prior(c, &mut rng).unwrap())
            .collect();
        for z in &draws {
            for i in 0..c {
                sums[i] += z[i];
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        for z in &draws {
            for i in 0..c {
                for j in 0..c {
                    cov[i * c + j] += (z[i] - means[i]) * (z[j] - means[j]);
                }
            }
        }
        for i in 0..c {
            assert!(means[i].abs() < 3.0 / (n as f64).sqrt() * 3.0);
            for j in 0..c {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i * c + j] / n as f64 - expected).abs() < 0.05);
            }
        }
    }

    /// Two-sample Kolmogorov–Smirnov check: with y=0 the age prior must be
    /// indistinguishable from the standard normal at alpha = 0.01.
    #[test]
    fn age_prior_at_zero_matches_standard_normal_ks() {
        let n = 10_000usize;
        let mut rng_a = role_rng(21, Role::Prior);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        let mut a: Vec<f64> = (0..n)
            .map(|_| sample_age_prior(0.0f64, 1, &mut rng_a).unwrap()[0])
            .collect();
        let mut b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng_b)).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // Max CDF gap over the pooled sample.
        let mut d: f64 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < n {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let gap = (i as f64 / n as f64 - j as f64 / n as f64).abs();
            d = d.max(gap);
        }
        // c(0.01) = 1.628 for the two-sample statistic.
        let crit = 1.628 * ((n + n) as f64 / (n * n) as f64).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }

    #[test]
    fn from_mean_logvar_clamps() {
        let g = GaussianDiag::from_mean_logvar(vec![0.0f64], &[1000.0]).unwrap();
        assert!(g.stddev[0].is_finite());
        assert_relative_eq!(g.stddev[0], (10.0f64).exp(), max_relative = 1e-12);
    }
}
