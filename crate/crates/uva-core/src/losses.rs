//! Scalar training objectives: pixel reconstruction, the age/irrelevant KL
//! terms, the introspective adversarial hinge losses for encoder and
//! generator, and the age regularizers.
//!
//! Batch reduction is the arithmetic mean over samples everywhere, so loss
//! magnitudes are batch-size invariant.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UvaError};
use crate::tensor::{Scalar, Tensor};

/// Trade-off weights of the two totals plus the adversarial margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub alpha: f64,
    pub margin_m: f64,
    /// When set, the generator's adversarial term is additionally scaled by
    /// alpha (an alternative reading of the training procedure; off by
    /// default).
    #[serde(default)]
    pub alpha_on_generator: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            alpha: 0.5,
            margin_m: 1000.0,
            alpha_on_generator: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.alpha,
        ];
        if !all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(UvaError::invalid(
                "loss weights must be finite and nonnegative",
            ));
        }
        if !(self.margin_m.is_finite() && self.margin_m > 0.0) {
            return Err(UvaError::invalid("margin must be positive and finite"));
        }
        Ok(())
    }

    /// Effective multiplier of the generator adversarial term.
    pub fn generator_adv_weight(&self) -> f64 {
        if self.alpha_on_generator {
            self.lambda4 * self.alpha
        } else {
            self.lambda4
        }
    }
}

/// Scalar diagnostics of one training step. Disabled terms report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub age_kl: f64,
    pub kl_irrel: f64,
    pub adv_e: f64,
    pub adv_g: f64,
    pub reg: f64,
    pub age_keep: f64,
    pub total_e: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.rec,
            self.age_kl,
            self.kl_irrel,
            self.adv_e,
            self.adv_g,
            self.reg,
            self.age_keep,
            self.total_e,
            self.total_g,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-sample ½·Σ(x − x_r)² over all pixels/channels, averaged over the batch.
pub fn reconstruction_loss<F: Scalar>(x: &Tensor<F>, x_r: &Tensor<F>) -> Result<F> {
    if x.shape() != x_r.shape() {
        return Err(UvaError::invalid(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            x_r.shape()
        )));
    }
    if x.shape().len() != 4 {
        return Err(UvaError::invalid("expected a rank-4 image batch"));
    }
    let n = x.shape()[0];
    if n == 0 {
        return Err(UvaError::invalid("empty batch"));
    }
    let half = F::from_f64(0.5);
    let mut acc = F::zero();
    for (&a, &b) in x.data().iter().zip(x_r.data().iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(half * acc / F::from_f64(n as f64))
}

/// Gradient of [`reconstruction_loss`] with respect to `x_r`: `(x_r − x)/N`.
pub fn reconstruction_loss_grad<F: Scalar>(x: &Tensor<F>, x_r: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(x.shape(), x_r.shape());
    let inv_n = F::one() / F::from_f64(x.shape()[0] as f64);
    let data = x
        .data()
        .iter()
        .zip(x_r.data().iter())
        .map(|(&a, &b)| (b - a) * inv_n)
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// `[m − v]⁺ = max(0, m − v)`.
pub fn hinge<F: Scalar>(v: F, m: F) -> F {
    (m - v).max(F::zero())
}

/// Encoder-side adversarial loss:
/// `kl_real + α·([m − kl_rec]⁺ + [m − kl_sample]⁺)`.
///
/// The reconstruction/sample KLs are treated as constants of the generator;
/// gradient handling lives with the caller.
pub fn encoder_adversarial_loss<F: Scalar>(
    kl_real: F,
    kl_rec: F,
    kl_sample: F,
    w: &LossWeights,
) -> F {
    let m = F::from_f64(w.margin_m);
    let alpha = F::from_f64(w.alpha);
    kl_real + alpha * (hinge(kl_rec, m) + hinge(kl_sample, m))
}

/// Generator-side adversarial loss: `kl_rec + kl_sample`.
pub fn generator_adversarial_loss<F: Scalar>(kl_rec: F, kl_sample: F) -> F {
    kl_rec + kl_sample
}

/// `|mean(μ_R) − y|` for one sample.
pub fn age_regularization<F: Scalar>(mu_age: &[F], y: F) -> Result<F> {
    if mu_age.is_empty() {
        return Err(UvaError::invalid("empty age-mean vector"));
    }
    let c = F::from_f64(mu_age.len() as f64);
    let mean = mu_age.iter().copied().sum::<F>() / c;
    Ok((mean - y).abs())
}

/// `|mean(μ'_R) − y| + |mean(μ''_R) − y|` for one sample.
pub fn age_preserving_loss<F: Scalar>(mu_rec: &[F], mu_sample: &[F], y: F) -> Result<F> {
    Ok(age_regularization(mu_rec, y)? + age_regularization(mu_sample, y)?)
}

/// Weighted encoder total: `rec + λ1·age_kl + λ2·adv_E + λ3·reg`.
///
/// The irrelevant-part KL of the real data appears only inside `adv_E`.
pub fn total_encoder_loss(parts: &LossReport, w: &LossWeights) -> f64 {
    parts.rec + w.lambda1 * parts.age_kl + w.lambda2 * parts.adv_e + w.lambda3 * parts.reg
}

/// Weighted generator total: `rec + λ4·adv_G + λ5·age_keep`.
pub fn total_generator_loss(parts: &LossReport, w: &LossWeights) -> f64 {
    parts.rec + w.generator_adv_weight() * parts.adv_g + w.lambda5 * parts.age_keep
}

// ---------------------------------------------------------------------------
// Batched helpers over raw (mu, logvar) rows, used by the training step.
// ---------------------------------------------------------------------------

/// Batch-mean KL(q ‖ N(y·1, I)) from raw `[N, C]` mean/clamped-logvar rows.
/// `y` has one label per row; pass zeros for the standard prior.
pub fn kl_rows<F: Scalar>(mu: &Tensor<F>, logvar: &Tensor<F>, y: &[F]) -> F {
    let n = mu.shape()[0];
    debug_assert_eq!(logvar.shape(), mu.shape());
    debug_assert_eq!(y.len(), n);
    let half = F::from_f64(0.5);
    let mut acc = F::zero();
    for i in 0..n {
        let mrow = mu.row(i);
        let lrow = logvar.row(i);
        let mut s = F::zero();
        for (&m, &lv) in mrow.iter().zip(lrow.iter()) {
            let d = m - y[i];
            s += d * d + lv.exp() - lv - F::one();
        }
        acc += half * s;
    }
    acc / F::from_f64(n as f64)
}

/// Accumulate `scale · ∂kl_rows/∂(mu, logvar)` into gradient rows.
pub fn kl_rows_backward<F: Scalar>(
    mu: &Tensor<F>,
    logvar: &Tensor<F>,
    y: &[F],
    scale: F,
    dmu: &mut Tensor<F>,
    dlogvar: &mut Tensor<F>,
) {
    let n = mu.shape()[0];
    let half = F::from_f64(0.5);
    let k = scale / F::from_f64(n as f64);
    for i in 0..n {
        let mrow = mu.row(i);
        let lrow = logvar.row(i);
        let dm = dmu.row_mut(i);
        for ((&m, g), &yy) in mrow.iter().zip(dm.iter_mut()).zip(std::iter::repeat(&y[i])) {
            *g += k * (m - yy);
        }
        let dl = dlogvar.row_mut(i);
        for (&lv, g) in lrow.iter().zip(dl.iter_mut()) {
            *g += k * half * (lv.exp() - F::one());
        }
    }
}

/// Batch-mean `|mean(μ_R) − y|` from raw `[N, C]` rows.
pub fn age_reg_rows<F: Scalar>(mu: &Tensor<F>, y: &[F]) -> F {
    let n = mu.shape()[0];
    let c = F::from_f64(mu.shape()[1] as f64);
    let mut acc = F::zero();
    for i in 0..n {
        let mean = mu.row(i).iter().copied().sum::<F>() / c;
        acc += (mean - y[i]).abs();
    }
    acc / F::from_f64(n as f64)
}

/// Accumulate `scale · ∂age_reg_rows/∂mu` (subgradient 0 at ties).
pub fn age_reg_rows_backward<F: Scalar>(mu: &Tensor<F>, y: &[F], scale: F, dmu: &mut Tensor<F>) {
    let n = mu.shape()[0];
    let c = F::from_f64(mu.shape()[1] as f64);
    let k = scale / (F::from_f64(n as f64) * c);
    for i in 0..n {
        let mean = mu.row(i).iter().copied().sum::<F>() / c;
        let s = if mean > y[i] {
            k
        } else if mean < y[i] {
            -k
        } else {
            F::zero()
        };
        for g in dmu.row_mut(i) {
            *g += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn w(alpha: f64, m: f64) -> LossWeights {
        LossWeights {
            alpha,
            margin_m: m,
            ..LossWeights::default()
        }
    }

    #[test]
    fn reconstruction_identity_is_zero() {
        let x = Tensor::<f64>::full(&[2, 3, 2, 2], 0.7);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_brute_force_oracle() {
        // Brute force: 12 pixels each differing by 1 -> 0.5 * 12 = 6.
        let x = Tensor::<f64>::full(&[1, 3, 2, 2], 1.0);
        let y = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut brute = 0.0;
        for (&a, &b) in x.data().iter().zip(y.data().iter()) {
            brute += 0.5 * (a - b) * (a - b);
        }
        assert_eq!(brute, 6.0);
        assert_eq!(reconstruction_loss(&x, &y).unwrap(), 6.0);
    }

    #[test]
    fn reconstruction_batch_mean() {
        // Sample 0 contributes 6.0, sample 1 contributes 0.0 -> mean 3.0.
        let mut x = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        for v in &mut x.data_mut()[..12] {
            *v = 1.0;
        }
        let y = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        assert_eq!(reconstruction_loss(&x, &y).unwrap(), 3.0);
    }

    #[test]
    fn reconstruction_shape_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let y = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(
            reconstruction_loss(&x, &y),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(1500.0, 1000.0), 0.0);
        assert_eq!(hinge(0.0, 1000.0), 1000.0);
        assert_eq!(hinge(250.5, 1000.0), 749.5);
    }

    #[test]
    fn encoder_adv_examples() {
        assert_eq!(
            encoder_adversarial_loss(0.0, 1200.0, 1000.0, &w(0.5, 1000.0)),
            0.0
        );
        assert_eq!(
            encoder_adversarial_loss(10.0, 400.0, 900.0, &w(0.5, 1000.0)),
            360.0
        );
        assert_eq!(
            encoder_adversarial_loss(7.5, 400.0, 900.0, &w(0.0, 1000.0)),
            7.5
        );
    }

    #[test]
    fn generator_adv_examples() {
        assert_eq!(generator_adversarial_loss(0.0, 0.0), 0.0);
        assert_eq!(generator_adversarial_loss(400.0, 900.0), 1300.0);
        assert_eq!(
            generator_adversarial_loss(3.0, 11.0),
            generator_adversarial_loss(11.0, 3.0)
        );
    }

    #[test]
    fn age_reg_examples() {
        assert_eq!(age_regularization(&[33.0f64; 5], 33.0).unwrap(), 0.0);
        assert_eq!(age_regularization(&[30.0f64, 40.0], 33.0).unwrap(), 2.0);
        assert_eq!(
            age_regularization(&[40.0f64, 30.0], 33.0).unwrap(),
            age_regularization(&[30.0f64, 40.0], 33.0).unwrap()
        );
        assert!(matches!(
            age_regularization::<f64>(&[], 1.0),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn age_keep_examples() {
        assert_eq!(
            age_preserving_loss(&[34.0f64], &[34.0], 34.0).unwrap(),
            0.0
        );
        assert_eq!(
            age_preserving_loss(&[38.0f64], &[30.0], 34.0).unwrap(),
            8.0
        );
        let a = age_regularization(&[38.0f64], 34.0).unwrap();
        let b = age_regularization(&[30.0f64], 34.0).unwrap();
        assert_eq!(
            age_preserving_loss(&[38.0f64], &[30.0], 34.0).unwrap(),
            a + b
        );
    }

    #[test]
    fn totals_examples() {
        let parts = LossReport {
            rec: 6.0,
            age_kl: 2.0,
            adv_e: 360.0,
            reg: 2.0,
            adv_g: 1300.0,
            age_keep: 8.0,
            ..Default::default()
        };
        let weights = LossWeights::default();
        assert_eq!(total_encoder_loss(&parts, &weights), 370.0);
        assert_eq!(total_generator_loss(&parts, &weights), 1314.0);

        let zeroed = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_encoder_loss(&parts, &zeroed), 6.0);
        assert_eq!(total_generator_loss(&parts, &zeroed), 6.0);
        assert_eq!(total_encoder_loss(&LossReport::default(), &weights), 0.0);
        assert_eq!(total_generator_loss(&LossReport::default(), &weights), 0.0);
    }

    #[test]
    fn alpha_on_generator_scales_adv_g() {
        let parts = LossReport {
            adv_g: 100.0,
            ..Default::default()
        };
        let mut weights = LossWeights::default();
        weights.alpha_on_generator = true;
        assert_eq!(total_generator_loss(&parts, &weights), 50.0);
    }

    #[test]
    fn kl_rows_matches_scalar_form() {
        use crate::latent::{kl_age, GaussianDiag};
        let mu = Tensor::from_vec(&[2, 3], vec![1.0f64, -0.5, 2.0, 0.0, 0.3, -1.0]);
        let lv = Tensor::from_vec(&[2, 3], vec![0.2f64, -0.1, 0.0, 0.5, -0.5, 0.1]);
        let y = [4.0f64, 7.0];
        let mut expect = 0.0;
        for i in 0..2 {
            let g = GaussianDiag::from_mean_logvar(mu.row(i).to_vec(), lv.row(i)).unwrap();
            expect += kl_age(&g, y[i]).unwrap();
        }
        expect /= 2.0;
        assert_relative_eq!(kl_rows(&mu, &lv, &y), expect, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn encoder_adv_monotonicity(
            kl_real in 0.0..2000.0f64,
            kl_rec in 0.0..2000.0f64,
            kl_sample in 0.0..2000.0f64,
            bump in 0.0..500.0f64,
            alpha in 0.0..2.0f64,
            m in 1.0..2000.0f64,
        ) {
            let weights = w(alpha, m);
            let base = encoder_adversarial_loss(kl_real, kl_rec, kl_sample, &weights);
            // Nonincreasing in the generated-sample KLs.
            prop_assert!(encoder_adversarial_loss(kl_real, kl_rec + bump, kl_sample, &weights) <= base);
            prop_assert!(encoder_adversarial_loss(kl_real, kl_rec, kl_sample + bump, &weights) <= base);
            // Nondecreasing in the real KL.
            prop_assert!(encoder_adversarial_loss(kl_real + bump, kl_rec, kl_sample, &weights) >= base);
            prop_assert!(base >= 0.0 && base.is_finite());
        }

        #[test]
        fn losses_finite_nonnegative(
            vals in proptest::collection::vec(0.0..1.0f64, 24),
            y in 0.0..120.0f64,
        ) {
            let x = Tensor::from_vec(&[2, 3, 2, 2], vals.clone());
            let x_r = Tensor::from_vec(&[2, 3, 2, 2], vals.iter().rev().copied().collect());
            let rec = reconstruction_loss(&x, &x_r).unwrap();
            prop_assert!(rec.is_finite() && rec >= 0.0);
            let reg = age_regularization(&vals[..4], y).unwrap();
            prop_assert!(reg.is_finite() && reg >= 0.0);
            let keep = age_preserving_loss(&vals[..4], &vals[4..8], y).unwrap();
            prop_assert!(keep.is_finite() && keep >= 0.0);
        }
    }
}
