//! The three user-facing tasks over a trained model: age translation,
//! the two age-generation modes, and age estimation.
//!
//! All operations are pure functions of (parameters, inputs, rng seed).
//! `age_scale` is the linear label factor the model was trained with
//! (1.0 unless configured otherwise).

use rand::Rng;

use crate::error::{Result, UvaError};
use crate::nn::{validate_images, ModelParams};
use crate::tensor::{Scalar, Tensor};

pub const TRANSLATE_AGE_MAX: f64 = 120.0;

fn as_batch<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    match x.shape() {
        [_, _, _] => {
            let s = x.shape().to_vec();
            Ok(x.clone().reshaped(&[1, s[0], s[1], s[2]]))
        }
        [1, _, _, _] => Ok(x.clone()),
        other => Err(UvaError::invalid(format!(
            "expected a single [3, H, W] image, got {other:?}"
        ))),
    }
}

fn single<F: Scalar>(batch: Tensor<F>) -> Tensor<F> {
    let s = batch.shape().to_vec();
    batch.reshaped(&[s[1], s[2], s[3]])
}

fn check_target_age(age: f64) -> Result<()> {
    if !(0.0..=TRANSLATE_AGE_MAX).contains(&age) {
        return Err(UvaError::invalid(format!(
            "target age {age} outside [0, {TRANSLATE_AGE_MAX}]"
        )));
    }
    Ok(())
}

/// `[N, C]` draw from the age prior `N(scale·age·1, I)`; when
/// `deterministic`, the prior mean itself.
fn age_prior_rows<F: Scalar, R: Rng + ?Sized>(
    n: usize,
    c: usize,
    age: f64,
    age_scale: f64,
    deterministic: bool,
    rng: &mut R,
) -> Tensor<F> {
    let mean = F::from_f64(age * age_scale);
    let mut z = Tensor::full(&[n, c], mean);
    if !deterministic {
        for v in z.data_mut() {
            *v += F::std_normal(rng);
        }
    }
    z
}

/// Re-render the input at a target age: decode the input's sampled
/// age-irrelevant latent together with a draw from the target-age prior.
/// `deterministic` substitutes the prior mean for the age draw.
pub fn age_translate<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    target_age: f64,
    age_scale: f64,
    deterministic: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    Ok(single(age_translate_batch(
        params,
        &as_batch(x)?,
        target_age,
        age_scale,
        deterministic,
        rng,
    )?))
}

/// Batched [`age_translate`] over `[N, 3, H, W]`.
pub fn age_translate_batch<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    target_age: f64,
    age_scale: f64,
    deterministic: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    check_target_age(target_age)?;
    validate_images(params, x)?;
    let arch = params.arch().clone();
    let n = x.shape()[0];
    let c = params.cfg().latent_dim;
    let (out, _) = arch.encoder_forward(params, x);
    // z_I sampled from the posterior; ẑ_R from the target-age prior.
    let z_age = age_prior_rows(n, c, target_age, age_scale, deterministic, rng);
    let mut z_irrel = out.mu_irrel.clone();
    let half = F::from_f64(0.5);
    for (zv, &lv) in z_irrel
        .data_mut()
        .iter_mut()
        .zip(out.logvar_irrel.data().iter())
    {
        *zv += F::std_normal(rng) * (lv * half).exp();
    }
    let (img, _) = arch.generator_forward(params, &z_age, &z_irrel);
    Ok(img)
}

/// Generate a new image at a target age from prior noise alone.
pub fn age_generate_from_noise<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    target_age: f64,
    age_scale: f64,
    rng: &mut R,
) -> Result<Tensor<F>> {
    check_target_age(target_age)?;
    let arch = params.arch().clone();
    let c = params.cfg().latent_dim;
    let z_age = age_prior_rows(1, c, target_age, age_scale, false, rng);
    let z_irrel = Tensor::randn(&[1, c], rng);
    let (img, _) = arch.generator_forward(params, &z_age, &z_irrel);
    Ok(single(img))
}

/// Generate a new image sharing the input's age-related latent: z_R sampled
/// from the input's posterior, ẑ_I from the prior.
pub fn age_generate_conditioned<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let batch = as_batch(x)?;
    validate_images(params, &batch)?;
    let arch = params.arch().clone();
    let c = params.cfg().latent_dim;
    let (out, _) = arch.encoder_forward(params, &batch);
    let mut z_age = out.mu_age.clone();
    let half = F::from_f64(0.5);
    for (zv, &lv) in z_age
        .data_mut()
        .iter_mut()
        .zip(out.logvar_age.data().iter())
    {
        *zv += F::std_normal(rng) * (lv * half).exp();
    }
    let z_irrel = Tensor::randn(&[1, c], rng);
    let (img, _) = arch.generator_forward(params, &z_age, &z_irrel);
    Ok(single(img))
}

/// Estimate an image's age as the mean of the inferred age-latent mean
/// vector (descaled). Deterministic: no sampling is involved.
pub fn age_estimate<F: Scalar>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    age_scale: f64,
) -> Result<f64> {
    Ok(age_estimate_batch(params, &as_batch(x)?, age_scale)?[0])
}

/// Batched [`age_estimate`] over `[N, 3, H, W]`.
pub fn age_estimate_batch<F: Scalar>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    age_scale: f64,
) -> Result<Vec<f64>> {
    validate_images(params, x)?;
    let arch = params.arch().clone();
    let (out, _) = arch.encoder_forward(params, x);
    let c = x.shape()[0];
    let dim = params.cfg().latent_dim as f64;
    Ok((0..c)
        .map(|i| {
            out.mu_age.row(i).iter().map(|v| v.into_f64()).sum::<f64>() / dim / age_scale
        })
        .collect())
}
