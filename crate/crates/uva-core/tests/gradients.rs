//! Finite-difference verification of the network backward passes on the
//! 8×8 / C=4 test configuration.

mod common;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{rel_err, FD_H};
use uva_core::nn::{build_architecture, init_params, ArchitectureConfig, EncOutGrad, ModelParams};
use uva_core::tensor::Tensor;

fn weighted_sum(parts: &[(&Tensor<f64>, &Tensor<f64>)]) -> f64 {
    parts
        .iter()
        .flat_map(|(t, c)| t.data().iter().zip(c.data().iter()))
        .map(|(a, b)| a * b)
        .sum()
}

/// Scalar probe of the encoder: fixed random cotangents over all four
/// output heads.
#[test]
fn encoder_gradients_match_finite_differences() {
    let acfg = ArchitectureConfig::test_8x8();
    let arch = Arc::new(build_architecture(&acfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let params = init_params::<f64, _>(&arch, &mut rng);
    let x = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng).map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0));
    let cot = EncOutGrad {
        mu_age: Tensor::randn(&[2, 4], &mut rng),
        logvar_age: Tensor::randn(&[2, 4], &mut rng),
        mu_irrel: Tensor::randn(&[2, 4], &mut rng),
        logvar_irrel: Tensor::randn(&[2, 4], &mut rng),
    };
    let probe = |p: &ModelParams<f64>, input: &Tensor<f64>| -> f64 {
        let (out, _) = arch.encoder_forward(p, input);
        weighted_sum(&[
            (&out.mu_age, &cot.mu_age),
            (&out.logvar_age, &cot.logvar_age),
            (&out.mu_irrel, &cot.mu_irrel),
            (&out.logvar_irrel, &cot.logvar_irrel),
        ])
    };

    let (_, cache) = arch.encoder_forward(&params, &x);
    let mut grads = vec![0.0f64; arch.param_count()];
    let dx = arch
        .encoder_backward(&params, &cache, &cot, Some(&mut grads), true)
        .unwrap();

    let enc_len = arch.encoder_len();
    let worst_p = (0..enc_len)
        .into_par_iter()
        .map(|i| {
            let eval = |d: f64| {
                let mut data = params.data().to_vec();
                data[i] += d;
                probe(&ModelParams::from_flat(&arch, data).unwrap(), &x)
            };
            let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
            rel_err(grads[i], fd, 1e-3)
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst_p < 1e-5, "parameter gradients off by {worst_p:.3e}");
    assert!(
        grads[enc_len..].iter().all(|&g| g == 0.0),
        "encoder backward touched generator parameters"
    );

    let worst_x = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let eval = |d: f64| {
                let mut xx = x.clone();
                xx.data_mut()[i] += d;
                probe(&params, &xx)
            };
            let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
            rel_err(dx.data()[i], fd, 1e-3)
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst_x < 1e-5, "input gradients off by {worst_x:.3e}");
}

/// Scalar probe of the generator: fixed random cotangent over the image.
#[test]
fn generator_gradients_match_finite_differences() {
    let acfg = ArchitectureConfig::test_8x8();
    let arch = Arc::new(build_architecture(&acfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let params = init_params::<f64, _>(&arch, &mut rng);
    let z_age = Tensor::<f64>::randn(&[2, 4], &mut rng);
    let z_irrel = Tensor::<f64>::randn(&[2, 4], &mut rng);
    let cot = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng);
    let probe = |p: &ModelParams<f64>, za: &Tensor<f64>, zi: &Tensor<f64>| -> f64 {
        let (img, _) = arch.generator_forward(p, za, zi);
        img.data()
            .iter()
            .zip(cot.data().iter())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (_, cache) = arch.generator_forward(&params, &z_age, &z_irrel);
    let mut grads = vec![0.0f64; arch.param_count()];
    let (dz_age, dz_irrel) = arch
        .generator_backward(&params, &cache, &cot, Some(&mut grads), true)
        .unwrap();

    let enc_len = arch.encoder_len();
    let worst_p = (enc_len..arch.param_count())
        .into_par_iter()
        .map(|i| {
            let eval = |d: f64| {
                let mut data = params.data().to_vec();
                data[i] += d;
                probe(
                    &ModelParams::from_flat(&arch, data).unwrap(),
                    &z_age,
                    &z_irrel,
                )
            };
            let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
            rel_err(grads[i], fd, 1e-3)
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst_p < 1e-5, "parameter gradients off by {worst_p:.3e}");
    assert!(
        grads[..enc_len].iter().all(|&g| g == 0.0),
        "generator backward touched encoder parameters"
    );

    for (dz, z, which) in [(&dz_age, &z_age, "age"), (&dz_irrel, &z_irrel, "irrel")] {
        let worst = (0..z.len())
            .into_par_iter()
            .map(|i| {
                let eval = |d: f64| {
                    let mut zz = z.clone();
                    zz.data_mut()[i] += d;
                    if which == "age" {
                        probe(&params, &zz, &z_irrel)
                    } else {
                        probe(&params, &z_age, &zz)
                    }
                };
                let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
                rel_err(dz.data()[i], fd, 1e-3)
            })
            .reduce(|| 0.0, f64::max);
        assert!(worst < 1e-5, "latent ({which}) gradients off by {worst:.3e}");
    }
}

/// One full instance of the per-term step gradient check (the acceptance
/// suite runs ten).
#[test]
fn step_term_gradients_single_instance() {
    let report = common::check_step_term_gradients(
        &ArchitectureConfig::test_8x8(),
        4242,
        2,
        5.0,
        1e-5,
    );
    assert!(report.checked > 5000);
}
