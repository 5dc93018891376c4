//! Shared oracles for the integration suites: central finite differences
//! over the step functional, and small statistics helpers. Everything here
//! is forward-evaluation only — independent of the backward passes it checks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use uva_core::losses::LossWeights;
use uva_core::nn::{build_architecture, init_params, ArchitectureConfig, ModelParams};
use uva_core::tensor::{Scalar, Tensor};
use uva_core::train::{
    frozen_step_ctx, split_encoder_term_values, split_generator_term_values, step_forward,
    term_gradient, LossTerm, StepNoise,
};

pub const FD_H: f64 = 1e-5;

/// `|a − fd| / max(|a|, |fd|, floor)`: relative error with an absolute floor
/// absorbing the finite-difference rounding noise on near-zero components.
pub fn rel_err(a: f64, fd: f64, floor: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(floor)
}

/// Worst relative error found by one gradient-fidelity instance.
pub struct GradCheckReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Check the analytic gradient of all seven step objectives against central
/// finite differences over every parameter of the given configuration.
///
/// The finite-difference functional pins all stop-gradient paths to the
/// unperturbed parameters, matching the gradient-flow contract: for encoder
/// coordinates the generator-side terms are constant (their gradients are
/// asserted zero analytically), and vice versa.
pub fn check_step_term_gradients(
    acfg: &ArchitectureConfig,
    seed: u64,
    batch: usize,
    margin: f64,
    tol: f64,
) -> GradCheckReport {
    let arch = Arc::new(build_architecture(acfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params::<f64, _>(&arch, &mut rng);
    let c = acfg.latent_dim;
    let s = acfg.input_size;
    let x = Tensor::<f64>::randn(&[batch, 3, s, s], &mut rng).map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0));
    // Moderate ages keep the age-KL magnitude small enough for central
    // differences to resolve 1e-5 relative error in 64-bit.
    let ages: Vec<f64> = (0..batch)
        .map(|_| f64::uniform(&mut rng, 0.0, 8.0))
        .collect();
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let mut rng_c = ChaCha8Rng::seed_from_u64(seed ^ 0xA2A2);
    let noise = StepNoise::draw(batch, c, &mut rng, &mut rng_b, &mut rng_c);
    let w = LossWeights {
        margin_m: margin,
        ..LossWeights::default()
    };

    let fwd = step_forward(&params, &x, &ages, &noise, &w);
    let vals = *fwd.values();
    let analytic: Vec<(LossTerm, Vec<f64>)> = LossTerm::ALL
        .iter()
        .map(|&t| (t, term_gradient(&fwd, &params, t, &w)))
        .collect();

    let ctx = frozen_step_ctx(&params, &x, &noise);

    // The split functionals must reproduce the shared-parameter values.
    let base_e = split_encoder_term_values(&params, &ctx, &x, &ages, &noise);
    assert!((base_e.rec - vals.rec).abs() < 1e-9);
    assert!((base_e.age_kl - vals.age_kl).abs() < 1e-9);
    assert!((base_e.kl_real - vals.kl_real).abs() < 1e-9);
    assert!((base_e.kl_rec - vals.kl_rec).abs() < 1e-9);
    assert!((base_e.kl_sample - vals.kl_sample).abs() < 1e-9);
    let base_g = split_generator_term_values(&params, &params, &ctx, &x, &ages, &noise);
    assert!((base_g.rec - vals.rec).abs() < 1e-9);
    assert!((base_g.age_keep - vals.age_keep).abs() < 1e-9);

    let enc_len = arch.encoder_len();
    let total = arch.param_count();
    let errs: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| {
            let eval = |delta: f64| {
                let mut data = params.data().to_vec();
                data[i] += delta;
                let live = ModelParams::from_flat(&arch, data).unwrap();
                if i < enc_len {
                    split_encoder_term_values(&live, &ctx, &x, &ages, &noise)
                } else {
                    split_generator_term_values(&live, &params, &ctx, &x, &ages, &noise)
                }
            };
            let hi = eval(FD_H);
            let lo = eval(-FD_H);
            let mut worst: f64 = 0.0;
            for (term, grad) in &analytic {
                let a = grad[i];
                let (relevant, f_hi, f_lo) = match term {
                    LossTerm::Rec => (true, hi.rec, lo.rec),
                    LossTerm::AgeKl => (i < enc_len, hi.age_kl, lo.age_kl),
                    LossTerm::KlIrrel => (i < enc_len, hi.kl_real, lo.kl_real),
                    LossTerm::AdvE => (i < enc_len, hi.adv_e(&w), lo.adv_e(&w)),
                    LossTerm::AdvG => (i >= enc_len, hi.adv_g(), lo.adv_g()),
                    LossTerm::Reg => (i < enc_len, hi.reg, lo.reg),
                    LossTerm::AgeKeep => (i >= enc_len, hi.age_keep, lo.age_keep),
                };
                if relevant {
                    let fd = (f_hi - f_lo) / (2.0 * FD_H);
                    worst = worst.max(rel_err(a, fd, 1e-3));
                } else {
                    // Stop-gradient region: the analytic gradient must be
                    // exactly zero there.
                    assert_eq!(a, 0.0, "{} leaked into the frozen region", term.name());
                }
            }
            worst
        })
        .collect();

    let max_rel = errs.iter().copied().fold(0.0f64, f64::max);
    assert!(
        max_rel < tol,
        "gradient check failed: max relative error {max_rel:.3e} over {} parameters",
        total
    );
    GradCheckReport {
        max_rel,
        checked: total,
    }
}

/// Spearman rank correlation of two equal-length samples (average ranks on
/// ties), brute-force implementation for oracle use.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
