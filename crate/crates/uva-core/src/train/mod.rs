//! The full training procedure: alternating encoder/generator Adam updates,
//! seeded end to end, with checkpointing and a step-indexed loss log.

mod checkpoint;
pub mod step;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, LabeledImage};
use crate::error::{Result, UvaError};
use crate::losses::{total_encoder_loss, total_generator_loss, LossReport, LossWeights};
use crate::nn::{build_architecture, find_non_finite, init_params, ArchitectureConfig, ModelParams};
use crate::rng::{role_rng, Role};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::Checkpoint;
pub use step::{
    frozen_step_ctx, split_encoder_term_values, split_generator_term_values, split_term_values,
    step_forward, term_gradient, LossTerm, StepForward, StepNoise, TermVals,
};

/// Adam epsilon.
pub const ADAM_EPS: f64 = 1e-8;
/// Global-norm bound applied to both gradient bundles.
pub const GRAD_CLIP_NORM: f64 = 100.0;
/// Window of the optional moving-average plateau stop.
pub const EARLY_STOP_WINDOW: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic writes.
    pub checkpoint_every: usize,
    /// Linear factor applied to age labels before they enter the losses.
    pub age_scale: f64,
    /// Stop early once the windowed reconstruction average plateaus.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 28,
            steps: 0,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            age_scale: 1.0,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: the default optimizer settings with the margin
    /// recalibrated to the C=32 latent width.
    pub fn desk_preset() -> Self {
        TrainConfig {
            weights: LossWeights {
                margin_m: 120.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(UvaError::invalid("learning rate must be nonnegative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(UvaError::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(UvaError::invalid("batch size must be at least 1"));
        }
        if !(self.age_scale.is_finite() && self.age_scale > 0.0) {
            return Err(UvaError::invalid("age scale must be positive"));
        }
        self.weights.validate()
    }
}

/// First and second moment accumulators of one parameter region.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over a parameter slice.
pub fn adam_update<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = F::from_f64(1.0 - beta1.powi(t));
    let c2 = F::from_f64(1.0 - beta2.powi(t));
    let b1 = F::from_f64(beta1);
    let b2 = F::from_f64(beta2);
    let one_m_b1 = F::one() - b1;
    let one_m_b2 = F::one() - b2;
    let lr = F::from_f64(lr);
    let eps = F::from_f64(ADAM_EPS);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_m_b1 * g;
        *v = b2 * *v + one_m_b2 * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Scale a gradient slice so its L2 norm does not exceed `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut [F], max_norm: f64) {
    let sq: f64 = grads.iter().map(|g| g.into_f64() * g.into_f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
}

/// Mutable training state: parameters plus the two optimizers.
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub opt_e: AdamState<f32>,
    pub opt_g: AdamState<f32>,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>) -> Self {
        let enc_len = params.arch().encoder_len();
        let gen_len = params.data().len() - enc_len;
        Trainer {
            params,
            opt_e: AdamState::new(enc_len),
            opt_g: AdamState::new(gen_len),
        }
    }
}

/// One alternating step: encoder update from the encoder total, then
/// generator update from the generator total, both computed on the same
/// pre-update forward pass. `ages` are raw years.
pub fn train_step(
    trainer: &mut Trainer,
    x: &Tensor<f32>,
    ages: &[f64],
    cfg: &TrainConfig,
    noise: &StepNoise<f32>,
) -> Result<LossReport> {
    let w = &cfg.weights;
    let scaled: Vec<f32> = ages
        .iter()
        .map(|&a| (a * cfg.age_scale) as f32)
        .collect();
    if scaled.iter().any(|a| !a.is_finite()) {
        return Err(UvaError::invalid("non-finite age label"));
    }
    crate::nn::validate_images(&trainer.params, x)?;

    let fwd = step_forward(&trainer.params, x, &scaled, noise, w);
    let report = report_from(&fwd.vals, w);
    if !report.all_finite() {
        let what = failing_term(&report);
        return Err(UvaError::Divergence { what });
    }

    let arch = trainer.params.arch().clone();
    let enc_len = arch.encoder_len();
    let total = trainer.params.data().len();

    let mut grad_e = vec![0f32; total];
    fwd.backward_encoder(&trainer.params, &fwd.encoder_update_weights(w), &mut grad_e);
    let mut grad_g = vec![0f32; total];
    fwd.backward_generator(
        &trainer.params,
        &fwd.generator_update_weights(w),
        &mut grad_g,
    );

    if let Some(name) = find_non_finite(&arch, &grad_e[..enc_len], 0) {
        return Err(UvaError::Divergence {
            what: format!("gradient of {name}"),
        });
    }
    if let Some(name) = find_non_finite(&arch, &grad_g[enc_len..], enc_len) {
        return Err(UvaError::Divergence {
            what: format!("gradient of {name}"),
        });
    }

    clip_global_norm(&mut grad_e[..enc_len], GRAD_CLIP_NORM);
    adam_update(
        &mut trainer.params.data_mut()[..enc_len],
        &grad_e[..enc_len],
        &mut trainer.opt_e,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
    );
    clip_global_norm(&mut grad_g[enc_len..], GRAD_CLIP_NORM);
    adam_update(
        &mut trainer.params.data_mut()[enc_len..],
        &grad_g[enc_len..],
        &mut trainer.opt_g,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
    );

    if let Some(name) = trainer.params.find_non_finite() {
        return Err(UvaError::Divergence {
            what: format!("parameter {name}"),
        });
    }
    Ok(report)
}

/// Assemble the diagnostic report; disabled terms report exactly 0.
fn report_from(vals: &TermVals, w: &LossWeights) -> LossReport {
    let mut r = LossReport {
        rec: vals.rec,
        age_kl: if w.lambda1 > 0.0 { vals.age_kl } else { 0.0 },
        kl_irrel: vals.kl_real,
        adv_e: if w.lambda2 > 0.0 { vals.adv_e(w) } else { 0.0 },
        adv_g: if w.lambda4 > 0.0 { vals.adv_g() } else { 0.0 },
        reg: if w.lambda3 > 0.0 { vals.reg } else { 0.0 },
        age_keep: if w.lambda5 > 0.0 { vals.age_keep } else { 0.0 },
        total_e: 0.0,
        total_g: 0.0,
    };
    r.total_e = total_encoder_loss(&r, w);
    r.total_g = total_generator_loss(&r, w);
    r
}

fn failing_term(r: &LossReport) -> String {
    for (name, v) in [
        ("rec", r.rec),
        ("age_kl", r.age_kl),
        ("kl_irrel", r.kl_irrel),
        ("adv_E", r.adv_e),
        ("adv_G", r.adv_g),
        ("reg", r.reg),
        ("age_keep", r.age_keep),
        ("total_E", r.total_e),
        ("total_G", r.total_g),
    ] {
        if !v.is_finite() {
            return format!("loss term {name}");
        }
    }
    "loss".into()
}

pub const LOSS_CSV_HEADER: &str =
    "step,rec,age_kl,kl_irrel,adv_E,adv_G,reg,age_keep,total_E,total_G";

fn csv_row(step: usize, r: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        step, r.rec, r.age_kl, r.kl_irrel, r.adv_e, r.adv_g, r.reg, r.age_keep, r.total_e, r.total_g
    )
}

/// Run the full loop. Everything (init, shuffling, noise) derives from
/// `tcfg.seed`. When `out_dir` is given, writes `loss.csv`, periodic
/// `ckpt-<step>.uva` files and a final `ckpt-final.uva`.
pub fn train_loop(
    dataset: &[LabeledImage],
    acfg: &ArchitectureConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<LossReport>)> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(UvaError::invalid("empty dataset"));
    }
    let arch = Arc::new(build_architecture(acfg)?);
    let s = acfg.input_size;
    if dataset[0].image.shape() != [3, s, s] {
        return Err(UvaError::invalid(format!(
            "dataset images are {:?}, model expects [3, {s}, {s}]",
            dataset[0].image.shape()
        )));
    }

    let params = init_params::<f32, _>(&arch, &mut role_rng(tcfg.seed, Role::Init));
    let mut trainer = Trainer::new(params);
    let mut log = Vec::with_capacity(tcfg.steps);

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| UvaError::io(dir, e))?;
            let path = dir.join("loss.csv");
            let f = std::fs::File::create(&path).map_err(|e| UvaError::io(&path, e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| UvaError::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    if tcfg.steps > 0 {
        let data = Arc::new(dataset.to_vec());
        let bpe = data.len() / tcfg.batch_size;
        if bpe == 0 {
            return Err(UvaError::Data(format!(
                "dataset of {} items cannot fill a batch of {}",
                data.len(),
                tcfg.batch_size
            )));
        }
        let epochs = tcfg.steps.div_ceil(bpe) + 1;
        let mut batches = BatchIter::new(data, tcfg.batch_size, tcfg.seed, epochs)?;
        let mut rng_age = role_rng(tcfg.seed, Role::EpsAge);
        let mut rng_irrel = role_rng(tcfg.seed, Role::EpsIrrel);
        let mut rng_prior = role_rng(tcfg.seed, Role::Prior);
        let c = acfg.latent_dim;

        for step in 1..=tcfg.steps {
            let (x, ages) = batches.next().expect("epoch budget covers all steps");
            let noise = StepNoise::draw(
                tcfg.batch_size,
                c,
                &mut rng_age,
                &mut rng_irrel,
                &mut rng_prior,
            );
            let report = train_step(&mut trainer, &x, &ages, tcfg, &noise)?;
            if let Some((w, path)) = &mut csv {
                writeln!(w, "{}", csv_row(step, &report))
                    .map_err(|e| UvaError::io(path.clone(), e))?;
            }
            log.push(report);

            if tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every == 0 {
                if let Some(dir) = out_dir {
                    let ckpt = Checkpoint::from_trainer(acfg, tcfg, step as u64, &trainer);
                    ckpt.save(&dir.join(format!("ckpt-{step:06}.uva")))?;
                }
            }
            if tcfg.early_stop && step >= 2 * EARLY_STOP_WINDOW {
                let recent = mean_rec(&log[step - EARLY_STOP_WINDOW..step]);
                let prev = mean_rec(&log[step - 2 * EARLY_STOP_WINDOW..step - EARLY_STOP_WINDOW]);
                if prev.is_finite() && prev > 0.0 && (prev - recent) / prev < 1e-3 {
                    break;
                }
            }
        }
    }

    let ckpt = Checkpoint::from_trainer(acfg, tcfg, log.len() as u64, &trainer);
    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("ckpt-final.uva"))?;
    }
    if let Some((w, path)) = &mut csv {
        w.flush().map_err(|e| UvaError::io(path.clone(), e))?;
    }
    Ok((ckpt, log))
}

fn mean_rec(window: &[LossReport]) -> f64 {
    window.iter().map(|r| r.rec).sum::<f64>() / window.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_update(&mut p, &g, &mut st, 0.1, 0.9, 0.99);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_descends_monotonically_on_constant_gradient() {
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..50 {
            adam_update(&mut p, &[1.0], &mut st, 0.1, 0.9, 0.99);
            assert!(p[0] < last, "{} !< {last}", p[0]);
            last = p[0];
        }
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // Hand-evaluated recurrences: m=0.1, v=0.01, mhat=1, vhat=1,
        // step = -lr/(1+eps) ≈ -0.1.
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        adam_update(&mut p, &[1.0], &mut st, 0.1, 0.9, 0.99);
        assert_relative_eq!(p[0], -0.1, max_relative = 1e-6);
    }

    #[test]
    fn clip_caps_norm() {
        let mut g = vec![3.0f64, 4.0];
        clip_global_norm(&mut g, 1.0);
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert_relative_eq!(norm, 1.0, max_relative = 1e-12);
        let mut g = vec![0.3f64, 0.4];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.weights.margin_m = 0.0;
        assert!(cfg.validate().is_err());
    }
}
