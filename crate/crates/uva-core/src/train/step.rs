//! One alternating-update step, decomposed so the same machinery serves
//! training and gradient verification.
//!
//! Per step the model runs: encode x; draw z_R, z_I by reparameterization and
//! ẑ_I from the prior; decode the reconstruction x_r = G(z_R, z_I) and the
//! new sample x_s = G(z_R, ẑ_I); re-encode x_r and x_s. The scalar terms are
//!
//! - `rec`      — pixel reconstruction of x_r against x,
//! - `age_kl`   — KL of the age posterior against N(y·1, I),
//! - `kl_real`  — KL of the irrelevant posterior against N(0, I),
//! - `kl_rec`, `kl_sample` — the same KL on the re-encoded x_r, x_s,
//! - `reg`      — |mean(μ_R) − y|,
//! - `age_keep` — the same on both re-encodes.
//!
//! Gradient-flow contract: the encoder's adversarial hinge terms treat x_r
//! and x_s as constants (no path back through G), while the generator's
//! adversarial and age-keeping terms flow through G with the encoder frozen.
//! [`split_term_values`] evaluates every term as a function of a "live"
//! parameter vector with all stop-gradient paths pinned to a separate
//! "frozen" vector, which is exactly the functional that central finite
//! differences of [`term_gradient`] must match.

use rand::Rng;

use crate::losses::{
    age_reg_rows, age_reg_rows_backward, hinge, kl_rows, kl_rows_backward, reconstruction_loss,
    reconstruction_loss_grad, LossWeights,
};
use crate::nn::{EncCache, EncOut, EncOutGrad, GenCache, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// The seven scalar objectives of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Rec,
    AgeKl,
    KlIrrel,
    AdvE,
    AdvG,
    Reg,
    AgeKeep,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Rec,
        LossTerm::AgeKl,
        LossTerm::KlIrrel,
        LossTerm::AdvE,
        LossTerm::AdvG,
        LossTerm::Reg,
        LossTerm::AgeKeep,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Rec => "rec",
            LossTerm::AgeKl => "age_kl",
            LossTerm::KlIrrel => "kl_irrel",
            LossTerm::AdvE => "adv_E",
            LossTerm::AdvG => "adv_G",
            LossTerm::Reg => "reg",
            LossTerm::AgeKeep => "age_keep",
        }
    }
}

/// Per-role noise of one step: reparameterization draws and the prior draw.
#[derive(Clone, Debug)]
pub struct StepNoise<F> {
    pub eps_age: Tensor<F>,
    pub eps_irrel: Tensor<F>,
    pub prior_irrel: Tensor<F>,
}

impl<F: Scalar> StepNoise<F> {
    pub fn draw<R: Rng + ?Sized>(
        n: usize,
        c: usize,
        rng_age: &mut R,
        rng_irrel: &mut R,
        rng_prior: &mut R,
    ) -> Self {
        StepNoise {
            eps_age: Tensor::randn(&[n, c], rng_age),
            eps_irrel: Tensor::randn(&[n, c], rng_irrel),
            prior_irrel: Tensor::randn(&[n, c], rng_prior),
        }
    }
}

/// Raw (unweighted) values of the step objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermVals {
    pub rec: f64,
    pub age_kl: f64,
    pub kl_real: f64,
    pub kl_rec: f64,
    pub kl_sample: f64,
    pub reg: f64,
    pub age_keep: f64,
}

impl TermVals {
    pub fn adv_e(&self, w: &LossWeights) -> f64 {
        self.kl_real
            + w.alpha * (hinge(self.kl_rec, w.margin_m) + hinge(self.kl_sample, w.margin_m))
    }

    pub fn adv_g(&self) -> f64 {
        self.kl_rec + self.kl_sample
    }

    pub fn term(&self, term: LossTerm, w: &LossWeights) -> f64 {
        match term {
            LossTerm::Rec => self.rec,
            LossTerm::AgeKl => self.age_kl,
            LossTerm::KlIrrel => self.kl_real,
            LossTerm::AdvE => self.adv_e(w),
            LossTerm::AdvG => self.adv_g(),
            LossTerm::Reg => self.reg,
            LossTerm::AgeKeep => self.age_keep,
        }
    }
}

/// All forward results and caches of one shared-parameter step.
pub struct StepForward<F: Scalar> {
    pub vals: TermVals,
    n: usize,
    x: Tensor<F>,
    ages: Vec<F>,
    enc_out: EncOut<F>,
    enc_cache: EncCache<F>,
    std_age: Tensor<F>,
    std_irrel: Tensor<F>,
    eps_age: Tensor<F>,
    eps_irrel: Tensor<F>,
    x_r: Tensor<F>,
    gen_r_cache: GenCache<F>,
    gen_s_cache: Option<GenCache<F>>,
    enc_r: Option<(EncOut<F>, EncCache<F>)>,
    enc_s: Option<(EncOut<F>, EncCache<F>)>,
}

fn reparam_rows<F: Scalar>(mu: &Tensor<F>, logvar: &Tensor<F>, eps: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let half = F::from_f64(0.5);
    let std = logvar.map(|lv| (lv * half).exp());
    let mut z = mu.clone();
    for ((zv, &sv), &ev) in z
        .data_mut()
        .iter_mut()
        .zip(std.data().iter())
        .zip(eps.data().iter())
    {
        *zv += ev * sv;
    }
    (z, std)
}

/// Forward pass of one step with shared parameters, caching everything the
/// backward passes need. `ages` must already carry the configured age scale.
/// The sample branch and re-encodes run only when `need_sample_branch`
/// (any adversarial or age-keeping weight active).
pub fn step_forward<F: Scalar>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    ages: &[F],
    noise: &StepNoise<F>,
    w: &LossWeights,
) -> StepForward<F> {
    let arch = params.arch().clone();
    let n = x.shape()[0];
    debug_assert_eq!(ages.len(), n);
    let need_hinges = w.lambda2 > 0.0 && w.alpha > 0.0;
    let need_sample_branch = need_hinges || w.lambda4 > 0.0 || w.lambda5 > 0.0;

    let (enc_out, enc_cache) = arch.encoder_forward(params, x);
    let (z_age, std_age) = reparam_rows(&enc_out.mu_age, &enc_out.logvar_age, &noise.eps_age);
    let (z_irrel, std_irrel) =
        reparam_rows(&enc_out.mu_irrel, &enc_out.logvar_irrel, &noise.eps_irrel);

    let (x_r, gen_r_cache) = arch.generator_forward(params, &z_age, &z_irrel);
    let (x_s, gen_s_cache) = if need_sample_branch {
        let (img, cache) = arch.generator_forward(params, &z_age, &noise.prior_irrel);
        (Some(img), Some(cache))
    } else {
        (None, None)
    };

    let enc_r = need_sample_branch.then(|| arch.encoder_forward(params, &x_r));
    let enc_s = x_s.as_ref().map(|xs| arch.encoder_forward(params, xs));

    let zeros = vec![F::zero(); n];
    let mut vals = TermVals {
        rec: reconstruction_loss(x, &x_r).expect("shapes agree").into_f64(),
        age_kl: kl_rows(&enc_out.mu_age, &enc_out.logvar_age, ages).into_f64(),
        kl_real: kl_rows(&enc_out.mu_irrel, &enc_out.logvar_irrel, &zeros).into_f64(),
        reg: age_reg_rows(&enc_out.mu_age, ages).into_f64(),
        ..TermVals::default()
    };
    if let Some((eo, _)) = &enc_r {
        vals.kl_rec = kl_rows(&eo.mu_irrel, &eo.logvar_irrel, &zeros).into_f64();
        vals.age_keep += age_reg_rows(&eo.mu_age, ages).into_f64();
    }
    if let Some((eo, _)) = &enc_s {
        vals.kl_sample = kl_rows(&eo.mu_irrel, &eo.logvar_irrel, &zeros).into_f64();
        vals.age_keep += age_reg_rows(&eo.mu_age, ages).into_f64();
    }

    StepForward {
        vals,
        n,
        x: x.clone(),
        ages: ages.to_vec(),
        enc_out,
        enc_cache,
        std_age,
        std_irrel,
        eps_age: noise.eps_age.clone(),
        eps_irrel: noise.eps_irrel.clone(),
        x_r,
        gen_r_cache,
        gen_s_cache,
        enc_r,
        enc_s,
    }
}

/// Cotangent multipliers of the encoder-side backward bundle.
#[derive(Clone, Copy, Debug, Default)]
pub struct EncTermWeights {
    pub rec: f64,
    pub age_kl: f64,
    pub kl_real: f64,
    /// Multiplier of the (m − kl_rec)⁺ hinge; zeroed by the caller when the
    /// hinge is inactive at the current batch values.
    pub hinge_rec: f64,
    pub hinge_sample: f64,
    pub reg: f64,
}

/// Cotangent multipliers of the generator-side backward bundle.
#[derive(Clone, Copy, Debug, Default)]
pub struct GenTermWeights {
    pub rec: f64,
    pub adv_g: f64,
    pub age_keep: f64,
}

impl<F: Scalar> StepForward<F> {
    pub fn values(&self) -> &TermVals {
        &self.vals
    }

    /// Hinge-aware encoder bundle weights for a full training update.
    pub fn encoder_update_weights(&self, w: &LossWeights) -> EncTermWeights {
        EncTermWeights {
            rec: 1.0,
            age_kl: w.lambda1,
            kl_real: w.lambda2,
            hinge_rec: if self.vals.kl_rec < w.margin_m {
                w.lambda2 * w.alpha
            } else {
                0.0
            },
            hinge_sample: if self.vals.kl_sample < w.margin_m {
                w.lambda2 * w.alpha
            } else {
                0.0
            },
            reg: w.lambda3,
        }
    }

    pub fn generator_update_weights(&self, w: &LossWeights) -> GenTermWeights {
        GenTermWeights {
            rec: 1.0,
            adv_g: w.generator_adv_weight(),
            age_keep: w.lambda5,
        }
    }

    /// Accumulate the weighted encoder-side gradient into `grads`
    /// (full-arena slice; only the encoder region is touched).
    pub fn backward_encoder(
        &self,
        params: &ModelParams<F>,
        ew: &EncTermWeights,
        grads: &mut [F],
    ) {
        let arch = params.arch().clone();
        let n = self.n;
        let c = params.cfg().latent_dim;
        let zeros = vec![F::zero(); n];
        let mut d = EncOutGrad::<F>::zeros(n, c);

        if ew.age_kl != 0.0 {
            kl_rows_backward(
                &self.enc_out.mu_age,
                &self.enc_out.logvar_age,
                &self.ages,
                F::from_f64(ew.age_kl),
                &mut d.mu_age,
                &mut d.logvar_age,
            );
        }
        if ew.reg != 0.0 {
            age_reg_rows_backward(
                &self.enc_out.mu_age,
                &self.ages,
                F::from_f64(ew.reg),
                &mut d.mu_age,
            );
        }
        if ew.kl_real != 0.0 {
            kl_rows_backward(
                &self.enc_out.mu_irrel,
                &self.enc_out.logvar_irrel,
                &zeros,
                F::from_f64(ew.kl_real),
                &mut d.mu_irrel,
                &mut d.logvar_irrel,
            );
        }
        if ew.rec != 0.0 {
            // Reconstruction reaches the encoder through the generator and
            // the reparameterization: dμ += dz, dlogvar += dz·ε·σ/2.
            let mut dxr = reconstruction_loss_grad(&self.x, &self.x_r);
            dxr.scale(F::from_f64(ew.rec));
            let (dz_age, dz_irrel) = arch
                .generator_backward(params, &self.gen_r_cache, &dxr, None, true)
                .expect("dz requested");
            let half = F::from_f64(0.5);
            accumulate_reparam(
                &mut d.mu_age,
                &mut d.logvar_age,
                &dz_age,
                &self.eps_age,
                &self.std_age,
                half,
            );
            accumulate_reparam(
                &mut d.mu_irrel,
                &mut d.logvar_irrel,
                &dz_irrel,
                &self.eps_irrel,
                &self.std_irrel,
                half,
            );
        }

        // Hinge terms: gradients flow through the re-encode of the detached
        // reconstruction/sample images into the encoder parameters only.
        for (hw, enc) in [
            (ew.hinge_rec, self.enc_r.as_ref()),
            (ew.hinge_sample, self.enc_s.as_ref()),
        ] {
            if hw == 0.0 {
                continue;
            }
            let (eo, cache) = enc.expect("hinge weight set without re-encode");
            let mut dh = EncOutGrad::<F>::zeros(n, c);
            kl_rows_backward(
                &eo.mu_irrel,
                &eo.logvar_irrel,
                &zeros,
                F::from_f64(-hw),
                &mut dh.mu_irrel,
                &mut dh.logvar_irrel,
            );
            arch.encoder_backward(params, cache, &dh, Some(grads), false);
        }

        arch.encoder_backward(params, &self.enc_cache, &d, Some(grads), false);
    }

    /// Accumulate the weighted generator-side gradient into `grads`
    /// (full-arena slice; only the generator region is touched).
    pub fn backward_generator(
        &self,
        params: &ModelParams<F>,
        gw: &GenTermWeights,
        grads: &mut [F],
    ) {
        let arch = params.arch().clone();
        let n = self.n;
        let c = params.cfg().latent_dim;
        let zeros = vec![F::zero(); n];
        let branches: [(Option<&GenCache<F>>, Option<&(EncOut<F>, EncCache<F>)>, bool); 2] = [
            (Some(&self.gen_r_cache), self.enc_r.as_ref(), true),
            (self.gen_s_cache.as_ref(), self.enc_s.as_ref(), false),
        ];
        for (gen_cache, enc, is_rec_branch) in branches {
            let Some(gen_cache) = gen_cache else { continue };
            let mut dimg: Option<Tensor<F>> = None;
            if gw.rec != 0.0 && is_rec_branch {
                let mut g = reconstruction_loss_grad(&self.x, &self.x_r);
                g.scale(F::from_f64(gw.rec));
                dimg = Some(g);
            }
            if gw.adv_g != 0.0 || gw.age_keep != 0.0 {
                // Through the re-encode with the encoder frozen: only the
                // input-image gradient propagates back into G.
                let (eo, cache) = enc.expect("generator terms need the re-encode");
                let mut dh = EncOutGrad::<F>::zeros(n, c);
                if gw.adv_g != 0.0 {
                    kl_rows_backward(
                        &eo.mu_irrel,
                        &eo.logvar_irrel,
                        &zeros,
                        F::from_f64(gw.adv_g),
                        &mut dh.mu_irrel,
                        &mut dh.logvar_irrel,
                    );
                }
                if gw.age_keep != 0.0 {
                    age_reg_rows_backward(
                        &eo.mu_age,
                        &self.ages,
                        F::from_f64(gw.age_keep),
                        &mut dh.mu_age,
                    );
                }
                let dx = arch
                    .encoder_backward(params, cache, &dh, None, true)
                    .expect("dx requested");
                match &mut dimg {
                    Some(g) => g.add_assign(&dx),
                    None => dimg = Some(dx),
                }
            }
            if let Some(dimg) = dimg {
                arch.generator_backward(params, gen_cache, &dimg, Some(grads), false);
            }
        }
    }
}

fn accumulate_reparam<F: Scalar>(
    dmu: &mut Tensor<F>,
    dlogvar: &mut Tensor<F>,
    dz: &Tensor<F>,
    eps: &Tensor<F>,
    std: &Tensor<F>,
    half: F,
) {
    for (((dm, dl), (&z, &e)), &s) in dmu
        .data_mut()
        .iter_mut()
        .zip(dlogvar.data_mut().iter_mut())
        .zip(dz.data().iter().zip(eps.data().iter()))
        .zip(std.data().iter())
    {
        *dm += z;
        *dl += z * e * s * half;
    }
}

/// Full-arena gradient of one unweighted term, routed per the gradient-flow
/// contract. Hinge activity is decided at the forward values.
pub fn term_gradient<F: Scalar>(
    fwd: &StepForward<F>,
    params: &ModelParams<F>,
    term: LossTerm,
    w: &LossWeights,
) -> Vec<F> {
    let mut grads = vec![F::zero(); params.data().len()];
    match term {
        LossTerm::Rec => {
            fwd.backward_encoder(
                params,
                &EncTermWeights {
                    rec: 1.0,
                    ..Default::default()
                },
                &mut grads,
            );
            fwd.backward_generator(
                params,
                &GenTermWeights {
                    rec: 1.0,
                    ..Default::default()
                },
                &mut grads,
            );
        }
        LossTerm::AgeKl => fwd.backward_encoder(
            params,
            &EncTermWeights {
                age_kl: 1.0,
                ..Default::default()
            },
            &mut grads,
        ),
        LossTerm::KlIrrel => fwd.backward_encoder(
            params,
            &EncTermWeights {
                kl_real: 1.0,
                ..Default::default()
            },
            &mut grads,
        ),
        LossTerm::AdvE => fwd.backward_encoder(
            params,
            &EncTermWeights {
                kl_real: 1.0,
                hinge_rec: if fwd.vals.kl_rec < w.margin_m { w.alpha } else { 0.0 },
                hinge_sample: if fwd.vals.kl_sample < w.margin_m {
                    w.alpha
                } else {
                    0.0
                },
                ..Default::default()
            },
            &mut grads,
        ),
        LossTerm::Reg => fwd.backward_encoder(
            params,
            &EncTermWeights {
                reg: 1.0,
                ..Default::default()
            },
            &mut grads,
        ),
        LossTerm::AdvG => fwd.backward_generator(
            params,
            &GenTermWeights {
                adv_g: 1.0,
                ..Default::default()
            },
            &mut grads,
        ),
        LossTerm::AgeKeep => fwd.backward_generator(
            params,
            &GenTermWeights {
                age_keep: 1.0,
                ..Default::default()
            },
            &mut grads,
        ),
    }
    grads
}

/// Evaluate every term with stop-gradient paths pinned to `frozen`:
/// the functional whose derivative in `live` the analytic gradients match.
///
/// - rec / age_kl / kl_irrel / reg use the live encoder (and live generator);
/// - the adversarial hinge arguments re-encode images produced entirely by
///   the frozen networks with the live encoder;
/// - the generator-side KLs and age-keeping terms re-encode live-generator
///   images of frozen-encoder latents with the frozen encoder.
pub fn split_term_values<F: Scalar>(
    live: &ModelParams<F>,
    frozen: &ModelParams<F>,
    x: &Tensor<F>,
    ages: &[F],
    noise: &StepNoise<F>,
) -> TermVals {
    let arch = live.arch().clone();
    let n = x.shape()[0];
    let zeros = vec![F::zero(); n];

    let (enc_live, _) = arch.encoder_forward(live, x);
    let (z_age_l, _) = reparam_rows(&enc_live.mu_age, &enc_live.logvar_age, &noise.eps_age);
    let (z_irrel_l, _) = reparam_rows(&enc_live.mu_irrel, &enc_live.logvar_irrel, &noise.eps_irrel);
    let (x_r_live, _) = arch.generator_forward(live, &z_age_l, &z_irrel_l);

    let (enc_frozen, _) = arch.encoder_forward(frozen, x);
    let (z_age_f, _) = reparam_rows(&enc_frozen.mu_age, &enc_frozen.logvar_age, &noise.eps_age);
    let (z_irrel_f, _) =
        reparam_rows(&enc_frozen.mu_irrel, &enc_frozen.logvar_irrel, &noise.eps_irrel);

    // Hinge arguments: frozen images, live re-encoder.
    let (x_r0, _) = arch.generator_forward(frozen, &z_age_f, &z_irrel_f);
    let (x_s0, _) = arch.generator_forward(frozen, &z_age_f, &noise.prior_irrel);
    let (enc_r0, _) = arch.encoder_forward(live, &x_r0);
    let (enc_s0, _) = arch.encoder_forward(live, &x_s0);

    // Generator terms: live images of frozen latents, frozen re-encoder.
    let (x_rg, _) = arch.generator_forward(live, &z_age_f, &z_irrel_f);
    let (x_sg, _) = arch.generator_forward(live, &z_age_f, &noise.prior_irrel);
    let (enc_rg, _) = arch.encoder_forward(frozen, &x_rg);
    let (enc_sg, _) = arch.encoder_forward(frozen, &x_sg);

    TermVals {
        rec: reconstruction_loss(x, &x_r_live).expect("shapes agree").into_f64(),
        age_kl: kl_rows(&enc_live.mu_age, &enc_live.logvar_age, ages).into_f64(),
        kl_real: kl_rows(&enc_live.mu_irrel, &enc_live.logvar_irrel, &zeros).into_f64(),
        kl_rec: kl_rows(&enc_r0.mu_irrel, &enc_r0.logvar_irrel, &zeros).into_f64(),
        kl_sample: kl_rows(&enc_s0.mu_irrel, &enc_s0.logvar_irrel, &zeros).into_f64(),
        reg: age_reg_rows(&enc_live.mu_age, ages).into_f64(),
        age_keep: age_reg_rows(&enc_rg.mu_age, ages).into_f64()
            + age_reg_rows(&enc_sg.mu_age, ages).into_f64(),
    }
}

/// Frozen-side quantities of the split functional that never change while
/// live parameters are perturbed: the frozen latents and the frozen
/// reconstruction/sample images.
pub struct FrozenStepCtx<F> {
    pub z_age: Tensor<F>,
    pub z_irrel: Tensor<F>,
    pub x_r0: Tensor<F>,
    pub x_s0: Tensor<F>,
}

pub fn frozen_step_ctx<F: Scalar>(
    frozen: &ModelParams<F>,
    x: &Tensor<F>,
    noise: &StepNoise<F>,
) -> FrozenStepCtx<F> {
    let arch = frozen.arch().clone();
    let (enc, _) = arch.encoder_forward(frozen, x);
    let (z_age, _) = reparam_rows(&enc.mu_age, &enc.logvar_age, &noise.eps_age);
    let (z_irrel, _) = reparam_rows(&enc.mu_irrel, &enc.logvar_irrel, &noise.eps_irrel);
    let (x_r0, _) = arch.generator_forward(frozen, &z_age, &z_irrel);
    let (x_s0, _) = arch.generator_forward(frozen, &z_age, &noise.prior_irrel);
    FrozenStepCtx {
        z_age,
        z_irrel,
        x_r0,
        x_s0,
    }
}

/// Terms of the split functional that vary with *encoder* parameters:
/// rec / age_kl / kl_irrel / reg on the live encoder, plus the hinge
/// arguments (live re-encode of the frozen images). The generator-side
/// terms are constants of the encoder and are left zero.
pub fn split_encoder_term_values<F: Scalar>(
    live: &ModelParams<F>,
    ctx: &FrozenStepCtx<F>,
    x: &Tensor<F>,
    ages: &[F],
    noise: &StepNoise<F>,
) -> TermVals {
    let arch = live.arch().clone();
    let n = x.shape()[0];
    let zeros = vec![F::zero(); n];
    let (enc_live, _) = arch.encoder_forward(live, x);
    let (z_age_l, _) = reparam_rows(&enc_live.mu_age, &enc_live.logvar_age, &noise.eps_age);
    let (z_irrel_l, _) = reparam_rows(&enc_live.mu_irrel, &enc_live.logvar_irrel, &noise.eps_irrel);
    let (x_r_live, _) = arch.generator_forward(live, &z_age_l, &z_irrel_l);
    let (enc_r0, _) = arch.encoder_forward(live, &ctx.x_r0);
    let (enc_s0, _) = arch.encoder_forward(live, &ctx.x_s0);
    TermVals {
        rec: reconstruction_loss(x, &x_r_live)
            .expect("shapes agree")
            .into_f64(),
        age_kl: kl_rows(&enc_live.mu_age, &enc_live.logvar_age, ages).into_f64(),
        kl_real: kl_rows(&enc_live.mu_irrel, &enc_live.logvar_irrel, &zeros).into_f64(),
        kl_rec: kl_rows(&enc_r0.mu_irrel, &enc_r0.logvar_irrel, &zeros).into_f64(),
        kl_sample: kl_rows(&enc_s0.mu_irrel, &enc_s0.logvar_irrel, &zeros).into_f64(),
        reg: age_reg_rows(&enc_live.mu_age, ages).into_f64(),
        ..TermVals::default()
    }
}

/// Terms of the split functional that vary with *generator* parameters:
/// rec on the live generator over frozen latents, and the frozen-encoder
/// re-encodes of live-generator images. Encoder-only terms are left zero.
pub fn split_generator_term_values<F: Scalar>(
    live: &ModelParams<F>,
    frozen: &ModelParams<F>,
    ctx: &FrozenStepCtx<F>,
    x: &Tensor<F>,
    ages: &[F],
    noise: &StepNoise<F>,
) -> TermVals {
    let arch = live.arch().clone();
    let n = x.shape()[0];
    let zeros = vec![F::zero(); n];
    let (x_rg, _) = arch.generator_forward(live, &ctx.z_age, &ctx.z_irrel);
    let (x_sg, _) = arch.generator_forward(live, &ctx.z_age, &noise.prior_irrel);
    let (enc_rg, _) = arch.encoder_forward(frozen, &x_rg);
    let (enc_sg, _) = arch.encoder_forward(frozen, &x_sg);
    TermVals {
        rec: reconstruction_loss(x, &x_rg)
            .expect("shapes agree")
            .into_f64(),
        kl_rec: kl_rows(&enc_rg.mu_irrel, &enc_rg.logvar_irrel, &zeros).into_f64(),
        kl_sample: kl_rows(&enc_sg.mu_irrel, &enc_sg.logvar_irrel, &zeros).into_f64(),
        age_keep: age_reg_rows(&enc_rg.mu_age, ages).into_f64()
            + age_reg_rows(&enc_sg.mu_age, ages).into_f64(),
        ..TermVals::default()
    }
}
