//! Quantitative evaluation: mean absolute error, cumulative accuracy, the
//! diagonal-Gaussian Fréchet distance over encoder features ("FID-lite"),
//! and the grouped aging-accuracy protocol.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::data::LabeledImage;
use crate::error::{Result, UvaError};
use crate::infer::{age_estimate_batch, age_translate_batch};
use crate::nn::ModelParams;
use crate::tensor::{stack_images, Scalar, Tensor};

/// Mean absolute error between predictions and ground truth.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(UvaError::invalid(format!(
            "need equal nonempty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Percentage of predictions with absolute error strictly below `n` years.
pub fn cumulative_accuracy(pred: &[f64], truth: &[f64], n: f64) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(UvaError::invalid("need equal nonempty lists"));
    }
    if !(n.is_finite() && n >= 0.0) {
        return Err(UvaError::invalid("threshold must be nonnegative"));
    }
    let hits = pred
        .iter()
        .zip(truth.iter())
        .filter(|(p, t)| (*p - *t).abs() < n)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `‖μ1−μ2‖² + Σ (√v1 − √v2)²`.
pub fn frechet_gaussian_distance(
    stats1: (&[f64], &[f64]),
    stats2: (&[f64], &[f64]),
) -> Result<f64> {
    let (m1, v1) = stats1;
    let (m2, v2) = stats2;
    if m1.len() != m2.len() || v1.len() != v2.len() || m1.len() != v1.len() {
        return Err(UvaError::invalid("feature statistics dimensions differ"));
    }
    if v1.iter().chain(v2.iter()).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(UvaError::invalid("variances must be nonnegative"));
    }
    let mut acc = 0.0;
    for i in 0..m1.len() {
        let dm = m1[i] - m2[i];
        let ds = v1[i].sqrt() - v2[i].sqrt();
        acc += dm * dm + ds * ds;
    }
    Ok(acc)
}

/// Per-coordinate sample mean and (unbiased) variance of the encoder's
/// age-irrelevant posterior mean over a set of images.
pub fn feature_stats<F: Scalar>(
    params: &ModelParams<F>,
    images: &Tensor<F>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::nn::validate_images(params, images)?;
    let n = images.shape()[0];
    if n < 2 {
        return Err(UvaError::invalid("need at least 2 images for statistics"));
    }
    let arch = params.arch().clone();
    let c = params.cfg().latent_dim;
    let mut mean = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    // Encode in slices to bound activation memory.
    let chunk = 64usize;
    let mut done = 0;
    while done < n {
        let take = chunk.min(n - done);
        let s = images.shape();
        let img_len = s[1] * s[2] * s[3];
        let slice = Tensor::from_vec(
            &[take, s[1], s[2], s[3]],
            images.data()[done * img_len..(done + take) * img_len].to_vec(),
        );
        let (out, _) = arch.encoder_forward(params, &slice);
        for i in 0..take {
            for (j, v) in out.mu_irrel.row(i).iter().enumerate() {
                let v = v.into_f64();
                mean[j] += v;
                sq[j] += v * v;
            }
        }
        done += take;
    }
    let nf = n as f64;
    for j in 0..c {
        mean[j] /= nf;
        sq[j] = ((sq[j] - nf * mean[j] * mean[j]) / (nf - 1.0)).max(0.0);
    }
    Ok((mean, sq))
}

/// An age bracket; `hi = None` is an open "lo and above" bracket.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgeGroup {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl AgeGroup {
    pub fn contains(&self, age: f64) -> bool {
        age >= self.lo && self.hi.map_or(true, |h| age <= h)
    }

    /// Translation target: the bracket midpoint; open brackets use lo + 9
    /// (the conventional 51+ bracket translates to 60).
    pub fn target_age(&self) -> f64 {
        match self.hi {
            Some(h) => 0.5 * (self.lo + h),
            None => self.lo + 9.0,
        }
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("{}-{}", self.lo, h),
            None => format!("{}+", self.lo),
        }
    }
}

/// One row of the aging-accuracy table.
#[derive(Clone, Debug, Serialize)]
pub struct AgingGroupRow {
    pub group: String,
    pub target_age: f64,
    /// Mean estimated age of inputs translated into this group.
    pub translated_mean_age: f64,
    /// Mean true age of real test images inside this group.
    pub real_mean_age: Option<f64>,
    pub real_count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AgingAccuracy {
    pub input_group: String,
    pub input_count: usize,
    pub input_real_mean_age: f64,
    pub rows: Vec<AgingGroupRow>,
}

/// Grouped aging-accuracy protocol: members of the first group are
/// translated to every other group's target age and re-estimated; per-group
/// means are reported next to the real data's per-group means.
pub fn aging_accuracy_by_group<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    test_set: &[LabeledImage],
    groups: &[AgeGroup],
    age_scale: f64,
    rng: &mut R,
) -> Result<AgingAccuracy> {
    if groups.len() < 2 {
        return Err(UvaError::invalid("need an input group and targets"));
    }
    let input_group = &groups[0];
    let inputs: Vec<&LabeledImage> = test_set
        .iter()
        .filter(|it| input_group.contains(it.age))
        .collect();
    if inputs.is_empty() {
        return Err(UvaError::invalid(format!(
            "no test images in the input group {}",
            input_group.label()
        )));
    }
    let batch = stack_images(
        &inputs
            .iter()
            .map(|it| {
                let s = it.image.shape().to_vec();
                it.image.clone().reshaped(&[1, s[0], s[1], s[2]])
            })
            .collect::<Vec<_>>(),
    );
    let input_real_mean_age =
        inputs.iter().map(|it| it.age).sum::<f64>() / inputs.len() as f64;

    let mut rows = Vec::new();
    for g in &groups[1..] {
        let target = g.target_age();
        let translated = age_translate_batch(params, &batch, target, age_scale, false, rng)?;
        let ests = age_estimate_batch(params, &translated, age_scale)?;
        let translated_mean_age = ests.iter().sum::<f64>() / ests.len() as f64;
        let real: Vec<f64> = test_set
            .iter()
            .filter(|it| g.contains(it.age))
            .map(|it| it.age)
            .collect();
        rows.push(AgingGroupRow {
            group: g.label(),
            target_age: target,
            translated_mean_age,
            real_mean_age: if real.is_empty() {
                None
            } else {
                Some(real.iter().sum::<f64>() / real.len() as f64)
            },
            real_count: real.len(),
        });
    }
    Ok(AgingAccuracy {
        input_group: input_group.label(),
        input_count: inputs.len(),
        input_real_mean_age,
        rows,
    })
}

/// Spearman rank correlation (average ranks over ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return 0.0;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

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

/// The JSON evaluation report of the `eval` command.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    /// Threshold (years, as a string key) → percentage.
    pub ca: BTreeMap<String, f64>,
    pub fid_lite: f64,
    pub aging_accuracy: AgingAccuracy,
    pub config: serde_json::Value,
}

/// Run the full evaluation protocol on a held-out labeled set.
///
/// `gen_count` images are generated from noise (ages resampled from the
/// test labels) for the FID-lite comparison against the real features.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    test_set: &[LabeledImage],
    ca_thresholds: &[f64],
    groups: &[AgeGroup],
    age_scale: f64,
    gen_count: usize,
    rng: &mut R,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if test_set.len() < 2 {
        return Err(UvaError::invalid("need at least 2 test images"));
    }
    let batch = stack_images(
        &test_set
            .iter()
            .map(|it| {
                let s = it.image.shape().to_vec();
                it.image.clone().reshaped(&[1, s[0], s[1], s[2]])
            })
            .collect::<Vec<_>>(),
    );
    let truth: Vec<f64> = test_set.iter().map(|it| it.age).collect();
    let pred = age_estimate_batch(params, &batch, age_scale)?;
    let mae_v = mae(&pred, &truth)?;
    let mut ca = BTreeMap::new();
    for &n in ca_thresholds {
        ca.insert(format!("{n}"), cumulative_accuracy(&pred, &truth, n)?);
    }

    let real_stats = feature_stats(params, &batch)?;
    let gen_count = gen_count.max(2);
    let generated: Vec<Tensor<f32>> = (0..gen_count)
        .map(|_| {
            let age = truth[rng.gen_range(0..truth.len())];
            crate::infer::age_generate_from_noise(params, age, age_scale, rng).map(|img| {
                let s = img.shape().to_vec();
                img.reshaped(&[1, s[0], s[1], s[2]])
            })
        })
        .collect::<Result<_>>()?;
    let gen_batch = stack_images(&generated);
    let gen_stats = feature_stats(params, &gen_batch)?;
    let fid_lite = frechet_gaussian_distance(
        (&real_stats.0, &real_stats.1),
        (&gen_stats.0, &gen_stats.1),
    )?;

    let aging = aging_accuracy_by_group(params, test_set, groups, age_scale, rng)?;
    Ok(EvalReport {
        mae: mae_v,
        ca,
        fid_lite,
        aging_accuracy: aging,
        config,
    })
}
