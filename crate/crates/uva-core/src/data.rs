//! Dataset ingestion and the synthetic "aging glyph" corpus.
//!
//! A glyph is a tinted background with a centered disc whose radius and
//! brightness vary continuously with age and whose interior carries
//! `floor(age/12)` concentric darker rings, so ground-truth age is
//! recoverable from pixels alone by template matching. Identity factors
//! (hue, center offset, background level, background speckle) are
//! age-irrelevant by construction.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, UvaError};
use crate::rng::{role_rng, Role};
use crate::tensor::{Scalar, Tensor};

/// Maximum representable age in years.
pub const AGE_MAX: f64 = 120.0;
/// Step of the age grid used by the recovery oracle.
pub const AGE_GRID_STEP: f64 = 0.5;
/// Amplitude of the identity speckle on the background.
const SPECKLE_AMPLITUDE: f64 = 0.015;

/// One image with its age label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor<f32>,
    /// Age in years, finite and nonnegative.
    pub age: f64,
}

/// Age-irrelevant factors of one glyph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphIdentity {
    /// Background tint hue in [0, 1).
    pub hue: f64,
    /// Disc center offset from the image center, in pixels, each in [−3, 3].
    pub center_offset: (f64, f64),
    /// Background intensity level in [0.1, 0.4].
    pub background_level: f64,
    /// Seed of the deterministic background speckle.
    pub texture_seed: u64,
}

impl GlyphIdentity {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.hue)
            && (-3.0..=3.0).contains(&self.center_offset.0)
            && (-3.0..=3.0).contains(&self.center_offset.1)
            && (0.1..=0.4).contains(&self.background_level);
        if ok {
            Ok(())
        } else {
            Err(UvaError::invalid("glyph identity field out of range"))
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        GlyphIdentity {
            hue: f64::uniform(rng, 0.0, 1.0).min(0.999_999),
            center_offset: (f64::uniform(rng, -3.0, 3.0), f64::uniform(rng, -3.0, 3.0)),
            background_level: f64::uniform(rng, 0.1, 0.4),
            texture_seed: rng.gen(),
        }
    }
}

/// How ages are drawn for a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum AgeDistKind {
    Uniform,
    /// Density ∝ (1 + age − age_min)^(−tail_exponent) on the support.
    LongTailed { tail_exponent: f64 },
    /// Truncated normal centered at the support midpoint, σ = span/4.
    Truncated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgeDistributionSpec {
    pub kind: AgeDistKind,
    pub age_min: f64,
    pub age_max: f64,
}

impl AgeDistributionSpec {
    pub fn uniform(age_min: f64, age_max: f64) -> Self {
        AgeDistributionSpec {
            kind: AgeDistKind::Uniform,
            age_min,
            age_max,
        }
    }

    pub fn long_tailed(age_min: f64, age_max: f64, tail_exponent: f64) -> Self {
        AgeDistributionSpec {
            kind: AgeDistKind::LongTailed { tail_exponent },
            age_min,
            age_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.age_min && self.age_min < self.age_max && self.age_max <= AGE_MAX) {
            return Err(UvaError::invalid(format!(
                "age support must satisfy 0 <= min < max <= {AGE_MAX}, got [{}, {}]",
                self.age_min, self.age_max
            )));
        }
        if let AgeDistKind::LongTailed { tail_exponent } = self.kind {
            if !(tail_exponent.is_finite() && tail_exponent > 0.0) {
                return Err(UvaError::invalid("tail exponent must be positive"));
            }
        }
        Ok(())
    }

    /// Draw one age.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.age_min, self.age_max);
        match &self.kind {
            AgeDistKind::Uniform => f64::uniform(rng, lo, hi),
            AgeDistKind::LongTailed { tail_exponent } => {
                // Inverse CDF of u^(−e) on u ∈ [1, 1+span], u = 1 + age − lo.
                let e = *tail_exponent;
                let top = 1.0 + hi - lo;
                let uni = f64::uniform(rng, 0.0, 1.0);
                let u = if (e - 1.0).abs() < 1e-12 {
                    top.powf(uni)
                } else {
                    let a = 1.0 - e;
                    (1.0 + uni * (top.powf(a) - 1.0)).powf(1.0 / a)
                };
                (lo + u - 1.0).clamp(lo, hi)
            }
            AgeDistKind::Truncated => {
                let mid = 0.5 * (lo + hi);
                let sd = 0.25 * (hi - lo);
                loop {
                    let v = mid + sd * f64::std_normal(rng);
                    if (lo..=hi).contains(&v) {
                        return v;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Background tint for a hue: HSV→RGB at saturation 0.5, value 1.
fn hue_tint(h: f64) -> [f64; 3] {
    let s = 0.5;
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = 1.0 - s;
    let q = 1.0 - s * f;
    let t = 1.0 - s * (1.0 - f);
    match i {
        0 => [1.0, t, p],
        1 => [q, 1.0, p],
        2 => [p, 1.0, t],
        3 => [p, q, 1.0],
        4 => [t, p, 1.0],
        _ => [1.0, p, q],
    }
}

/// Deterministic per-pixel speckle in [−amp, amp] (same for all channels).
#[inline]
fn speckle(seed: u64, x: usize, y: usize, amp: f64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h as f64 / u64::MAX as f64 * 2.0 - 1.0) * amp
}

/// Disc radius in pixels at a given age.
pub fn glyph_radius(age: f64, size: usize) -> f64 {
    (0.15 + 0.25 * age / AGE_MAX) * size as f64
}

/// Disc brightness at a given age: 0.9 at age 0 down to 0.55 at age 120.
pub fn glyph_brightness(age: f64) -> f64 {
    0.9 - 0.35 * age / AGE_MAX
}

/// Number of interior rings at a given age.
pub fn glyph_ring_count(age: f64) -> usize {
    (age / 12.0).floor() as usize
}

/// Renderer core shared by the public renderer and the recovery oracle:
/// explicit background color and center, optional speckle.
fn render_core(
    age: f64,
    bg: [f64; 3],
    cx: f64,
    cy: f64,
    size: usize,
    speckle_seed: Option<u64>,
) -> Tensor<f32> {
    let r = glyph_radius(age, size);
    let bright = glyph_brightness(age);
    let rings = glyph_ring_count(age);
    let ring_radii: Vec<f64> = (1..=rings)
        .map(|j| r * j as f64 / (rings + 1) as f64)
        .collect();
    let mut data = vec![0f32; 3 * size * size];
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            // 1px-feathered disc edge keeps pixel values continuous in age.
            let coverage = (r + 0.5 - d).clamp(0.0, 1.0);
            let noise = speckle_seed.map_or(0.0, |s| speckle(s, px, py, SPECKLE_AMPLITUDE));
            let ring_t = ring_radii
                .iter()
                .map(|rho| (1.0 - 2.0 * (d - rho).abs()).clamp(0.0, 1.0))
                .fold(0.0f64, f64::max);
            let disc_val = bright * (1.0 - 0.4 * ring_t);
            for ch in 0..3 {
                let bg_v = (bg[ch] + noise).clamp(0.0, 1.0);
                let v = bg_v + coverage * (disc_val - bg_v);
                data[ch * plane + py * size + px] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

/// Render a glyph of the given age and identity. Deterministic.
pub fn render_glyph(age: f64, id: &GlyphIdentity, size: usize) -> Result<Tensor<f32>> {
    if !(0.0..=AGE_MAX).contains(&age) {
        return Err(UvaError::invalid(format!(
            "age {age} outside [0, {AGE_MAX}]"
        )));
    }
    if size < 16 {
        return Err(UvaError::invalid("glyph size must be at least 16"));
    }
    id.validate()?;
    let tint = hue_tint(id.hue);
    let bg = [
        id.background_level * tint[0],
        id.background_level * tint[1],
        id.background_level * tint[2],
    ];
    let cx = size as f64 / 2.0 + id.center_offset.0;
    let cy = size as f64 / 2.0 + id.center_offset.1;
    Ok(render_core(age, bg, cx, cy, size, Some(id.texture_seed)))
}

// ---------------------------------------------------------------------------
// Recovery oracle
// ---------------------------------------------------------------------------

/// Estimate the age of a rendered glyph by brute-force template matching
/// over the 0.5-year grid, with background and center estimated from the
/// image itself. Exact to grid resolution on clean renders.
pub fn recover_glyph_age(image: &Tensor<f32>) -> f64 {
    let s = image.shape();
    assert_eq!(s.len(), 3, "expected a [3, H, W] image");
    let size = s[1];
    let plane = size * size;
    let px = image.data();

    // Background: per-channel median of the four 3x3 corner patch means
    // (the disc can reach at most one corner).
    let mut bg = [0.0f64; 3];
    for ch in 0..3 {
        let patch_mean = |x0: usize, y0: usize| -> f64 {
            let mut acc = 0.0;
            for y in y0..y0 + 3 {
                for x in x0..x0 + 3 {
                    acc += px[ch * plane + y * size + x] as f64;
                }
            }
            acc / 9.0
        };
        let mut means = [
            patch_mean(0, 0),
            patch_mean(size - 3, 0),
            patch_mean(0, size - 3),
            patch_mean(size - 3, size - 3),
        ];
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bg[ch] = 0.5 * (means[1] + means[2]);
    }

    // Center: intensity-weighted centroid of bright pixels. The disc is
    // always brighter than 0.49; background (with speckle) never is.
    let thresh = 0.49;
    let (mut wsum, mut xsum, mut ysum) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..size {
        for x in 0..size {
            let luma = (px[y * size + x] as f64
                + px[plane + y * size + x] as f64
                + px[2 * plane + y * size + x] as f64)
                / 3.0;
            if luma > thresh {
                let w = luma - thresh;
                wsum += w;
                xsum += w * (x as f64 + 0.5);
                ysum += w * (y as f64 + 0.5);
            }
        }
    }
    let (cx, cy) = if wsum > 0.0 {
        (xsum / wsum, ysum / wsum)
    } else {
        (size as f64 / 2.0, size as f64 / 2.0)
    };

    let steps = (AGE_MAX / AGE_GRID_STEP) as usize;
    let mut best = (f64::INFINITY, 0.0f64);
    for i in 0..=steps {
        let age = i as f64 * AGE_GRID_STEP;
        let cand = render_core(age, bg, cx, cy, size, None);
        let d = cand.sq_dist(image);
        if d < best.0 {
            best = (d, age);
        }
    }
    best.1
}

// ---------------------------------------------------------------------------
// Dataset generation / ingestion
// ---------------------------------------------------------------------------

/// Generate `n` glyphs with their identities. Deterministic in the seed.
pub fn generate_glyph_samples(
    n: usize,
    ages: &AgeDistributionSpec,
    size: usize,
    seed: u64,
) -> Result<Vec<(LabeledImage, GlyphIdentity)>> {
    if n == 0 {
        return Err(UvaError::invalid("dataset size must be at least 1"));
    }
    ages.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(f64, GlyphIdentity)> = (0..n)
        .map(|_| {
            let age = ages.sample(&mut rng);
            let id = GlyphIdentity::random(&mut rng);
            (age, id)
        })
        .collect();
    draws
        .into_par_iter()
        .map(|(age, id)| {
            let image = render_glyph(age, &id, size)?;
            Ok((LabeledImage { image, age }, id))
        })
        .collect()
}

/// Generate `n` labeled glyphs. Deterministic in the seed.
pub fn generate_glyph_dataset(
    n: usize,
    ages: &AgeDistributionSpec,
    size: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    Ok(generate_glyph_samples(n, ages, size, seed)?
        .into_iter()
        .map(|(item, _)| item)
        .collect())
}

/// Write a generated dataset as `<age>_<index>.png` files plus a
/// `manifest.csv` with exact ages and identity factors.
pub fn export_glyph_dataset(
    dir: &Path,
    samples: &[(LabeledImage, GlyphIdentity)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UvaError::io(dir, e))?;
    let mut manifest = String::from("filename,age,hue,offset_x,offset_y,background,texture_seed\n");
    for (i, (item, id)) in samples.iter().enumerate() {
        let name = format!("{}_{:05}.png", item.age.round() as u32, i);
        save_image_png(&dir.join(&name), &item.image)?;
        manifest.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            item.age,
            id.hue,
            id.center_offset.0,
            id.center_offset.1,
            id.background_level,
            id.texture_seed
        ));
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, manifest).map_err(|e| UvaError::io(mpath, e))?;
    Ok(())
}

/// Save a `[3, H, W]` (or `[1, 3, H, W]`) tensor in [0, 1] as an 8-bit PNG.
pub fn save_image_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape().to_vec();
    let (h, w) = match s.len() {
        3 => (s[1], s[2]),
        4 if s[0] == 1 => (s[2], s[3]),
        _ => return Err(UvaError::invalid(format!("bad image shape {s:?}"))),
    };
    let plane = h * w;
    let data = image.data();
    let base = data.len() - 3 * plane;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(data[base + y * w + x]),
                    to_u8(data[base + plane + y * w + x]),
                    to_u8(data[base + 2 * plane + y * w + x]),
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| {
        UvaError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        )
    })
}

/// Decode a PNG into a `[3, size, size]` tensor in [0, 1]: center-crop to
/// square, then resize.
pub fn load_image_png(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| {
        UvaError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        )
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
    let resized = image::imageops::resize(
        &cropped,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let p = resized.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * plane + y * size + x] = p.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, size, size], data))
}

/// Load a folder of `<age>_<anything>.png` files. Unparsable or unreadable
/// files are skipped; the second return value counts the skips.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<(Vec<LabeledImage>, usize)> {
    let entries = std::fs::read_dir(dir).map_err(|e| UvaError::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    let mut items = Vec::new();
    let mut warnings = 0usize;
    for name in names {
        let age = match name.split('_').next().and_then(|p| p.parse::<u32>().ok()) {
            Some(a) => a as f64,
            None => {
                warnings += 1;
                continue;
            }
        };
        match load_image_png(&dir.join(&name), size) {
            Ok(image) => items.push(LabeledImage { image, age }),
            Err(_) => warnings += 1,
        }
    }
    if items.is_empty() {
        return Err(UvaError::Data(format!(
            "no usable <age>_*.png images in {}",
            dir.display()
        )));
    }
    Ok((items, warnings))
}

/// Deterministic shuffle split into ⌈0.8n⌉ train and the remaining test items.
pub fn split_80_20(
    dataset: Vec<LabeledImage>,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let n = dataset.len();
    if n < 5 {
        return Err(UvaError::invalid(format!(
            "need at least 5 items to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = role_rng(seed, Role::Shuffle);
    shuffle(&mut order, &mut rng);
    let train_n = (0.8 * n as f64).ceil() as usize;
    let mut slots: Vec<Option<LabeledImage>> = dataset.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<LabeledImage>>, idx: &[usize]| {
        idx.iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(&mut slots, &order[..train_n]);
    let test = take(&mut slots, &order[train_n..]);
    Ok((train, test))
}

/// Fisher–Yates with the given rng.
fn shuffle<R: Rng + ?Sized>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Seeded epoch iterator over `(images, ages)` batches. Reshuffles each
/// epoch; the final short batch of every epoch is dropped.
pub struct BatchIter {
    data: Arc<Vec<LabeledImage>>,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epochs_left: usize,
}

impl BatchIter {
    pub fn new(
        data: Arc<Vec<LabeledImage>>,
        batch_size: usize,
        seed: u64,
        epochs: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(UvaError::invalid("batch size must be at least 1"));
        }
        if data.is_empty() {
            return Err(UvaError::Data("empty dataset".into()));
        }
        if data.len() < batch_size {
            return Err(UvaError::Data(format!(
                "dataset of {} items cannot fill a batch of {batch_size}",
                data.len()
            )));
        }
        let mut it = BatchIter {
            order: (0..data.len()).collect(),
            data,
            batch_size,
            rng: role_rng(seed, Role::Shuffle),
            pos: 0,
            epochs_left: epochs,
        };
        it.reshuffle();
        Ok(it)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch_size
    }

    fn reshuffle(&mut self) {
        shuffle(&mut self.order, &mut self.rng);
        self.pos = 0;
    }
}

impl Iterator for BatchIter {
    type Item = (Tensor<f32>, Vec<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.epochs_left == 0 {
            return None;
        }
        if self.pos + self.batch_size > self.data.len() {
            // Drop the short remainder and start the next epoch.
            self.epochs_left -= 1;
            if self.epochs_left == 0 {
                return None;
            }
            self.reshuffle();
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        let shape = self.data[0].image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut batch = Tensor::zeros(&[self.batch_size, 3, h, w]);
        let mut ages = Vec::with_capacity(self.batch_size);
        let img_len = 3 * h * w;
        for (slot, &i) in idx.iter().enumerate() {
            batch.data_mut()[slot * img_len..(slot + 1) * img_len]
                .copy_from_slice(self.data[i].image.data());
            ages.push(self.data[i].age);
        }
        Some((batch, ages))
    }
}
