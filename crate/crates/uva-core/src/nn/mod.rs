//! The inference network E and generator network G.
//!
//! Both are residual convolution stacks built from one construction rule so
//! the same code yields the full-scale topology and small test variants:
//!
//! - encoder: 5×5 stem conv → repeated [2×2 average pool, pre-activation
//!   residual block doubling channels up to `max_channels`] until the spatial
//!   size is 4 → fully connected to 4·C, split into
//!   (μ_R, logvar_R, μ_I, logvar_I) in that order;
//! - generator: fully connected from 2·C to 4·4·max → residual block →
//!   repeated [×2 nearest upsample, residual block] mirroring the encoder's
//!   channel ladder → 5×5 conv to 3 channels → logistic sigmoid.
//!
//! All learnable tensors live in one flat arena addressed by a name/shape/
//! offset directory; encoder parameters occupy a prefix of the arena and
//! generator parameters the rest.

pub mod ops;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UvaError};
use crate::latent::{clamp_logvar, DisentangledPosterior, GaussianDiag};
use crate::tensor::{Scalar, Tensor};

/// Negative slope of the leaky rectifier used throughout.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Square input resolution; power of two, at least 8.
    pub input_size: usize,
    /// Channels after the stem convolution.
    pub base_channels: usize,
    /// Channel cap for the doubling ladder.
    pub max_channels: usize,
    /// Latent width C of each of the two latent parts.
    pub latent_dim: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ArchitectureConfig {
    /// Desk-scale default: 32×32 / C=32, under 5M parameters.
    pub fn desk() -> Self {
        ArchitectureConfig {
            input_size: 32,
            base_channels: 16,
            max_channels: 128,
            latent_dim: 32,
            seed: 0,
        }
    }

    /// Full-scale reference topology: 256×256 / C=256.
    pub fn paper_scale() -> Self {
        ArchitectureConfig {
            input_size: 256,
            base_channels: 16,
            max_channels: 512,
            latent_dim: 256,
            seed: 0,
        }
    }

    /// Tiny configuration used by the gradient checks.
    pub fn test_8x8() -> Self {
        ArchitectureConfig {
            input_size: 8,
            base_channels: 4,
            max_channels: 8,
            latent_dim: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || !self.input_size.is_power_of_two() {
            return Err(UvaError::invalid(format!(
                "input_size must be a power of two >= 8, got {}",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(UvaError::invalid(
                "need 0 < base_channels <= max_channels",
            ));
        }
        if self.latent_dim == 0 {
            return Err(UvaError::invalid("latent_dim must be at least 1"));
        }
        Ok(())
    }

    /// Number of downsampling stages: input halves until the spatial size is 4.
    pub fn levels(&self) -> usize {
        (self.input_size.trailing_zeros() as usize) - 2
    }

    /// Encoder channel count after residual stage `i` (1-based);
    /// `i = 0` is the stem.
    fn channels_at(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }
}

/// Name/shape/offset entry of the parameter directory. Offsets count
/// elements from the start of the arena.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRef {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearRef {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

/// Pre-activation residual block with an optional 1×1 projection shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockRef {
    pub conv1: ConvRef,
    pub conv2: ConvRef,
    pub proj: Option<ConvRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPlan {
    pub stem: ConvRef,
    pub blocks: Vec<ResBlockRef>,
    pub fc: LinearRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPlan {
    pub fc: LinearRef,
    /// blocks[0] operates at 4×4; each later block follows one upsample.
    pub blocks: Vec<ResBlockRef>,
    pub out: ConvRef,
    /// Channels of the 4×4 feature map produced by the fully connected layer.
    pub fc_channels: usize,
}

/// Layer plan plus parameter directory for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub cfg: ArchitectureConfig,
    pub encoder: EncoderPlan,
    pub generator: GeneratorPlan,
    tensors: Vec<TensorMeta>,
    total_len: usize,
    encoder_len: usize,
}

struct ArenaBuilder {
    tensors: Vec<TensorMeta>,
    cursor: usize,
}

impl ArenaBuilder {
    fn new() -> Self {
        ArenaBuilder {
            tensors: Vec::new(),
            cursor: 0,
        }
    }

    fn push(&mut self, name: String, shape: &[usize]) -> usize {
        let offset = self.cursor;
        self.cursor += shape.iter().product::<usize>();
        self.tensors.push(TensorMeta {
            name,
            shape: shape.to_vec(),
            offset,
        });
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvRef {
        let w = self.push(format!("{name}.weight"), &[cout, cin, k, k]);
        let b = self.push(format!("{name}.bias"), &[cout]);
        ConvRef {
            w,
            b,
            cin,
            cout,
            k,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearRef {
        let w = self.push(format!("{name}.weight"), &[dout, din]);
        let b = self.push(format!("{name}.bias"), &[dout]);
        LinearRef { w, b, din, dout }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> ResBlockRef {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let proj = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1));
        ResBlockRef { conv1, conv2, proj }
    }
}

/// Expand a configuration into the layer plan and parameter directory.
pub fn build_architecture(cfg: &ArchitectureConfig) -> Result<Architecture> {
    cfg.validate()?;
    let levels = cfg.levels();
    let c = cfg.latent_dim;
    let mut b = ArenaBuilder::new();

    let stem = b.conv("enc.stem", 3, cfg.base_channels, 5);
    let mut blocks = Vec::with_capacity(levels);
    for i in 1..=levels {
        blocks.push(b.res(
            &format!("enc.res{i}"),
            cfg.channels_at(i - 1),
            cfg.channels_at(i),
        ));
    }
    let top = cfg.channels_at(levels);
    let fc = b.linear("enc.fc", top * 16, 4 * c);
    let encoder = EncoderPlan { stem, blocks, fc };
    let encoder_len = b.cursor;

    let gfc = b.linear("gen.fc", 2 * c, top * 16);
    let mut gblocks = Vec::with_capacity(levels + 1);
    gblocks.push(b.res("gen.res0", top, top));
    let mut prev = top;
    for j in 1..=levels {
        // Mirror the encoder ladder; the full-resolution block keeps the
        // channel count of the previous stage.
        let out_ch = cfg.channels_at(levels.saturating_sub(j).max(1));
        gblocks.push(b.res(&format!("gen.res{j}"), prev, out_ch));
        prev = out_ch;
    }
    let out = b.conv("gen.out", prev, 3, 5);
    let generator = GeneratorPlan {
        fc: gfc,
        blocks: gblocks,
        out,
        fc_channels: top,
    };

    Ok(Architecture {
        cfg: cfg.clone(),
        encoder,
        generator,
        total_len: b.cursor,
        tensors: b.tensors,
        encoder_len,
    })
}

impl Architecture {
    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.total_len
    }

    /// Encoder parameters occupy `0..encoder_len` of the arena.
    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    /// Name of the parameter tensor containing arena offset `off`.
    pub fn tensor_name_at(&self, off: usize) -> &str {
        let idx = match self
            .tensors
            .binary_search_by(|m| m.offset.cmp(&off))
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        &self.tensors[idx].name
    }
}

/// All learnable tensors of encoder and generator over one flat arena.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Scalar> {
    arch: Arc<Architecture>,
    data: Vec<F>,
}

/// Initialize parameters: weights from a fan-in-scaled uniform distribution
/// `U(−√(3/fan_in), √(3/fan_in))`, biases zero. Deterministic in the rng.
pub fn init_params<F: Scalar, R: Rng + ?Sized>(
    arch: &Arc<Architecture>,
    rng: &mut R,
) -> ModelParams<F> {
    let mut data = vec![F::zero(); arch.total_len];
    for meta in &arch.tensors {
        if meta.name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = meta.shape[1..].iter().product();
        let bound = F::from_f64((3.0 / fan_in as f64).sqrt());
        for v in &mut data[meta.offset..meta.offset + meta.len()] {
            *v = F::uniform(rng, -bound, bound);
        }
    }
    ModelParams {
        arch: Arc::clone(arch),
        data,
    }
}

impl<F: Scalar> ModelParams<F> {
    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn cfg(&self) -> &ArchitectureConfig {
        &self.arch.cfg
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn from_flat(arch: &Arc<Architecture>, data: Vec<F>) -> Result<Self> {
        if data.len() != arch.total_len {
            return Err(UvaError::invalid(format!(
                "arena length {} does not match architecture ({})",
                data.len(),
                arch.total_len
            )));
        }
        Ok(ModelParams {
            arch: Arc::clone(arch),
            data,
        })
    }

    /// Look up one named tensor.
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[F])> {
        let meta = self.arch.tensors.iter().find(|m| m.name == name)?;
        Some((
            &meta.shape,
            &self.data[meta.offset..meta.offset + meta.len()],
        ))
    }

    /// First parameter tensor containing a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<&str> {
        find_non_finite(&self.arch, &self.data, 0)
    }

    fn slice(&self, off: usize, len: usize) -> &[F] {
        &self.data[off..off + len]
    }
}

/// First tensor (by directory order) owning a non-finite entry of `buf`,
/// where `buf` starts at arena offset `base`.
pub fn find_non_finite<'a, F: Scalar>(
    arch: &'a Architecture,
    buf: &[F],
    base: usize,
) -> Option<&'a str> {
    buf.iter()
        .position(|v| !v.is_finite())
        .map(|i| arch.tensor_name_at(base + i))
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Raw encoder outputs, one row per image; log-variances already clamped.
#[derive(Clone, Debug)]
pub struct EncOut<F> {
    pub mu_age: Tensor<F>,
    pub logvar_age: Tensor<F>,
    pub mu_irrel: Tensor<F>,
    pub logvar_irrel: Tensor<F>,
}

/// Cotangents matching [`EncOut`].
pub struct EncOutGrad<F> {
    pub mu_age: Tensor<F>,
    pub logvar_age: Tensor<F>,
    pub mu_irrel: Tensor<F>,
    pub logvar_irrel: Tensor<F>,
}

impl<F: Scalar> EncOutGrad<F> {
    pub fn zeros(n: usize, c: usize) -> Self {
        EncOutGrad {
            mu_age: Tensor::zeros(&[n, c]),
            logvar_age: Tensor::zeros(&[n, c]),
            mu_irrel: Tensor::zeros(&[n, c]),
            logvar_irrel: Tensor::zeros(&[n, c]),
        }
    }
}

pub struct ResCache<F> {
    /// Block input; kept only when the shortcut is a projection.
    x: Option<Tensor<F>>,
    a1: Tensor<F>,
    a2: Tensor<F>,
}

pub struct EncCache<F> {
    x: Tensor<F>,
    res: Vec<ResCache<F>>,
    fc_in: Tensor<F>,
    fc_raw: Tensor<F>,
}

pub struct GenCache<F> {
    z: Tensor<F>,
    res: Vec<ResCache<F>>,
    /// Final residual output; input of the out conv.
    out_in: Tensor<F>,
    img: Tensor<F>,
}

fn res_forward<F: Scalar>(
    block: &ResBlockRef,
    p: &ModelParams<F>,
    x: Tensor<F>,
) -> (Tensor<F>, ResCache<F>) {
    let slope = F::from_f64(LEAKY_SLOPE);
    let c1 = &block.conv1;
    let c2 = &block.conv2;
    let a1 = ops::leaky_relu_forward(&x, slope);
    let h1 = ops::conv2d_forward(
        &a1,
        p.slice(c1.w, c1.cout * c1.cin * c1.k * c1.k),
        p.slice(c1.b, c1.cout),
        c1.cout,
        c1.k,
        c1.pad,
    );
    let a2 = ops::leaky_relu_forward(&h1, slope);
    let mut out = ops::conv2d_forward(
        &a2,
        p.slice(c2.w, c2.cout * c2.cin * c2.k * c2.k),
        p.slice(c2.b, c2.cout),
        c2.cout,
        c2.k,
        c2.pad,
    );
    let cached_x = match &block.proj {
        Some(pr) => {
            let skip = ops::conv2d_forward(
                &x,
                p.slice(pr.w, pr.cout * pr.cin),
                p.slice(pr.b, pr.cout),
                pr.cout,
                1,
                0,
            );
            out.add_assign(&skip);
            Some(x)
        }
        None => {
            out.add_assign(&x);
            None
        }
    };
    (
        out,
        ResCache {
            x: cached_x,
            a1,
            a2,
        },
    )
}

fn res_backward<F: Scalar>(
    block: &ResBlockRef,
    p: &ModelParams<F>,
    cache: &ResCache<F>,
    dy: &Tensor<F>,
    mut grads: Option<&mut [F]>,
) -> Tensor<F> {
    let slope = F::from_f64(LEAKY_SLOPE);
    let c1 = &block.conv1;
    let c2 = &block.conv2;
    if let Some(g) = grads.as_deref_mut() {
        let (dw, rest) = g[c2.w..].split_at_mut(c2.cout * c2.cin * c2.k * c2.k);
        let db = &mut rest[..c2.cout];
        ops::conv2d_backward_params(&cache.a2, dy, c2.k, c2.pad, dw, db);
    }
    let da2 = ops::conv2d_backward_input(
        dy,
        p.slice(c2.w, c2.cout * c2.cin * c2.k * c2.k),
        c2.cin,
        c2.k,
        c2.pad,
    );
    let dh1 = ops::leaky_relu_backward(&cache.a2, &da2, slope);
    if let Some(g) = grads.as_deref_mut() {
        let (dw, rest) = g[c1.w..].split_at_mut(c1.cout * c1.cin * c1.k * c1.k);
        let db = &mut rest[..c1.cout];
        ops::conv2d_backward_params(&cache.a1, &dh1, c1.k, c1.pad, dw, db);
    }
    let da1 = ops::conv2d_backward_input(
        &dh1,
        p.slice(c1.w, c1.cout * c1.cin * c1.k * c1.k),
        c1.cin,
        c1.k,
        c1.pad,
    );
    let mut dx = ops::leaky_relu_backward(&cache.a1, &da1, slope);
    match &block.proj {
        Some(pr) => {
            let x = cache.x.as_ref().expect("projection input cached");
            if let Some(g) = grads.as_deref_mut() {
                let (dw, rest) = g[pr.w..].split_at_mut(pr.cout * pr.cin);
                let db = &mut rest[..pr.cout];
                ops::conv2d_backward_params(x, dy, 1, 0, dw, db);
            }
            let dskip = ops::conv2d_backward_input(dy, p.slice(pr.w, pr.cout * pr.cin), pr.cin, 1, 0);
            dx.add_assign(&dskip);
        }
        None => dx.add_assign(dy),
    }
    dx
}

impl Architecture {
    /// Full encoder forward pass with cached activations.
    pub fn encoder_forward<F: Scalar>(
        &self,
        p: &ModelParams<F>,
        x: &Tensor<F>,
    ) -> (EncOut<F>, EncCache<F>) {
        let plan = &self.encoder;
        let st = &plan.stem;
        let mut cur = ops::conv2d_forward(
            x,
            p.slice(st.w, st.cout * st.cin * st.k * st.k),
            p.slice(st.b, st.cout),
            st.cout,
            st.k,
            st.pad,
        );
        let mut res = Vec::with_capacity(plan.blocks.len());
        for block in &plan.blocks {
            let pooled = ops::avg_pool2_forward(&cur);
            let (out, cache) = res_forward(block, p, pooled);
            res.push(cache);
            cur = out;
        }
        let n = x.shape()[0];
        let fc_in = cur.reshaped(&[n, plan.fc.din]);
        let fc_raw = ops::linear_forward(
            &fc_in,
            p.slice(plan.fc.w, plan.fc.dout * plan.fc.din),
            p.slice(plan.fc.b, plan.fc.dout),
            plan.fc.dout,
        );
        // Split order: (mu_R, logvar_R, mu_I, logvar_I).
        let c = self.cfg.latent_dim;
        let mut mu_age = Tensor::zeros(&[n, c]);
        let mut lv_age = Tensor::zeros(&[n, c]);
        let mut mu_irrel = Tensor::zeros(&[n, c]);
        let mut lv_irrel = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let row = fc_raw.row(i);
            mu_age.row_mut(i).copy_from_slice(&row[0..c]);
            for (dst, &v) in lv_age.row_mut(i).iter_mut().zip(&row[c..2 * c]) {
                *dst = clamp_logvar(v);
            }
            mu_irrel.row_mut(i).copy_from_slice(&row[2 * c..3 * c]);
            for (dst, &v) in lv_irrel.row_mut(i).iter_mut().zip(&row[3 * c..4 * c]) {
                *dst = clamp_logvar(v);
            }
        }
        (
            EncOut {
                mu_age,
                logvar_age: lv_age,
                mu_irrel,
                logvar_irrel: lv_irrel,
            },
            EncCache {
                x: x.clone(),
                res,
                fc_in,
                fc_raw,
            },
        )
    }

    /// Backpropagate cotangents of the encoder outputs.
    ///
    /// When `grads` is given, parameter gradients accumulate into the arena
    /// slice (encoder region). Returns the input-image gradient when
    /// `want_dx`.
    pub fn encoder_backward<F: Scalar>(
        &self,
        p: &ModelParams<F>,
        cache: &EncCache<F>,
        d: &EncOutGrad<F>,
        mut grads: Option<&mut [F]>,
        want_dx: bool,
    ) -> Option<Tensor<F>> {
        let plan = &self.encoder;
        let c = self.cfg.latent_dim;
        let n = cache.fc_raw.shape()[0];
        let clamp = F::from_f64(crate::latent::LOGVAR_CLAMP);
        let mut draw = Tensor::zeros(&[n, 4 * c]);
        for i in 0..n {
            let raw = cache.fc_raw.row(i);
            let out = draw.row_mut(i);
            out[0..c].copy_from_slice(d.mu_age.row(i));
            out[2 * c..3 * c].copy_from_slice(d.mu_irrel.row(i));
            // Clamped log-variances pass gradient only inside the band.
            for j in 0..c {
                if raw[c + j].abs() < clamp {
                    out[c + j] = d.logvar_age.row(i)[j];
                }
                if raw[3 * c + j].abs() < clamp {
                    out[3 * c + j] = d.logvar_irrel.row(i)[j];
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let (dw, rest) = g[plan.fc.w..].split_at_mut(plan.fc.dout * plan.fc.din);
            let db = &mut rest[..plan.fc.dout];
            ops::linear_backward_params(&cache.fc_in, &draw, dw, db);
        }
        let dflat = ops::linear_backward_input(
            &draw,
            p.slice(plan.fc.w, plan.fc.dout * plan.fc.din),
            plan.fc.din,
        );
        let top = plan.blocks.last().map(|b| b.conv2.cout).unwrap_or(0);
        let mut dcur = dflat.reshaped(&[n, top, 4, 4]);
        for (i, block) in plan.blocks.iter().enumerate().rev() {
            let dres_in = res_backward(block, p, &cache.res[i], &dcur, grads.as_deref_mut());
            dcur = ops::avg_pool2_backward(&dres_in);
        }
        let st = &plan.stem;
        if let Some(g) = grads.as_deref_mut() {
            let (dw, rest) = g[st.w..].split_at_mut(st.cout * st.cin * st.k * st.k);
            let db = &mut rest[..st.cout];
            ops::conv2d_backward_params(&cache.x, &dcur, st.k, st.pad, dw, db);
        }
        want_dx.then(|| {
            ops::conv2d_backward_input(
                &dcur,
                p.slice(st.w, st.cout * st.cin * st.k * st.k),
                st.cin,
                st.k,
                st.pad,
            )
        })
    }

    /// Generator forward from `[N, C]` age and irrelevant latents.
    pub fn generator_forward<F: Scalar>(
        &self,
        p: &ModelParams<F>,
        z_age: &Tensor<F>,
        z_irrel: &Tensor<F>,
    ) -> (Tensor<F>, GenCache<F>) {
        let plan = &self.generator;
        let n = z_age.shape()[0];
        let c = self.cfg.latent_dim;
        debug_assert_eq!(z_age.shape(), &[n, c]);
        debug_assert_eq!(z_irrel.shape(), &[n, c]);
        // Generator input is the concatenation [z_R | z_I] per sample.
        let mut z = Tensor::zeros(&[n, 2 * c]);
        for i in 0..n {
            let row = z.row_mut(i);
            row[..c].copy_from_slice(z_age.row(i));
            row[c..].copy_from_slice(z_irrel.row(i));
        }
        let h = ops::linear_forward(
            &z,
            p.slice(plan.fc.w, plan.fc.dout * plan.fc.din),
            p.slice(plan.fc.b, plan.fc.dout),
            plan.fc.dout,
        );
        let mut cur = h.reshaped(&[n, plan.fc_channels, 4, 4]);
        let mut res = Vec::with_capacity(plan.blocks.len());
        for (j, block) in plan.blocks.iter().enumerate() {
            if j > 0 {
                cur = ops::upsample2_forward(&cur);
            }
            let (out, cache) = res_forward(block, p, cur);
            res.push(cache);
            cur = out;
        }
        let ot = &plan.out;
        let raw = ops::conv2d_forward(
            &cur,
            p.slice(ot.w, ot.cout * ot.cin * ot.k * ot.k),
            p.slice(ot.b, ot.cout),
            ot.cout,
            ot.k,
            ot.pad,
        );
        let img = ops::sigmoid_forward(&raw);
        (
            img.clone(),
            GenCache {
                z,
                res,
                out_in: cur,
                img,
            },
        )
    }

    /// Backpropagate an image cotangent through the generator.
    ///
    /// Returns `(dz_age, dz_irrel)` when `want_dz`.
    pub fn generator_backward<F: Scalar>(
        &self,
        p: &ModelParams<F>,
        cache: &GenCache<F>,
        dimg: &Tensor<F>,
        mut grads: Option<&mut [F]>,
        want_dz: bool,
    ) -> Option<(Tensor<F>, Tensor<F>)> {
        let plan = &self.generator;
        let draw = ops::sigmoid_backward(&cache.img, dimg);
        let ot = &plan.out;
        if let Some(g) = grads.as_deref_mut() {
            let (dw, rest) = g[ot.w..].split_at_mut(ot.cout * ot.cin * ot.k * ot.k);
            let db = &mut rest[..ot.cout];
            ops::conv2d_backward_params(&cache.out_in, &draw, ot.k, ot.pad, dw, db);
        }
        let mut dcur = ops::conv2d_backward_input(
            &draw,
            p.slice(ot.w, ot.cout * ot.cin * ot.k * ot.k),
            ot.cin,
            ot.k,
            ot.pad,
        );
        for (j, block) in plan.blocks.iter().enumerate().rev() {
            let dres_in = res_backward(block, p, &cache.res[j], &dcur, grads.as_deref_mut());
            dcur = if j > 0 {
                ops::upsample2_backward(&dres_in)
            } else {
                dres_in
            };
        }
        let n = cache.z.shape()[0];
        let dh = dcur.reshaped(&[n, plan.fc.dout]);
        if let Some(g) = grads.as_deref_mut() {
            let (dw, rest) = g[plan.fc.w..].split_at_mut(plan.fc.dout * plan.fc.din);
            let db = &mut rest[..plan.fc.dout];
            ops::linear_backward_params(&cache.z, &dh, dw, db);
        }
        want_dz.then(|| {
            let dz = ops::linear_backward_input(
                &dh,
                p.slice(plan.fc.w, plan.fc.dout * plan.fc.din),
                plan.fc.din,
            );
            let c = self.cfg.latent_dim;
            let mut dz_age = Tensor::zeros(&[n, c]);
            let mut dz_irrel = Tensor::zeros(&[n, c]);
            for i in 0..n {
                let row = dz.row(i);
                dz_age.row_mut(i).copy_from_slice(&row[..c]);
                dz_irrel.row_mut(i).copy_from_slice(&row[c..]);
            }
            (dz_age, dz_irrel)
        })
    }
}

// ---------------------------------------------------------------------------
// Contract-level entry points
// ---------------------------------------------------------------------------

/// Encode an image batch into per-sample disentangled posteriors.
pub fn encode<F: Scalar>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
) -> Result<Vec<DisentangledPosterior<F>>> {
    validate_images(params, x)?;
    let (out, _) = params.arch.encoder_forward(params, x);
    let n = x.shape()[0];
    (0..n)
        .map(|i| {
            let age = GaussianDiag::from_mean_logvar(
                out.mu_age.row(i).to_vec(),
                out.logvar_age.row(i),
            )?;
            let irrel = GaussianDiag::from_mean_logvar(
                out.mu_irrel.row(i).to_vec(),
                out.logvar_irrel.row(i),
            )?;
            DisentangledPosterior::new(age, irrel)
        })
        .collect()
}

/// Decode batched `[N, C]` latents into an image batch in [0, 1].
pub fn decode<F: Scalar>(
    params: &ModelParams<F>,
    z_age: &Tensor<F>,
    z_irrel: &Tensor<F>,
) -> Result<Tensor<F>> {
    let c = params.cfg().latent_dim;
    if z_age.shape().len() != 2 || z_irrel.shape().len() != 2 {
        return Err(UvaError::invalid("latents must be rank-2 [N, C]"));
    }
    if z_age.shape()[1] != c || z_irrel.shape()[1] != c {
        return Err(UvaError::invalid(format!(
            "latent width must be C={c}, got {} and {}",
            z_age.shape()[1],
            z_irrel.shape()[1]
        )));
    }
    if z_age.shape()[0] != z_irrel.shape()[0] {
        return Err(UvaError::invalid("latent batch sizes differ"));
    }
    if !z_age.all_finite() || !z_irrel.all_finite() {
        return Err(UvaError::invalid("non-finite latent input"));
    }
    let (img, _) = params.arch.generator_forward(params, z_age, z_irrel);
    Ok(img)
}

pub(crate) fn validate_images<F: Scalar>(params: &ModelParams<F>, x: &Tensor<F>) -> Result<()> {
    let s = params.cfg().input_size;
    if x.shape().len() != 4 || x.shape()[1] != 3 {
        return Err(UvaError::invalid(format!(
            "expected [N, 3, {s}, {s}] image batch, got {:?}",
            x.shape()
        )));
    }
    if x.shape()[2] != s || x.shape()[3] != s {
        return Err(UvaError::invalid(format!(
            "expected spatial size {s}, got {}x{}",
            x.shape()[2],
            x.shape()[3]
        )));
    }
    if !x.all_finite() {
        return Err(UvaError::invalid("non-finite image input"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{role_rng, Role};

    #[test]
    fn full_scale_plan_matches_reference_topology() {
        let arch = build_architecture(&ArchitectureConfig::paper_scale()).unwrap();
        // Six downsampling stages; channel ladder 32..512 capped; fc 1024 wide.
        assert_eq!(arch.encoder.blocks.len(), 6);
        let chans: Vec<usize> = arch.encoder.blocks.iter().map(|b| b.conv2.cout).collect();
        assert_eq!(chans, vec![32, 64, 128, 256, 512, 512]);
        assert_eq!(arch.encoder.fc.dout, 1024);
        assert_eq!(arch.encoder.fc.din, 512 * 16);
        // Generator mirror: 512,512,256,128,64,32,32 after the initial block.
        let gch: Vec<usize> = arch.generator.blocks.iter().map(|b| b.conv2.cout).collect();
        assert_eq!(gch, vec![512, 512, 256, 128, 64, 32, 32]);
        assert_eq!(arch.generator.fc.din, 512);
        assert_eq!(arch.generator.out.cin, 32);
    }

    #[test]
    fn desk_plan_has_three_stages_and_small_param_count() {
        let arch = build_architecture(&ArchitectureConfig::desk()).unwrap();
        assert_eq!(arch.encoder.blocks.len(), 3);
        assert_eq!(arch.encoder.fc.din, 128 * 16);
        assert_eq!(arch.encoder.fc.dout, 128);
        assert!(
            arch.param_count() < 5_000_000,
            "desk model has {} parameters",
            arch.param_count()
        );
    }

    #[test]
    fn encoder_spatial_sizes_halve_to_four() {
        for size in [8usize, 16, 32, 64] {
            let cfg = ArchitectureConfig {
                input_size: size,
                base_channels: 4,
                max_channels: 16,
                latent_dim: 4,
                seed: 0,
            };
            let arch = build_architecture(&cfg).unwrap();
            let mut spatial = size;
            for _ in &arch.encoder.blocks {
                spatial /= 2;
            }
            assert_eq!(spatial, 4);
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        let cfg = ArchitectureConfig {
            input_size: 24,
            ..ArchitectureConfig::desk()
        };
        assert!(matches!(
            build_architecture(&cfg),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = Arc::new(build_architecture(&ArchitectureConfig::test_8x8()).unwrap());
        let a: ModelParams<f32> = init_params(&arch, &mut role_rng(1, Role::Init));
        let b: ModelParams<f32> = init_params(&arch, &mut role_rng(1, Role::Init));
        assert_eq!(a.data(), b.data());
        let c: ModelParams<f32> = init_params(&arch, &mut role_rng(2, Role::Init));
        assert_ne!(a.data(), c.data());
        // Biases exactly zero.
        let (_, bias) = a.tensor("enc.stem.bias").unwrap();
        assert!(bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_shapes_and_positive_stddev() {
        let arch = Arc::new(build_architecture(&ArchitectureConfig::desk()).unwrap());
        let params: ModelParams<f32> = init_params(&arch, &mut role_rng(3, Role::Init));
        let mut rng = role_rng(4, Role::Prior);
        let x = Tensor::<f32>::randn(&[28, 3, 32, 32], &mut rng).map(|v| v.abs().min(1.0));
        let posts = encode(&params, &x).unwrap();
        assert_eq!(posts.len(), 28);
        for p in &posts {
            assert_eq!(p.dim(), 32);
            assert!(p.age.stddev.iter().all(|&s| s > 0.0));
            assert!(p.irrel.stddev.iter().all(|&s| s > 0.0 && s < 10.0));
        }
        // Duplicated rows give identical posteriors.
        let mut two = Tensor::<f32>::zeros(&[2, 3, 32, 32]);
        two.data_mut()[..3 * 32 * 32].copy_from_slice(x.image(0));
        two.data_mut()[3 * 32 * 32..].copy_from_slice(x.image(0));
        let posts = encode(&params, &two).unwrap();
        assert_eq!(posts[0], posts[1]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let arch = Arc::new(build_architecture(&ArchitectureConfig::test_8x8()).unwrap());
        let params: ModelParams<f32> = init_params(&arch, &mut role_rng(3, Role::Init));
        let wrong = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        assert!(matches!(
            encode(&params, &wrong),
            Err(UvaError::InvalidArgument(_))
        ));
        let mut nan = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        nan.data_mut()[0] = f32::NAN;
        assert!(matches!(
            encode(&params, &nan),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn decode_contract() {
        let arch = Arc::new(build_architecture(&ArchitectureConfig::test_8x8()).unwrap());
        let params: ModelParams<f32> = init_params(&arch, &mut role_rng(5, Role::Init));
        let z = Tensor::<f32>::zeros(&[2, 4]);
        let img = decode(&params, &z, &z).unwrap();
        assert_eq!(img.shape(), &[2, 3, 8, 8]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Determinism.
        let img2 = decode(&params, &z, &z).unwrap();
        assert_eq!(img, img2);
        // Dimension mismatch.
        let bad = Tensor::<f32>::zeros(&[2, 5]);
        assert!(matches!(
            decode(&params, &bad, &z),
            Err(UvaError::InvalidArgument(_))
        ));
        let bad_n = Tensor::<f32>::zeros(&[3, 4]);
        assert!(matches!(
            decode(&params, &bad_n, &z),
            Err(UvaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn roundtrip_shape() {
        let arch = Arc::new(build_architecture(&ArchitectureConfig::test_8x8()).unwrap());
        let params: ModelParams<f32> = init_params(&arch, &mut role_rng(6, Role::Init));
        let mut rng = role_rng(7, Role::Prior);
        let x = Tensor::<f32>::randn(&[3, 3, 8, 8], &mut rng).map(|v| v.abs().min(1.0));
        let posts = encode(&params, &x).unwrap();
        let mut rng = role_rng(8, Role::EpsAge);
        let z_age = Tensor::from_vec(
            &[3, 4],
            posts
                .iter()
                .flat_map(|p| {
                    crate::latent::reparameterize(
                        &p.age,
                        &Tensor::<f32>::randn(&[4], &mut rng).into_data(),
                    )
                    .unwrap()
                })
                .collect(),
        );
        let z_irrel = Tensor::zeros(&[3, 4]);
        let img = decode(&params, &z_age, &z_irrel).unwrap();
        assert_eq!(img.shape(), x.shape());
    }

    #[test]
    fn tensor_name_lookup() {
        let arch = build_architecture(&ArchitectureConfig::test_8x8()).unwrap();
        assert_eq!(arch.tensor_name_at(0), "enc.stem.weight");
        let last = arch.tensors().last().unwrap();
        assert_eq!(arch.tensor_name_at(last.offset), last.name);
        assert_eq!(
            arch.tensor_name_at(arch.param_count() - 1),
            last.name
        );
    }
}
