//! Dense CPU kernels for the network layers: same-padding stride-1
//! convolution, 2×2 average pooling, ×2 nearest-neighbor upsampling, linear
//! layers, leaky rectifier and logistic activations — each with hand-written
//! backward passes.
//!
//! Parallel loops split work over disjoint output regions only, and every
//! reduction runs in a fixed order, so results are bitwise identical for any
//! thread count.

use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

/// Below this many output elements a kernel stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 12;

/// Fixed-order dot product with eight independent accumulator lanes.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (ax, bx) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = ax[j].mul_add(bx[j], acc[j]);
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        tail += x * y;
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

/// `out += s * x` over equal-length slices.
#[inline]
fn axpy<F: Scalar>(out: &mut [F], x: &[F], s: F) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += s * v;
    }
}

/// out[h][w] += Σ_{kh,kw} wblock[kh,kw] · xp[h+kh−p][w+kw−p] on valid ranges.
/// Generic fallback for unusual kernel/padding combinations.
#[inline]
fn accumulate_conv_plane<F: Scalar>(
    out: &mut [F],
    xp: &[F],
    wblock: &[F],
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
) {
    let (hi, wi) = (h as isize, wd as isize);
    let p = pad as isize;
    for kh in 0..k as isize {
        let dh = kh - p;
        let h_lo = (-dh).max(0) as usize;
        let h_hi = (hi - dh).min(hi) as usize;
        for kw in 0..k as isize {
            let wv = wblock[(kh * k as isize + kw) as usize];
            if wv == F::zero() {
                continue;
            }
            let dw = kw - p;
            let w_lo = (-dw).max(0) as usize;
            let w_hi = (wi - dw).min(wi) as usize;
            if w_lo >= w_hi {
                continue;
            }
            for hr in h_lo..h_hi {
                let src = (hr as isize + dh) as usize;
                let orow = &mut out[hr * wd + w_lo..hr * wd + w_hi];
                let xrow = &xp[src * wd + (w_lo as isize + dw) as usize
                    ..src * wd + (w_hi as isize + dw) as usize];
                axpy(orow, xrow, wv);
            }
        }
    }
}

/// Copy `planes` H×W planes into zero-padded (H+2p)×(W+2p) buffers.
fn pad_planes<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize, p: usize) -> Vec<F> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![F::zero(); planes * ph * pw];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ph * pw..(pl + 1) * ph * pw];
        for r in 0..h {
            dst[(r + p) * pw + p..(r + p) * pw + p + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
    }
    out
}

/// `out += conv(padded, wb)` over one plane; `padded` is the zero-padded
/// input plane of width `w + 2`.
#[inline]
fn stencil3_plane<F: Scalar>(out: &mut [F], padded: &[F], wb: &[F], h: usize, w: usize) {
    let pw = w + 2;
    for r in 0..h {
        let a = &padded[r * pw..(r + 1) * pw];
        let m = &padded[(r + 1) * pw..(r + 2) * pw];
        let b = &padded[(r + 2) * pw..(r + 3) * pw];
        let o = &mut out[r * w..(r + 1) * w];
        for (((ov, aw), mw), bw) in o
            .iter_mut()
            .zip(a.windows(3))
            .zip(m.windows(3))
            .zip(b.windows(3))
        {
            let mut acc = *ov;
            acc = wb[0].mul_add(aw[0], acc);
            acc = wb[1].mul_add(aw[1], acc);
            acc = wb[2].mul_add(aw[2], acc);
            acc = wb[3].mul_add(mw[0], acc);
            acc = wb[4].mul_add(mw[1], acc);
            acc = wb[5].mul_add(mw[2], acc);
            acc = wb[6].mul_add(bw[0], acc);
            acc = wb[7].mul_add(bw[1], acc);
            acc = wb[8].mul_add(bw[2], acc);
            *ov = acc;
        }
    }
}

/// Two-input-channel 3×3 stencil: `out += conv(p1, wb1) + conv(p2, wb2)`.
/// Shares the output row traffic between the two channels.
#[inline]
fn stencil3_plane2<F: Scalar>(
    out: &mut [F],
    p1: &[F],
    p2: &[F],
    wb1: &[F],
    wb2: &[F],
    h: usize,
    w: usize,
) {
    let pw = w + 2;
    for r in 0..h {
        let a1 = &p1[r * pw..(r + 1) * pw];
        let m1 = &p1[(r + 1) * pw..(r + 2) * pw];
        let b1 = &p1[(r + 2) * pw..(r + 3) * pw];
        let a2 = &p2[r * pw..(r + 1) * pw];
        let m2 = &p2[(r + 1) * pw..(r + 2) * pw];
        let b2 = &p2[(r + 2) * pw..(r + 3) * pw];
        let o = &mut out[r * w..(r + 1) * w];
        for (ov, (((aw1, mw1), bw1), ((aw2, mw2), bw2))) in o.iter_mut().zip(
            a1.windows(3)
                .zip(m1.windows(3))
                .zip(b1.windows(3))
                .zip(a2.windows(3).zip(m2.windows(3)).zip(b2.windows(3))),
        ) {
            let mut acc = *ov;
            acc = wb1[0].mul_add(aw1[0], acc);
            acc = wb1[1].mul_add(aw1[1], acc);
            acc = wb1[2].mul_add(aw1[2], acc);
            acc = wb1[3].mul_add(mw1[0], acc);
            acc = wb1[4].mul_add(mw1[1], acc);
            acc = wb1[5].mul_add(mw1[2], acc);
            acc = wb1[6].mul_add(bw1[0], acc);
            acc = wb1[7].mul_add(bw1[1], acc);
            acc = wb1[8].mul_add(bw1[2], acc);
            acc = wb2[0].mul_add(aw2[0], acc);
            acc = wb2[1].mul_add(aw2[1], acc);
            acc = wb2[2].mul_add(aw2[2], acc);
            acc = wb2[3].mul_add(mw2[0], acc);
            acc = wb2[4].mul_add(mw2[1], acc);
            acc = wb2[5].mul_add(mw2[2], acc);
            acc = wb2[6].mul_add(bw2[0], acc);
            acc = wb2[7].mul_add(bw2[1], acc);
            acc = wb2[8].mul_add(bw2[2], acc);
            *ov = acc;
        }
    }
}

/// 5×5 variant of [`stencil3_plane`]; `padded` has width `w + 4`.
#[inline]
fn stencil5_plane<F: Scalar>(out: &mut [F], padded: &[F], wb: &[F], h: usize, w: usize) {
    let pw = w + 4;
    for r in 0..h {
        let r0 = &padded[r * pw..(r + 1) * pw];
        let r1 = &padded[(r + 1) * pw..(r + 2) * pw];
        let r2 = &padded[(r + 2) * pw..(r + 3) * pw];
        let r3 = &padded[(r + 3) * pw..(r + 4) * pw];
        let r4 = &padded[(r + 4) * pw..(r + 5) * pw];
        let o = &mut out[r * w..(r + 1) * w];
        for (ov, ((((w0, w1), w2), w3), w4)) in o.iter_mut().zip(
            r0.windows(5)
                .zip(r1.windows(5))
                .zip(r2.windows(5))
                .zip(r3.windows(5))
                .zip(r4.windows(5)),
        ) {
            let mut acc = *ov;
            for kw in 0..5 {
                acc = wb[kw].mul_add(w0[kw], acc);
            }
            for kw in 0..5 {
                acc = wb[5 + kw].mul_add(w1[kw], acc);
            }
            for kw in 0..5 {
                acc = wb[10 + kw].mul_add(w2[kw], acc);
            }
            for kw in 0..5 {
                acc = wb[15 + kw].mul_add(w3[kw], acc);
            }
            for kw in 0..5 {
                acc = wb[20 + kw].mul_add(w4[kw], acc);
            }
            *ov = acc;
        }
    }
}

#[inline]
fn reduce8<F: Scalar>(l: &[F; 8]) -> F {
    ((l[0] + l[4]) + (l[2] + l[6])) + ((l[1] + l[5]) + (l[3] + l[7]))
}

/// Weight gradient against a zero-padded input plane:
/// `acc[kh*3+kw] += Σ_{r,j} dy[r][j] · padded[r+kh][j+kw]`.
///
/// One set of vector accumulators per kernel column, reduced once per
/// kernel row; spatial width must be a multiple of 8 (the stencil path only
/// runs at 16 and above).
/// Two-channel weight gradient: shares each dy row load between two input
/// planes.
#[inline]
fn wgrad3_plane2<F: Scalar>(
    acc1: &mut [F],
    acc2: &mut [F],
    dyp: &[F],
    p1: &[F],
    p2: &[F],
    h: usize,
    w: usize,
) {
    let pw = w + 2;
    debug_assert_eq!(w % 8, 0);
    for kh in 0..3 {
        let mut lanes = [[F::zero(); 8]; 6];
        for r in 0..h {
            let a = &dyp[r * w..(r + 1) * w];
            let b1 = &p1[(r + kh) * pw..(r + kh) * pw + pw];
            let b2 = &p2[(r + kh) * pw..(r + kh) * pw + pw];
            for c in 0..w / 8 {
                let base = c * 8;
                let av = &a[base..base + 8];
                let b10 = &b1[base..base + 8];
                let b11 = &b1[base + 1..base + 9];
                let b12 = &b1[base + 2..base + 10];
                let b20 = &b2[base..base + 8];
                let b21 = &b2[base + 1..base + 9];
                let b22 = &b2[base + 2..base + 10];
                for l in 0..8 {
                    lanes[0][l] = av[l].mul_add(b10[l], lanes[0][l]);
                    lanes[1][l] = av[l].mul_add(b11[l], lanes[1][l]);
                    lanes[2][l] = av[l].mul_add(b12[l], lanes[2][l]);
                    lanes[3][l] = av[l].mul_add(b20[l], lanes[3][l]);
                    lanes[4][l] = av[l].mul_add(b21[l], lanes[4][l]);
                    lanes[5][l] = av[l].mul_add(b22[l], lanes[5][l]);
                }
            }
        }
        for kw in 0..3 {
            acc1[kh * 3 + kw] += reduce8(&lanes[kw]);
            acc2[kh * 3 + kw] += reduce8(&lanes[3 + kw]);
        }
    }
}

#[inline]
fn wgrad3_plane<F: Scalar>(acc: &mut [F], dyp: &[F], padded: &[F], h: usize, w: usize) {
    let pw = w + 2;
    debug_assert_eq!(w % 8, 0);
    for kh in 0..3 {
        let mut l0 = [F::zero(); 8];
        let mut l1 = [F::zero(); 8];
        let mut l2 = [F::zero(); 8];
        for r in 0..h {
            let a = &dyp[r * w..(r + 1) * w];
            let b = &padded[(r + kh) * pw..(r + kh) * pw + pw];
            for c in 0..w / 8 {
                let base = c * 8;
                let av = &a[base..base + 8];
                let b0 = &b[base..base + 8];
                let b1 = &b[base + 1..base + 9];
                let b2 = &b[base + 2..base + 10];
                for l in 0..8 {
                    l0[l] = av[l].mul_add(b0[l], l0[l]);
                    l1[l] = av[l].mul_add(b1[l], l1[l]);
                    l2[l] = av[l].mul_add(b2[l], l2[l]);
                }
            }
        }
        acc[kh * 3] += reduce8(&l0);
        acc[kh * 3 + 1] += reduce8(&l1);
        acc[kh * 3 + 2] += reduce8(&l2);
    }
}

/// 5×5 variant of [`wgrad3_plane`]; `padded` has width `w + 4`.
#[inline]
fn wgrad5_plane<F: Scalar>(acc: &mut [F], dyp: &[F], padded: &[F], h: usize, w: usize) {
    let pw = w + 4;
    debug_assert_eq!(w % 8, 0);
    for kh in 0..5 {
        let mut lanes = [[F::zero(); 8]; 5];
        for r in 0..h {
            let a = &dyp[r * w..(r + 1) * w];
            let b = &padded[(r + kh) * pw..(r + kh) * pw + pw];
            for c in 0..w / 8 {
                let base = c * 8;
                let av = &a[base..base + 8];
                let b0 = &b[base..base + 8];
                let b1 = &b[base + 1..base + 9];
                let b2 = &b[base + 2..base + 10];
                let b3 = &b[base + 3..base + 11];
                let b4 = &b[base + 4..base + 12];
                for l in 0..8 {
                    lanes[0][l] = av[l].mul_add(b0[l], lanes[0][l]);
                    lanes[1][l] = av[l].mul_add(b1[l], lanes[1][l]);
                    lanes[2][l] = av[l].mul_add(b2[l], lanes[2][l]);
                    lanes[3][l] = av[l].mul_add(b3[l], lanes[3][l]);
                    lanes[4][l] = av[l].mul_add(b4[l], lanes[4][l]);
                }
            }
        }
        for (kw, lane) in lanes.iter().enumerate() {
            acc[kh * 5 + kw] += reduce8(lane);
        }
    }
}

/// Channel counts per spatial position grow as resolution shrinks; below
/// this spatial size the channels-last kernels win over row stencils.
const CHANNELS_LAST_MAX_side: usize = 8;

/// Transpose-and-pad one image to channels-last: `[(h+2p)(w+2p), c]`.
fn transpose_pad_cl<F: Scalar>(img: &[F], c: usize, h: usize, w: usize, p: usize) -> Vec<F> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![F::zero(); ph * pw * c];
    for ch in 0..c {
        for r in 0..h {
            for j in 0..w {
                out[(((r + p) * pw) + j + p) * c + ch] = img[ch * h * w + r * w + j];
            }
        }
    }
    out
}

/// `out[..] += s * x[..]` with fused multiply-add.
#[inline]
fn axpy_ma<F: Scalar>(out: &mut [F], x: &[F], s: F) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = s.mul_add(v, *o);
    }
}

/// Channels-last 3×3 convolution over one image: `xt` is the padded
/// channels-last input, `wt` is `[9][cin][cout]`, output is channels-first.
fn cl_conv3_image<F: Scalar>(
    out: &mut [F],
    xt: &[F],
    wt: &[F],
    b: &[F],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let pw = w + 2;
    let mut ot = vec![F::zero(); h * w * cout];
    for r in 0..h {
        for j in 0..w {
            let o = &mut ot[(r * w + j) * cout..(r * w + j + 1) * cout];
            for kh in 0..3 {
                for kw in 0..3 {
                    let pos = (r + kh) * pw + j + kw;
                    let xrow = &xt[pos * cin..(pos + 1) * cin];
                    let wk = &wt[(kh * 3 + kw) * cin * cout..];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv != F::zero() {
                            axpy_ma(o, &wk[ci * cout..ci * cout + cout], xv);
                        }
                    }
                }
            }
        }
    }
    // Back to channels-first with the bias.
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for (pidx, o) in plane.iter_mut().enumerate() {
            *o = ot[pidx * cout + co] + b[co];
        }
    }
}

/// Stride-1 zero-padded convolution. `x: [N, Cin, H, W]`,
/// `w: [Cout, Cin, k, k]`, `b: [Cout]` → `[N, Cout, H, W]`.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &[F],
    b: &[F],
    cout: usize,
    k: usize,
    pad: usize,
) -> Tensor<F> {
    let (n, cin, h, wd) = dims4(x);
    debug_assert_eq!(w.len(), cout * cin * k * k);
    debug_assert_eq!(b.len(), cout);
    let plane = h * wd;
    let mut y = Tensor::zeros(&[n, cout, h, wd]);
    let xd = x.data();

    if k == 3 && pad == 1 && h <= CHANNELS_LAST_MAX_side {
        // Channels-last: vectorize over output channels.
        let mut wt = vec![F::zero(); 9 * cin * cout];
        for co in 0..cout {
            for ci in 0..cin {
                for kk in 0..9 {
                    wt[(kk * cin + ci) * cout + co] = w[(co * cin + ci) * 9 + kk];
                }
            }
        }
        let wt = &wt;
        let run = |(ni, out): (usize, &mut [F])| {
            let xt = transpose_pad_cl(&xd[ni * cin * plane..(ni + 1) * cin * plane], cin, h, wd, 1);
            cl_conv3_image(out, &xt, wt, b, cin, cout, h, wd);
        };
        y.data_mut()
            .par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(run);
        return y;
    }

    if k % 2 == 1 && pad == k / 2 && k > 1 {
        let padded = pad_planes(xd, n * cin, h, wd, pad);
        let padded = &padded;
        let pplane = (h + 2 * pad) * (wd + 2 * pad);
        let run = |(idx, out): (usize, &mut [F])| {
            let ni = idx / cout;
            let co = idx % cout;
            out.fill(b[co]);
            if k == 3 {
                let mut ci = 0;
                while ci + 2 <= cin {
                    let p1 = &padded[(ni * cin + ci) * pplane..(ni * cin + ci + 1) * pplane];
                    let p2 = &padded[(ni * cin + ci + 1) * pplane..(ni * cin + ci + 2) * pplane];
                    let w1 = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                    let w2 = &w[(co * cin + ci + 1) * 9..(co * cin + ci + 2) * 9];
                    stencil3_plane2(out, p1, p2, w1, w2, h, wd);
                    ci += 2;
                }
                if ci < cin {
                    let xp = &padded[(ni * cin + ci) * pplane..(ni * cin + ci + 1) * pplane];
                    stencil3_plane(out, xp, &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9], h, wd);
                }
            } else {
                for ci in 0..cin {
                    let xp = &padded[(ni * cin + ci) * pplane..(ni * cin + ci + 1) * pplane];
                    let wblock = &w[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                    stencil5_plane(out, xp, wblock, h, wd);
                }
            }
        };
        let min_planes = (PAR_THRESHOLD / plane).max(1);
        y.data_mut()
            .par_chunks_mut(plane)
            .with_min_len(min_planes)
            .enumerate()
            .for_each(run);
        return y;
    }

    let run = |(idx, out): (usize, &mut [F])| {
        let ni = idx / cout;
        let co = idx % cout;
        out.fill(b[co]);
        let x_img = &xd[ni * cin * plane..(ni + 1) * cin * plane];
        for ci in 0..cin {
            let xp = &x_img[ci * plane..(ci + 1) * plane];
            let wblock = &w[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            match (k, pad) {
                (1, 0) => axpy_ma(out, xp, wblock[0]),
                _ => accumulate_conv_plane(out, xp, wblock, h, wd, k, pad),
            }
        }
    };
    let min_planes = (PAR_THRESHOLD / plane).max(1);
    if n * cout * plane >= PAR_THRESHOLD {
        y.data_mut()
            .par_chunks_mut(plane)
            .with_min_len(min_planes)
            .enumerate()
            .for_each(run);
    } else {
        y.data_mut().chunks_mut(plane).enumerate().for_each(run);
    }
    y
}

/// Gradient with respect to the convolution input: a convolution of `dy`
/// with the fully mirrored kernel at padding k−1−pad.
pub fn conv2d_backward_input<F: Scalar>(
    dy: &Tensor<F>,
    w: &[F],
    cin: usize,
    k: usize,
    pad: usize,
) -> Tensor<F> {
    let cout = dy.shape()[1];
    let kk = k * k;
    let mut mirrored = vec![F::zero(); w.len()];
    // Swap the channel roles and reverse the taps.
    for co in 0..cout {
        for ci in 0..cin {
            for i in 0..kk {
                mirrored[(ci * cout + co) * kk + i] = w[(co * cin + ci) * kk + kk - 1 - i];
            }
        }
    }
    let mt = Tensor::from_vec(&[cin, cout, k, k], mirrored);
    let zero_bias = vec![F::zero(); cin];
    conv2d_forward(dy, mt.data(), &zero_bias, cin, k, k - 1 - pad)
}

/// Accumulate weight/bias gradients: `dw += ∂L/∂w`, `db += ∂L/∂b`.
pub fn conv2d_backward_params<F: Scalar>(
    x: &Tensor<F>,
    dy: &Tensor<F>,
    k: usize,
    pad: usize,
    dw: &mut [F],
    db: &mut [F],
) {
    let (n, cin, h, wd) = dims4(x);
    let cout = dy.shape()[1];
    debug_assert_eq!(dw.len(), cout * cin * k * k);
    let plane = h * wd;
    let xd = x.data();
    let dyd = dy.data();
    let block = cin * k * k;

    for (co, dbv) in db.iter_mut().enumerate() {
        let mut bias = F::zero();
        for ni in 0..n {
            for &v in &dyd[(ni * cout + co) * plane..(ni * cout + co + 1) * plane] {
                bias += v;
            }
        }
        *dbv += bias;
    }

    if k == 3 && pad == 1 && h <= CHANNELS_LAST_MAX_side {
        // Channels-last: vectorize over output channels, parallel over taps.
        let xts: Vec<Vec<F>> = (0..n)
            .map(|ni| {
                transpose_pad_cl(&xd[ni * cin * plane..(ni + 1) * cin * plane], cin, h, wd, 1)
            })
            .collect();
        let dyts: Vec<Vec<F>> = (0..n)
            .map(|ni| {
                let img = &dyd[ni * cout * plane..(ni + 1) * cout * plane];
                let mut t = vec![F::zero(); plane * cout];
                for co in 0..cout {
                    for pidx in 0..plane {
                        t[pidx * cout + co] = img[co * plane + pidx];
                    }
                }
                t
            })
            .collect();
        let pw = wd + 2;
        let mut dwt = vec![F::zero(); 9 * cin * cout];
        dwt.par_chunks_mut(cin * cout)
            .enumerate()
            .for_each(|(kk9, acc)| {
                let (kh, kw) = (kk9 / 3, kk9 % 3);
                for ni in 0..n {
                    let xt = &xts[ni];
                    let dyt = &dyts[ni];
                    for r in 0..h {
                        for j in 0..wd {
                            let g = &dyt[(r * wd + j) * cout..(r * wd + j + 1) * cout];
                            let pos = (r + kh) * pw + j + kw;
                            let xrow = &xt[pos * cin..(pos + 1) * cin];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv != F::zero() {
                                    axpy_ma(&mut acc[ci * cout..ci * cout + cout], g, xv);
                                }
                            }
                        }
                    }
                }
            });
        for co in 0..cout {
            for ci in 0..cin {
                for kk9 in 0..9 {
                    dw[(co * cin + ci) * 9 + kk9] += dwt[(kk9 * cin + ci) * cout + co];
                }
            }
        }
        return;
    }

    if k % 2 == 1 && pad == k / 2 && k > 1 {
        let padded = pad_planes(xd, n * cin, h, wd, pad);
        let padded = &padded;
        let pplane = (h + 2 * pad) * (wd + 2 * pad);
        let run = |(co, dwb): (usize, &mut [F])| {
            for ni in 0..n {
                let dyp = &dyd[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
                if k == 3 {
                    let mut ci = 0;
                    while ci + 2 <= cin {
                        let p1 = &padded[(ni * cin + ci) * pplane..(ni * cin + ci + 1) * pplane];
                        let p2 =
                            &padded[(ni * cin + ci + 1) * pplane..(ni * cin + ci + 2) * pplane];
                        let (acc1, acc2) = dwb[ci * 9..(ci + 2) * 9].split_at_mut(9);
                        wgrad3_plane2(acc1, acc2, dyp, p1, p2, h, wd);
                        ci += 2;
                    }
                    if ci < cin {
                        let xp = &padded[(ni * cin + ci) * pplane..(ni * cin + ci + 1) * pplane];
                        wgrad3_plane(&mut dwb[ci * 9..(ci + 1) * 9], dyp, xp, h, wd);
                    }
                } else {
                    for ci in 0..cin {
                        let xp = &padded[(ni * cin + ci) * pplane..(ni * cin + ci + 1) * pplane];
                        wgrad5_plane(&mut dwb[ci * k * k..(ci + 1) * k * k], dyp, xp, h, wd);
                    }
                }
            }
        };
        if n * cout * plane >= PAR_THRESHOLD {
            dw.par_chunks_mut(block)
                .enumerate()
                .for_each(|(co, dwb)| run((co, dwb)));
        } else {
            dw.chunks_mut(block).enumerate().for_each(run);
        }
        return;
    }

    // Generic fallback (1×1 and unusual paddings).
    let run = |(co, dwb): (usize, &mut [F])| {
        let (hi, wi) = (h as isize, wd as isize);
        let p = pad as isize;
        for ni in 0..n {
            let dyp = &dyd[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            for ci in 0..cin {
                let xp = &xd[(ni * cin + ci) * plane..(ni * cin + ci + 1) * plane];
                if k == 1 && pad == 0 {
                    dwb[ci] += dot(dyp, xp);
                    continue;
                }
                for kh in 0..k as isize {
                    let dh = kh - p;
                    let h_lo = (-dh).max(0) as usize;
                    let h_hi = (hi - dh).min(hi) as usize;
                    for kw in 0..k as isize {
                        let dwo = kw - p;
                        let w_lo = (-dwo).max(0) as usize;
                        let w_hi = (wi - dwo).min(wi) as usize;
                        if w_lo >= w_hi {
                            continue;
                        }
                        let mut acc = F::zero();
                        for hr in h_lo..h_hi {
                            let src = (hr as isize + dh) as usize;
                            let dyrow = &dyp[hr * wd + w_lo..hr * wd + w_hi];
                            let xrow = &xp[src * wd + (w_lo as isize + dwo) as usize
                                ..src * wd + (w_hi as isize + dwo) as usize];
                            acc += dot(dyrow, xrow);
                        }
                        dwb[ci * k * k + (kh * k as isize + kw) as usize] += acc;
                    }
                }
            }
        }
    };
    if n * cout * plane >= PAR_THRESHOLD {
        dw.par_chunks_mut(block)
            .enumerate()
            .for_each(|(co, dwb)| run((co, dwb)));
    } else {
        dw.chunks_mut(block).enumerate().for_each(run);
    }
}

/// 2×2 average pooling with stride 2. Spatial size must be even.
pub fn avg_pool2_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = dims4(x);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let quarter = F::from_f64(0.25);
    let xd = x.data();
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .with_min_len((PAR_THRESHOLD / (oh * ow)).max(1))
        .enumerate()
        .for_each(|(idx, out)| {
            let xp = &xd[idx * h * w..(idx + 1) * h * w];
            for i in 0..oh {
                let r0 = &xp[2 * i * w..2 * i * w + w];
                let r1 = &xp[(2 * i + 1) * w..(2 * i + 1) * w + w];
                let orow = &mut out[i * ow..(i + 1) * ow];
                for j in 0..ow {
                    orow[j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
                }
            }
        });
    y
}

pub fn avg_pool2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (n, c, oh, ow) = dims4(dy);
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let quarter = F::from_f64(0.25);
    let dyd = dy.data();
    dx.data_mut()
        .par_chunks_mut(h * w)
        .with_min_len((PAR_THRESHOLD / (h * w)).max(1))
        .enumerate()
        .for_each(|(idx, out)| {
            let dyp = &dyd[idx * oh * ow..(idx + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let g = dyp[i * ow + j] * quarter;
                    out[2 * i * w + 2 * j] = g;
                    out[2 * i * w + 2 * j + 1] = g;
                    out[(2 * i + 1) * w + 2 * j] = g;
                    out[(2 * i + 1) * w + 2 * j + 1] = g;
                }
            }
        });
    dx
}

/// Nearest-neighbor ×2 upsampling.
pub fn upsample2_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h * 2, w * 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .with_min_len((PAR_THRESHOLD / (oh * ow)).max(1))
        .enumerate()
        .for_each(|(idx, out)| {
            let xp = &xd[idx * h * w..(idx + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = xp[i * w + j];
                    out[2 * i * ow + 2 * j] = v;
                    out[2 * i * ow + 2 * j + 1] = v;
                    out[(2 * i + 1) * ow + 2 * j] = v;
                    out[(2 * i + 1) * ow + 2 * j + 1] = v;
                }
            }
        });
    y
}

pub fn upsample2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (n, c, oh, ow) = dims4(dy);
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dyd = dy.data();
    dx.data_mut()
        .par_chunks_mut(h * w)
        .with_min_len((PAR_THRESHOLD / (h * w)).max(1))
        .enumerate()
        .for_each(|(idx, out)| {
            let dyp = &dyd[idx * oh * ow..(idx + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    out[i * w + j] = dyp[2 * i * ow + 2 * j]
                        + dyp[2 * i * ow + 2 * j + 1]
                        + dyp[(2 * i + 1) * ow + 2 * j]
                        + dyp[(2 * i + 1) * ow + 2 * j + 1];
                }
            }
        });
    dx
}

/// Leaky rectifier, negative slope `slope`.
pub fn leaky_relu_forward<F: Scalar>(x: &Tensor<F>, slope: F) -> Tensor<F> {
    let mut y = Tensor::zeros(x.shape());
    par_zip(y.data_mut(), x.data(), |o, &v| {
        *o = if v > F::zero() { v } else { slope * v }
    });
    y
}

/// Backward from the forward *output* (the rectifier preserves sign).
pub fn leaky_relu_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>, slope: F) -> Tensor<F> {
    debug_assert_eq!(y.shape(), dy.shape());
    let mut dx = Tensor::zeros(y.shape());
    let yd = y.data();
    let dyd = dy.data();
    dx.data_mut()
        .par_chunks_mut(ELEM_CHUNK)
        .enumerate()
        .for_each(|(c, out)| {
            let base = c * ELEM_CHUNK;
            for (i, o) in out.iter_mut().enumerate() {
                let g = dyd[base + i];
                *o = if yd[base + i] > F::zero() { g } else { slope * g };
            }
        });
    dx
}

/// Fixed chunk width of parallel elementwise passes.
const ELEM_CHUNK: usize = 1 << 14;

/// Parallel elementwise `f(&mut out[i], &x[i])` over equal-length slices.
fn par_zip<F: Scalar>(out: &mut [F], x: &[F], f: impl Fn(&mut F, &F) + Send + Sync) {
    debug_assert_eq!(out.len(), x.len());
    out.par_chunks_mut(ELEM_CHUNK)
        .zip(x.par_chunks(ELEM_CHUNK))
        .for_each(|(o, xs)| {
            for (a, b) in o.iter_mut().zip(xs.iter()) {
                f(a, b);
            }
        });
}

/// `y = x Wᵀ + b` with `x: [N, din]`, `w: [dout, din]`.
pub fn linear_forward<F: Scalar>(x: &Tensor<F>, w: &[F], b: &[F], dout: usize) -> Tensor<F> {
    let n = x.shape()[0];
    let din = x.shape()[1];
    debug_assert_eq!(w.len(), dout * din);
    let mut y = Tensor::zeros(&[n, dout]);
    let xd = x.data();
    let run = |(i, row): (usize, &mut [F])| {
        let xrow = &xd[i * din..(i + 1) * din];
        for (o, out) in row.iter_mut().enumerate() {
            *out = b[o] + dot(xrow, &w[o * din..(o + 1) * din]);
        }
    };
    if n * dout * din >= PAR_THRESHOLD {
        y.data_mut().par_chunks_mut(dout).enumerate().for_each(run);
    } else {
        y.data_mut().chunks_mut(dout).enumerate().for_each(run);
    }
    y
}

pub fn linear_backward_input<F: Scalar>(dy: &Tensor<F>, w: &[F], din: usize) -> Tensor<F> {
    let n = dy.shape()[0];
    let dout = dy.shape()[1];
    let mut dx = Tensor::zeros(&[n, din]);
    let dyd = dy.data();
    let run = |(i, row): (usize, &mut [F])| {
        let dyrow = &dyd[i * dout..(i + 1) * dout];
        for (o, &g) in dyrow.iter().enumerate() {
            if g != F::zero() {
                axpy(row, &w[o * din..(o + 1) * din], g);
            }
        }
    };
    if n * dout * din >= PAR_THRESHOLD {
        dx.data_mut().par_chunks_mut(din).enumerate().for_each(run);
    } else {
        dx.data_mut().chunks_mut(din).enumerate().for_each(run);
    }
    dx
}

pub fn linear_backward_params<F: Scalar>(
    x: &Tensor<F>,
    dy: &Tensor<F>,
    dw: &mut [F],
    db: &mut [F],
) {
    let n = x.shape()[0];
    let din = x.shape()[1];
    let dout = dy.shape()[1];
    debug_assert_eq!(dw.len(), dout * din);
    let xd = x.data();
    let dyd = dy.data();
    let run = |(o, (dwrow, dbv)): (usize, (&mut [F], &mut F))| {
        let mut bias = F::zero();
        for i in 0..n {
            let g = dyd[i * dout + o];
            bias += g;
            if g != F::zero() {
                axpy(dwrow, &xd[i * din..(i + 1) * din], g);
            }
        }
        *dbv += bias;
    };
    if n * dout * din >= PAR_THRESHOLD {
        dw.par_chunks_mut(din)
            .zip(db.par_iter_mut())
            .enumerate()
            .for_each(|(o, pair)| run((o, pair)));
    } else {
        dw.chunks_mut(din).zip(db.iter_mut()).enumerate().for_each(run);
    }
}

/// Logistic sigmoid.
pub fn sigmoid_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = Tensor::zeros(x.shape());
    par_zip(y.data_mut(), x.data(), |o, &v| {
        *o = F::one() / (F::one() + (-v).exp())
    });
    y
}

/// Backward from the forward output.
pub fn sigmoid_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(y.shape(), dy.shape());
    let mut dx = dy.clone();
    par_zip(dx.data_mut(), y.data(), |g, &yv| *g = *g * yv * (F::one() - yv));
    dx
}

#[inline]
fn dims4<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4);
    (s[0], s[1], s[2], s[3])
}
