//! Flat row-major tensors and the scalar abstraction shared by f32/f64 code.
//!
//! Training runs in f32 (checkpoints store 32-bit floats); gradient checks run
//! the same code in f64. Everything generic over numbers goes through
//! [`Scalar`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// Element type for all numeric kernels. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}

/// Dense row-major tensor with a dynamic shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Standard-normal tensor; draw order is row-major and deterministic for
    /// a given rng state.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| F::std_normal(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of identical volume.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes volume",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    /// Squared L2 distance to another tensor of the same shape.
    pub fn sq_dist(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = a.into_f64() - b.into_f64();
                d * d
            })
            .sum()
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.into_f64() as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.into_f64()).collect(),
        }
    }
}

impl<F: Scalar> Tensor<F> {
    /// Rows of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Per-image slice of a rank-4 `[N, C, H, W]` tensor.
    pub fn image(&self, n: usize) -> &[F] {
        assert_eq!(self.shape.len(), 4);
        let sz = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * sz..(n + 1) * sz]
    }

    /// Copy image `n` out as a standalone `[1, C, H, W]` tensor.
    pub fn image_tensor(&self, n: usize) -> Tensor<F> {
        let s = &self.shape;
        Tensor::from_vec(&[1, s[1], s[2], s[3]], self.image(n).to_vec())
    }
}

/// Stack single-image `[1, C, H, W]` tensors into one `[N, C, H, W]` batch.
pub fn stack_images<F: Scalar>(images: &[Tensor<F>]) -> Tensor<F> {
    assert!(!images.is_empty());
    let s = images[0].shape().to_vec();
    assert_eq!(s[0], 1);
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for im in images {
        assert_eq!(im.shape(), &s[..]);
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(&[images.len(), s[1], s[2], s[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_and_reshape() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(t.len(), 6);
        let t = t.reshaped(&[3, 2]);
        assert_eq!(t.shape(), &[3, 2]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[4, 4], &mut a);
        let y = Tensor::<f64>::randn(&[4, 4], &mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn stack_preserves_order() {
        let a = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 1, 2, 2], 2.0);
        let s = stack_images(&[a, b]);
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.image(0), &[1.0; 4]);
        assert_eq!(s.image(1), &[2.0; 4]);
    }
}
