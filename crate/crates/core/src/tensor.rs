//! Dense row-major `f32` tensors and the keyed random generator.
//!
//! Feature maps are laid out `H×W×C`, convolution kernels `m×m×D×C`.
//! Reductions accumulate in `f64`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Elementwise binary operation for [`Tensor::zip_map`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ZipOp {
    Add,
    Sub,
    Mul,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Uniform draws in `[lo, hi)`, consumed from `rng` in row-major order.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        if !(lo < hi) {
            return Err(Error::InvalidParams(format!("uniform bounds {lo} >= {hi}")));
        }
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)` of a rank-3 feature map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(&[0, 0, 0], &self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn frobenius_norm(&self) -> Result<f64> {
        self.check_finite("frobenius_norm")?;
        Ok(self.sum_sq().sqrt())
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v).abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    }

    pub fn zip_map(&self, other: &Tensor, op: ZipOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        let f: fn(f32, f32) -> f32 = match op {
            ZipOp::Add => |a, b| a + b,
            ZipOp::Sub => |a, b| a - b,
            ZipOp::Mul => |a, b| a * b,
        };
        let data: Vec<f32> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = Tensor::from_parts(self.shape.clone(), data);
        out.check_finite("zip_map")?;
        Ok(out)
    }

    pub fn scale(&self, alpha: f32) -> Result<Tensor> {
        let out = Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v * alpha).collect(),
        );
        out.check_finite("scale")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, ZipOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, ZipOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, ZipOp::Mul)
    }

    /// `self += alpha * other` without shape allocation.
    pub(crate) fn axpy(&mut self, alpha: f32, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Counter-based generator keyed by `(seed, stream)`.
///
/// Streams are independent, so per-image draws can be keyed by image id
/// without coupling to any global draw order.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Stream derived from an ordered list of keys (purpose, image id, layer, ...).
    pub fn keyed(seed: u64, keys: &[u64]) -> Self {
        let stream = keys
            .iter()
            .fold(0x6a09_e667_f3bc_c908u64, |acc, &k| mix(acc ^ mix(k.wrapping_add(1))));
        Self::new(seed, stream)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        // gen_range on f32 can round up to `hi`; keep the half-open contract.
        loop {
            let v = self.inner.random_range(lo..hi);
            if v < hi {
                return v;
            }
        }
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
