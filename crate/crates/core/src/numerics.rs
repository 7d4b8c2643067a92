//! Dense arrays, seeded random generation and elementary statistics.
//!
//! Payloads are stored as `f32`; every reduction accumulates in `f64` in
//! sequential index order so results are reproducible bit for bit.

use alloc::format;
use alloc::vec::Vec;

use rand_core::Rng;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};

/// Row-major dense array of `f32` values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl NumArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: alloc::vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(&mut f).collect();
        Self { shape, data }
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

    /// Flat offset of a multi-index. Panics when the index is out of bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {i} out of bounds for axis of size {n}");
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// PCG64 (XSL-RR 128/64) generator seeded from a 64-bit seed and stream id.
///
/// The output sequence depends only on `(seed, stream)`, never on the
/// platform. Uniform draws are formed from the top bits of `next_u64`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Pcg64,
}

const SEED_MIX: u128 = 0x9e37_79b9_7f4a_7c15_f39c_c060_5ced_c834;

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let state = (seed as u128) ^ SEED_MIX;
        Self {
            inner: Pcg64::new(state, stream as u128),
        }
    }

    /// Derives an independent child generator for a named sub-task.
    pub fn fork(&mut self, stream: u64) -> Self {
        Self::with_stream(self.next_u64(), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)` with 24 random bits, exactly representable as `f32`.
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller, one variate per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
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

/// `n` uniform draws in `[0, 1)` as a 1-D array.
pub fn rng_uniform(rng: &mut SeededRng, n: usize) -> NumArray {
    NumArray {
        shape: alloc::vec![n],
        data: (0..n).map(|_| rng.uniform_f32()).collect(),
    }
}

/// Running first and second moments with `f64` accumulation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Population variance (denominator `n`), clamped at zero.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.sum_sq / self.count as f64 - m * m).max(0.0)
    }
}

/// Mean and population standard deviation of `values` using a two-pass
/// reduction in index order.
pub fn mean_std_slice(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, libm::sqrt(var)))
}

/// Population mean and standard deviation of `x` along `axis`.
///
/// The result arrays have `x`'s shape with `axis` removed.
pub fn mean_std(x: &NumArray, axis: usize) -> Result<(NumArray, NumArray)> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let n = shape[axis];
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 elements along axis {axis}, got {n}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &s)| s)
        .collect();
    let mut means = Vec::with_capacity(outer * inner);
    let mut stds = Vec::with_capacity(outer * inner);
    let mut column = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            column.clear();
            column.extend((0..n).map(|k| x.data[(o * n + k) * inner + i] as f64));
            let (m, s) = mean_std_slice(&column)?;
            means.push(m as f32);
            stds.push(s as f32);
        }
    }
    Ok((
        NumArray::new(out_shape.clone(), means)?,
        NumArray::new(out_shape, stds)?,
    ))
}

/// Smallest `f64` strictly greater than `x` (for finite `x`).
pub fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}
