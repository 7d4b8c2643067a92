//! Normalizing flow over sampled activation vectors.
//!
//! A flow is a stack of blocks, each applying in order
//!
//! 1. **ActNorm**: `a = (x + bias) * exp(log_scale)` per dimension,
//! 2. **coupling**: the conditioning half passes through and the other half
//!    becomes `v * exp(ls) + t` where `(raw, t)` come from a subnet of the
//!    conditioning half and `ls = c * tanh(raw / c)` (soft clamp, `c = 0.5`
//!    by default). GIN coupling additionally centres `ls` so the block is
//!    volume preserving,
//! 3. **mixing**: a fixed permutation, or an invertible linear map
//!    `W = P L U` with `L` unit lower triangular and
//!    `diag(U) = sign * exp(log_diag)`.
//!
//! With `d = floor(D/2)` conditioning dimensions, even blocks condition on
//! the first `d` coordinates and odd blocks on the last `d`.
//!
//! All trainable parameters live in one flat `f64` vector. Per block the
//! layout is: ActNorm `log_scale[D]`, `bias[D]`; subnet (MLP only:
//! `w1[width x d]`, `b1[width]`), output `w[2m x in]`, `b[2m]` where the
//! first `m = D - d` outputs are raw log-scales and the rest translations;
//! invertible-linear mixing only: strictly lower `L` packed by rows,
//! strictly upper `U` packed by rows, `log_diag[D]`. Matrices are
//! row-major.

mod batch;
mod grad;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{mean_std_slice, SeededRng};

pub use grad::FlowGrads;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Batch standard deviations below this leave the ActNorm scale at one.
pub const ACTNORM_MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Coupling {
    Affine,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mixing {
    RandomPermutation,
    InvertibleLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "type"))]
pub enum Subnet {
    /// One affine map from the conditioning half to `(raw, t)`.
    Linear,
    /// One tanh hidden layer of the given width.
    Mlp { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowSpec {
    pub dim: usize,
    pub n_blocks: usize,
    pub coupling: Coupling,
    pub mixing: Mixing,
    pub subnet: Subnet,
    pub clamp: f64,
}

impl FlowSpec {
    pub fn new(dim: usize, n_blocks: usize, coupling: Coupling, mixing: Mixing, subnet: Subnet) -> Self {
        Self {
            dim,
            n_blocks,
            coupling,
            mixing,
            subnet,
            clamp: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("flow dim must be >= 2, got {}", self.dim)));
        }
        if self.n_blocks == 0 {
            return Err(Error::InvalidArgument("flow needs at least one block".into()));
        }
        if !(self.clamp > 0.0) || !self.clamp.is_finite() {
            return Err(Error::InvalidArgument(format!("clamp must be positive, got {}", self.clamp)));
        }
        if let Subnet::Mlp { width: 0 } = self.subnet {
            return Err(Error::InvalidArgument("mlp width must be positive".into()));
        }
        Ok(())
    }

    /// Conditioning width `d = floor(D/2)`.
    pub fn split(&self) -> usize {
        self.dim / 2
    }

    /// Transformed width `m = D - d`.
    pub fn transformed(&self) -> usize {
        self.dim - self.split()
    }
}

/// Offsets of one block's parameters inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub log_scale: usize,
    pub bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w: usize,
    pub b: usize,
    pub lower: usize,
    pub upper: usize,
    pub log_diag: usize,
    pub end: usize,
}

fn layout_for(spec: &FlowSpec) -> Vec<BlockLayout> {
    let dim = spec.dim;
    let d = spec.split();
    let m = spec.transformed();
    let tri = dim * (dim - 1) / 2;
    let mut off = 0;
    let mut out = Vec::with_capacity(spec.n_blocks);
    for _ in 0..spec.n_blocks {
        let log_scale = off;
        let bias = log_scale + dim;
        let mut cur = bias + dim;
        let (w1, b1, sub_in) = match spec.subnet {
            Subnet::Linear => (cur, cur, d),
            Subnet::Mlp { width } => {
                let w1 = cur;
                let b1 = w1 + width * d;
                cur = b1 + width;
                (w1, b1, width)
            }
        };
        let w = cur;
        let b = w + 2 * m * sub_in;
        cur = b + 2 * m;
        let (lower, upper, log_diag) = match spec.mixing {
            Mixing::RandomPermutation => (cur, cur, cur),
            Mixing::InvertibleLinear => {
                let lower = cur;
                let upper = lower + tri;
                let log_diag = upper + tri;
                cur = log_diag + dim;
                (lower, upper, log_diag)
            }
        };
        out.push(BlockLayout {
            log_scale,
            bias,
            w1,
            b1,
            w,
            b,
            lower,
            upper,
            log_diag,
            end: cur,
        });
        off = cur;
    }
    out
}

/// Non-trainable state of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockFixed {
    /// Mixing permutation: output `i` reads input `perm[i]`.
    pub perm: Vec<usize>,
    /// Signs of `diag(U)`; empty for permutation mixing.
    pub sign: Vec<i8>,
    pub actnorm_initialized: bool,
}

/// Latent code and `log |det dz/dx|` of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub log_det: f64,
}

/// Log-determinant contributions of one block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockLogDet {
    pub actnorm: f64,
    pub coupling: f64,
    pub mixing: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    spec: FlowSpec,
    theta: Vec<f64>,
    layout: Vec<BlockLayout>,
    fixed: Vec<BlockFixed>,
}

/// Start of row `i` of a strictly-lower matrix packed by rows.
#[inline]
pub(crate) fn lower_row(i: usize) -> usize {
    i * (i.saturating_sub(1)) / 2
}

/// Start of row `i` of a strictly-upper `n x n` matrix packed by rows.
#[inline]
pub(crate) fn upper_row(i: usize, n: usize) -> usize {
    i * (n - 1) - i * (i.saturating_sub(1)) / 2
}

impl FlowParams {
    /// Freshly initialized flow: the coupling output layer is zero so every
    /// block starts as ActNorm followed by its mixing map. MLP hidden
    /// weights are `N(0, 0.01²)`, or Xavier-normal when `xavier` is set.
    pub fn new(spec: FlowSpec, rng: &mut SeededRng, xavier: bool) -> Result<Self> {
        let mut params = Self::identity(spec)?;
        for b in 0..spec.n_blocks {
            params.fixed[b].perm = rng.permutation(spec.dim);
            if let Subnet::Mlp { width } = spec.subnet {
                let l = params.layout[b];
                let d = spec.split();
                let std = if xavier {
                    libm::sqrt(2.0 / (d + width) as f64)
                } else {
                    0.01
                };
                for v in &mut params.theta[l.w1..l.b1] {
                    *v = std * rng.normal();
                }
            }
        }
        Ok(params)
    }

    /// The identity transform: identity permutations, zero parameters,
    /// ActNorm marked uninitialized.
    pub fn identity(spec: FlowSpec) -> Result<Self> {
        spec.validate()?;
        let layout = layout_for(&spec);
        let n = layout.last().map_or(0, |l| l.end);
        let fixed = (0..spec.n_blocks)
            .map(|_| BlockFixed {
                perm: (0..spec.dim).collect(),
                sign: match spec.mixing {
                    Mixing::RandomPermutation => Vec::new(),
                    Mixing::InvertibleLinear => vec![1; spec.dim],
                },
                actnorm_initialized: false,
            })
            .collect();
        Ok(Self {
            spec,
            theta: vec![0.0; n],
            layout,
            fixed,
        })
    }

    /// Rebuilds parameters from their stored parts.
    pub fn from_parts(spec: FlowSpec, theta: Vec<f64>, fixed: Vec<BlockFixed>) -> Result<Self> {
        let mut params = Self::identity(spec)?;
        if theta.len() != params.theta.len() {
            return Err(Error::ShapeMismatch(format!(
                "flow expects {} parameters, got {}",
                params.theta.len(),
                theta.len()
            )));
        }
        if fixed.len() != spec.n_blocks {
            return Err(Error::ShapeMismatch(format!(
                "flow expects {} blocks, got {}",
                spec.n_blocks,
                fixed.len()
            )));
        }
        for (b, f) in fixed.iter().enumerate() {
            let mut seen = vec![false; spec.dim];
            if f.perm.len() != spec.dim {
                return Err(Error::ShapeMismatch(format!("block {b}: permutation length")));
            }
            for &p in &f.perm {
                if p >= spec.dim || seen[p] {
                    return Err(Error::InvalidArgument(format!("block {b}: permutation is not a bijection")));
                }
                seen[p] = true;
            }
            let want_sign = match spec.mixing {
                Mixing::RandomPermutation => 0,
                Mixing::InvertibleLinear => spec.dim,
            };
            if f.sign.len() != want_sign || f.sign.iter().any(|&s| s != 1 && s != -1) {
                return Err(Error::InvalidArgument(format!("block {b}: invalid diagonal signs")));
            }
        }
        params.theta = theta;
        params.fixed = fixed;
        Ok(params)
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn fixed(&self) -> &[BlockFixed] {
        &self.fixed
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.fixed.iter().all(|f| f.actnorm_initialized)
    }

    /// Marks every ActNorm layer as initialized without touching values.
    pub fn mark_initialized(&mut self) {
        for f in &mut self.fixed {
            f.actnorm_initialized = true;
        }
    }

    /// Fills every trainable parameter with `U(-scale, scale)` and marks
    /// ActNorm initialized. Used for diagnostics and tests.
    pub fn randomize(&mut self, rng: &mut SeededRng, scale: f64) {
        for v in &mut self.theta {
            *v = rng.uniform_range(-scale, scale);
        }
        self.mark_initialized();
    }

    /// Parameter index range of block `b` (for error reporting and checks).
    pub fn block_range(&self, b: usize) -> core::ops::Range<usize> {
        let start = if b == 0 { 0 } else { self.layout[b - 1].end };
        start..self.layout[b].end
    }

    /// Data-dependent ActNorm initialization: each block's ActNorm is set so
    /// that its output on `batch` has per-dimension mean 0 and std 1.
    pub fn actnorm_init(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "actnorm init needs at least 2 samples, got {}",
                batch.len()
            )));
        }
        if self.fixed.iter().any(|f| f.actnorm_initialized) {
            return Err(Error::AlreadyInitialized);
        }
        for x in batch {
            self.check_len(x)?;
        }
        let dim = self.spec.dim;
        let mut current: Vec<Vec<f64>> = batch.to_vec();
        let mut column = vec![0.0; batch.len()];
        for b in 0..self.spec.n_blocks {
            let l = self.layout[b];
            for i in 0..dim {
                for (slot, x) in column.iter_mut().zip(&current) {
                    *slot = x[i];
                }
                let (mean, std) = mean_std_slice(&column)?;
                self.theta[l.bias + i] = -mean;
                self.theta[l.log_scale + i] = if std < ACTNORM_MIN_STD {
                    0.0
                } else {
                    -libm::log(std)
                };
            }
            self.fixed[b].actnorm_initialized = true;
            for x in &mut current {
                let mut ld = BlockLogDet::default();
                *x = self.block_forward(b, x, &mut ld, None)?;
            }
        }
        Ok(())
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.dim {
            return Err(Error::ShapeMismatch(format!(
                "flow expects {} inputs, got {}",
                self.spec.dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn check_ready(&self, x: &[f64]) -> Result<()> {
        self.check_len(x)?;
        if !self.is_initialized() {
            return Err(Error::NotInitialized);
        }
        Ok(())
    }

    /// Maps `x` to its latent code.
    pub fn forward(&self, x: &[f64]) -> Result<LatentCode> {
        self.forward_detailed(x).map(|(code, _)| code)
    }

    /// Like [`forward`](Self::forward) but also reports each block's
    /// log-determinant contributions.
    pub fn forward_detailed(&self, x: &[f64]) -> Result<(LatentCode, Vec<BlockLogDet>)> {
        self.check_ready(x)?;
        let mut cur = x.to_vec();
        let mut parts = Vec::with_capacity(self.spec.n_blocks);
        let mut log_det = 0.0;
        for b in 0..self.spec.n_blocks {
            let mut ld = BlockLogDet::default();
            cur = self.block_forward(b, &cur, &mut ld, None)?;
            log_det += ld.actnorm + ld.coupling + ld.mixing;
            parts.push(ld);
        }
        Ok((LatentCode { z: cur, log_det }, parts))
    }

    /// Maps a latent code back to input space.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_ready(z)?;
        let mut cur = z.to_vec();
        for b in (0..self.spec.n_blocks).rev() {
            cur = self.block_inverse(b, &cur)?;
        }
        Ok(cur)
    }

    /// `log p(x) = log N(z; 0, I) + log |det dz/dx|`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let code = self.forward(x)?;
        Ok(log_normal(&code.z) + code.log_det)
    }

    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        self.log_prob(x).map(|lp| -lp)
    }

    /// Mean negative log-likelihood over `batch`.
    pub fn mean_nll(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let mut total = 0.0;
        for x in batch {
            total += self.nll(x)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// `(conditioning_start, transformed_start)` of block `b`.
    fn partition(&self, b: usize) -> (usize, usize) {
        let m = self.spec.transformed();
        if b % 2 == 0 {
            (0, self.spec.split())
        } else {
            (m, 0)
        }
    }

    /// Subnet outputs `(raw, t)` concatenated, optionally keeping the hidden
    /// activations.
    fn subnet(&self, b: usize, cond: &[f64], hidden_out: Option<&mut Vec<f64>>) -> Vec<f64> {
        let l = self.layout[b];
        let m = self.spec.transformed();
        let th = &self.theta;
        let hidden;
        let input: &[f64] = match self.spec.subnet {
            Subnet::Linear => cond,
            Subnet::Mlp { width } => {
                let d = cond.len();
                hidden = (0..width)
                    .map(|k| {
                        let row = &th[l.w1 + k * d..l.w1 + (k + 1) * d];
                        libm::tanh(th[l.b1 + k] + dot(row, cond))
                    })
                    .collect::<Vec<f64>>();
                &hidden
            }
        };
        let n_in = input.len();
        let out = (0..2 * m)
            .map(|k| th[l.b + k] + dot(&th[l.w + k * n_in..l.w + (k + 1) * n_in], input))
            .collect();
        if let Some(h) = hidden_out {
            h.clear();
            h.extend_from_slice(input);
        }
        out
    }

    /// Effective log-scales from raw subnet outputs.
    fn log_scales(&self, raw: &[f64]) -> Vec<f64> {
        let c = self.spec.clamp;
        let mut ls: Vec<f64> = raw.iter().map(|&r| c * libm::tanh(r / c)).collect();
        if self.spec.coupling == Coupling::Gin {
            let mean = ls.iter().sum::<f64>() / ls.len() as f64;
            for v in &mut ls {
                *v -= mean;
            }
        }
        ls
    }

    pub(crate) fn block_forward(
        &self,
        b: usize,
        x: &[f64],
        ld: &mut BlockLogDet,
        mut tape: Option<&mut grad::BlockTape>,
    ) -> Result<Vec<f64>> {
        let dim = self.spec.dim;
        let d = self.spec.split();
        let m = self.spec.transformed();
        let l = self.layout[b];
        let th = &self.theta;

        // actnorm
        let mut a = vec![0.0; dim];
        for i in 0..dim {
            a[i] = (x[i] + th[l.bias + i]) * libm::exp(th[l.log_scale + i]);
        }
        ld.actnorm = th[l.log_scale..l.log_scale + dim].iter().sum();

        // coupling
        let (cs, ts) = self.partition(b);
        let mut hidden = Vec::new();
        let out = self.subnet(b, &a[cs..cs + d], Some(&mut hidden));
        let ls = self.log_scales(&out[..m]);
        let mut c = a.clone();
        for j in 0..m {
            c[ts + j] = a[ts + j] * libm::exp(ls[j]) + out[m + j];
        }
        ld.coupling = ls.iter().sum();

        // mixing
        let mut u = Vec::new();
        let fixed = &self.fixed[b];
        let y = match self.spec.mixing {
            Mixing::RandomPermutation => {
                ld.mixing = 0.0;
                fixed.perm.iter().map(|&p| c[p]).collect::<Vec<f64>>()
            }
            Mixing::InvertibleLinear => {
                u = vec![0.0; dim];
                for i in 0..dim {
                    let diag = fixed.sign[i] as f64 * libm::exp(th[l.log_diag + i]);
                    let row = l.upper + upper_row(i, dim);
                    u[i] = diag * c[i] + dot(&th[row..row + dim - 1 - i], &c[i + 1..]);
                }
                let mut lo = vec![0.0; dim];
                for i in 0..dim {
                    let row = l.lower + lower_row(i);
                    lo[i] = u[i] + dot(&th[row..row + i], &u[..i]);
                }
                ld.mixing = th[l.log_diag..l.log_diag + dim].iter().sum();
                fixed.perm.iter().map(|&p| lo[p]).collect()
            }
        };
        if !y.iter().all(|v| v.is_finite()) || !ld.coupling.is_finite() {
            return Err(Error::NumericalOverflow { block: b });
        }
        if let Some(t) = tape.as_deref_mut() {
            t.normed = a;
            t.hidden = hidden;
            t.raw = out[..m].to_vec();
            t.log_scales = ls;
            t.coupled = c;
            t.upper_out = u;
        }
        Ok(y)
    }

    fn block_inverse(&self, b: usize, y: &[f64]) -> Result<Vec<f64>> {
        let dim = self.spec.dim;
        let d = self.spec.split();
        let m = self.spec.transformed();
        let l = self.layout[b];
        let th = &self.theta;
        let fixed = &self.fixed[b];

        // mixing
        let mut c = vec![0.0; dim];
        match self.spec.mixing {
            Mixing::RandomPermutation => {
                for (i, &p) in fixed.perm.iter().enumerate() {
                    c[p] = y[i];
                }
            }
            Mixing::InvertibleLinear => {
                let mut lo = vec![0.0; dim];
                for (i, &p) in fixed.perm.iter().enumerate() {
                    lo[p] = y[i];
                }
                let mut u = vec![0.0; dim];
                for i in 0..dim {
                    let row = l.lower + lower_row(i);
                    u[i] = lo[i] - dot(&th[row..row + i], &u[..i]);
                }
                for i in (0..dim).rev() {
                    let diag = fixed.sign[i] as f64 * libm::exp(th[l.log_diag + i]);
                    let row = l.upper + upper_row(i, dim);
                    c[i] = (u[i] - dot(&th[row..row + dim - 1 - i], &c[i + 1..])) / diag;
                }
            }
        }

        // coupling
        let (cs, ts) = self.partition(b);
        let out = self.subnet(b, &c[cs..cs + d], None);
        let ls = self.log_scales(&out[..m]);
        let mut a = c;
        for j in 0..m {
            a[ts + j] = (a[ts + j] - out[m + j]) * libm::exp(-ls[j]);
        }

        // actnorm
        let x: Vec<f64> = (0..dim)
            .map(|i| a[i] * libm::exp(-th[l.log_scale + i]) - th[l.bias + i])
            .collect();
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalOverflow { block: b });
        }
        Ok(x)
    }
}

/// Standard normal log-density of `z`.
pub fn log_normal(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * LN_2PI - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
