//! Reverse-mode gradient of the mean negative log-likelihood.

use alloc::vec;
use alloc::vec::Vec;

use super::{log_normal, lower_row, upper_row, BlockLogDet, Coupling, FlowParams, Mixing, Subnet};
use crate::error::{Error, Result};

/// Intermediate values of one block kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockTape {
    /// ActNorm output.
    pub normed: Vec<f64>,
    /// Input of the subnet output layer.
    pub hidden: Vec<f64>,
    pub raw: Vec<f64>,
    pub log_scales: Vec<f64>,
    /// Coupling output.
    pub coupled: Vec<f64>,
    /// `U c` for invertible-linear mixing.
    pub upper_out: Vec<f64>,
}

/// Gradient of the mean NLL, laid out like [`FlowParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub values: Vec<f64>,
}

impl FlowGrads {
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|g| g * g).sum())
    }
}

impl FlowParams {
    /// Mean NLL over `batch` and its gradient with respect to every
    /// trainable parameter.
    pub fn nll_grad(&self, batch: &[Vec<f64>]) -> Result<(f64, FlowGrads)> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let n_blocks = self.spec.n_blocks;
        let mut grads = vec![0.0; self.theta.len()];
        let mut tapes = vec![BlockTape::default(); n_blocks];
        let mut total = 0.0;
        for x in batch {
            self.check_ready(x)?;
            let mut cur = x.clone();
            let mut log_det = 0.0;
            for (b, tape) in tapes.iter_mut().enumerate() {
                let mut ld = BlockLogDet::default();
                cur = self.block_forward(b, &cur, &mut ld, Some(tape))?;
                log_det += ld.actnorm + ld.coupling + ld.mixing;
            }
            total += -(log_normal(&cur) + log_det);
            // d(0.5 |z|^2)/dz = z
            let mut g = cur;
            for b in (0..n_blocks).rev() {
                g = self.block_backward(b, &tapes[b], &g, &mut grads);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for v in &mut grads {
            *v *= scale;
        }
        for b in 0..n_blocks {
            if !grads[self.block_range(b)].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { block: b });
            }
        }
        Ok((total * scale, FlowGrads { values: grads }))
    }

    /// Propagates `g_out = dL/dy` through block `b`, accumulating parameter
    /// gradients (including the `-log det` terms) into `grads`, and returns
    /// `dL/dx`.
    fn block_backward(&self, b: usize, tape: &BlockTape, g_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let dim = self.spec.dim;
        let d = self.spec.split();
        let m = self.spec.transformed();
        let l = self.layout[b];
        let th = &self.theta;
        let fixed = &self.fixed[b];

        // mixing
        let mut g_c = vec![0.0; dim];
        match self.spec.mixing {
            Mixing::RandomPermutation => {
                for (i, &p) in fixed.perm.iter().enumerate() {
                    g_c[p] += g_out[i];
                }
            }
            Mixing::InvertibleLinear => {
                let mut g_lo = vec![0.0; dim];
                for (i, &p) in fixed.perm.iter().enumerate() {
                    g_lo[p] = g_out[i];
                }
                let u = &tape.upper_out;
                // lo = L u
                let mut g_u = g_lo.clone();
                for i in 1..dim {
                    let row = l.lower + lower_row(i);
                    let gi = g_lo[i];
                    for j in 0..i {
                        grads[row + j] += gi * u[j];
                        g_u[j] += th[row + j] * gi;
                    }
                }
                // u = U c
                let c = &tape.coupled;
                for i in 0..dim {
                    let diag = fixed.sign[i] as f64 * libm::exp(th[l.log_diag + i]);
                    let gi = g_u[i];
                    grads[l.log_diag + i] += gi * diag * c[i] - 1.0;
                    g_c[i] += diag * gi;
                    let row = l.upper + upper_row(i, dim);
                    for (k, j) in (i + 1..dim).enumerate() {
                        grads[row + k] += gi * c[j];
                        g_c[j] += th[row + k] * gi;
                    }
                }
            }
        }

        // coupling
        let (cs, ts) = self.partition(b);
        let a = &tape.normed;
        let mut g_a = g_c.clone();
        let mut g_sub_out = vec![0.0; 2 * m];
        let mut g_ls = vec![0.0; m];
        for j in 0..m {
            let e = libm::exp(tape.log_scales[j]);
            let gy = g_c[ts + j];
            g_a[ts + j] = gy * e;
            g_ls[j] = gy * a[ts + j] * e - 1.0;
            g_sub_out[m + j] = gy;
        }
        if self.spec.coupling == Coupling::Gin {
            let mean = g_ls.iter().sum::<f64>() / m as f64;
            for v in &mut g_ls {
                *v -= mean;
            }
        }
        let clamp = self.spec.clamp;
        for j in 0..m {
            let t = libm::tanh(tape.raw[j] / clamp);
            g_sub_out[j] = g_ls[j] * (1.0 - t * t);
        }
        let h = &tape.hidden;
        let n_in = h.len();
        let mut g_h = vec![0.0; n_in];
        for k in 0..2 * m {
            let gk = g_sub_out[k];
            if gk == 0.0 {
                continue;
            }
            grads[l.b + k] += gk;
            let row = l.w + k * n_in;
            for (i, hv) in h.iter().enumerate() {
                grads[row + i] += gk * hv;
                g_h[i] += th[row + i] * gk;
            }
        }
        let cond = &a[cs..cs + d];
        match self.spec.subnet {
            Subnet::Linear => {
                for i in 0..d {
                    g_a[cs + i] += g_h[i];
                }
            }
            Subnet::Mlp { width } => {
                for k in 0..width {
                    let gp = g_h[k] * (1.0 - h[k] * h[k]);
                    if gp == 0.0 {
                        continue;
                    }
                    grads[l.b1 + k] += gp;
                    let row = l.w1 + k * d;
                    for i in 0..d {
                        grads[row + i] += gp * cond[i];
                        g_a[cs + i] += th[row + i] * gp;
                    }
                }
            }
        }

        // actnorm
        let mut g_x = vec![0.0; dim];
        for i in 0..dim {
            let e = libm::exp(th[l.log_scale + i]);
            g_x[i] = g_a[i] * e;
            grads[l.bias + i] += g_a[i] * e;
            grads[l.log_scale + i] += g_a[i] * a[i] - 1.0;
        }
        g_x
    }
}
