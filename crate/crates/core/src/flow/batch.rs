//! Forward and inverse passes over many inputs at once.
//!
//! Inputs are processed in tiles of [`LANES`] stored transposed (one
//! `[f64; LANES]` per coordinate), so each parameter is read once per tile
//! and the inner loops run across inputs. Every output is computed with the
//! same operations in the same order as the single-input path, so results
//! are identical.

use alloc::vec;
use alloc::vec::Vec;

use super::{lower_row, upper_row, FlowParams, LatentCode, Mixing, Subnet};
use crate::error::{Error, Result};

const LANES: usize = 16;

type Lane = [f64; LANES];

/// `row · x[start..start + row.len()]` for every lane, summed in index order.
#[inline]
fn dot_lanes(row: &[f64], x: &[Lane], start: usize) -> Lane {
    let mut s = [0.0; LANES];
    for (&r, v) in row.iter().zip(&x[start..start + row.len()]) {
        for t in 0..LANES {
            s[t] += r * v[t];
        }
    }
    s
}

fn to_lanes(xs: &[Vec<f64>], dim: usize) -> Vec<Lane> {
    let mut out = vec![[0.0; LANES]; dim];
    for (t, x) in xs.iter().enumerate() {
        for (lane, &v) in out.iter_mut().zip(x) {
            lane[t] = v;
        }
    }
    out
}

fn from_lanes(x: &[Lane], t: usize) -> Vec<f64> {
    x.iter().map(|lane| lane[t]).collect()
}

fn permute(x: &mut Vec<Lane>, perm: &[usize]) {
    *x = perm.iter().map(|&p| x[p]).collect();
}

fn unpermute(x: &mut Vec<Lane>, perm: &[usize]) {
    let mut out = vec![[0.0; LANES]; x.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = x[i];
    }
    *x = out;
}

impl FlowParams {
    /// [`forward`](Self::forward) for every input of `xs`.
    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<LatentCode>> {
        for x in xs {
            self.check_ready(x)?;
        }
        let mut out = Vec::with_capacity(xs.len());
        for tile in xs.chunks(LANES) {
            let mut x = to_lanes(tile, self.spec.dim);
            let mut log_det = [0.0; LANES];
            for b in 0..self.spec.n_blocks {
                self.lanes_forward(b, &mut x, &mut log_det, tile.len())?;
            }
            out.extend((0..tile.len()).map(|t| LatentCode {
                z: from_lanes(&x, t),
                log_det: log_det[t],
            }));
        }
        Ok(out)
    }

    /// [`inverse`](Self::inverse) for every code of `zs`.
    pub fn inverse_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for z in zs {
            self.check_ready(z)?;
        }
        let mut out = Vec::with_capacity(zs.len());
        for tile in zs.chunks(LANES) {
            let mut y = to_lanes(tile, self.spec.dim);
            for b in (0..self.spec.n_blocks).rev() {
                self.lanes_inverse(b, &mut y, tile.len())?;
            }
            out.extend((0..tile.len()).map(|t| from_lanes(&y, t)));
        }
        Ok(out)
    }

    /// Subnet outputs `(raw, t)` of the conditioning rows `cs..cs + d`.
    fn lanes_subnet(&self, b: usize, x: &[Lane], cs: usize) -> Vec<Lane> {
        let l = self.layout[b];
        let d = self.spec.split();
        let m = self.spec.transformed();
        let th = &self.theta;
        let hidden: Vec<Lane>;
        let (input, start, n_in) = match self.spec.subnet {
            Subnet::Linear => (x, cs, d),
            Subnet::Mlp { width } => {
                hidden = (0..width)
                    .map(|k| {
                        let s = dot_lanes(&th[l.w1 + k * d..l.w1 + (k + 1) * d], x, cs);
                        s.map(|v| libm::tanh(th[l.b1 + k] + v))
                    })
                    .collect();
                (&hidden[..], 0, width)
            }
        };
        (0..2 * m)
            .map(|k| {
                let s = dot_lanes(&th[l.w + k * n_in..l.w + (k + 1) * n_in], input, start);
                s.map(|v| th[l.b + k] + v)
            })
            .collect()
    }

    /// Per-lane effective log-scales, via the single-input routine.
    fn lanes_log_scales(&self, out: &[Lane], t: usize) -> Vec<f64> {
        let m = self.spec.transformed();
        let raw: Vec<f64> = out[..m].iter().map(|lane| lane[t]).collect();
        self.log_scales(&raw)
    }

    fn lanes_forward(&self, b: usize, x: &mut Vec<Lane>, log_det: &mut Lane, used: usize) -> Result<()> {
        let dim = self.spec.dim;
        let m = self.spec.transformed();
        let l = self.layout[b];
        let th = &self.theta;
        let fixed = &self.fixed[b];

        let actnorm: f64 = th[l.log_scale..l.log_scale + dim].iter().sum();
        for (i, lane) in x.iter_mut().enumerate() {
            let (bias, scale) = (th[l.bias + i], libm::exp(th[l.log_scale + i]));
            for v in lane.iter_mut() {
                *v = (*v + bias) * scale;
            }
        }

        let (cs, ts) = self.partition(b);
        let out = self.lanes_subnet(b, x, cs);
        let mut coupling = [0.0; LANES];
        for (t, ld) in coupling.iter_mut().enumerate().take(used) {
            let ls = self.lanes_log_scales(&out, t);
            for j in 0..m {
                x[ts + j][t] = x[ts + j][t] * libm::exp(ls[j]) + out[m + j][t];
            }
            *ld = ls.iter().sum();
        }

        let mixing = match self.spec.mixing {
            Mixing::RandomPermutation => {
                permute(x, &fixed.perm);
                0.0
            }
            Mixing::InvertibleLinear => {
                let mut u = vec![[0.0; LANES]; dim];
                for i in 0..dim {
                    let diag = fixed.sign[i] as f64 * libm::exp(th[l.log_diag + i]);
                    let row = l.upper + upper_row(i, dim);
                    let s = dot_lanes(&th[row..row + dim - 1 - i], x, i + 1);
                    for t in 0..LANES {
                        u[i][t] = diag * x[i][t] + s[t];
                    }
                }
                for i in 0..dim {
                    let row = l.lower + lower_row(i);
                    let s = dot_lanes(&th[row..row + i], &u, 0);
                    for t in 0..LANES {
                        x[i][t] = u[i][t] + s[t];
                    }
                }
                permute(x, &fixed.perm);
                th[l.log_diag..l.log_diag + dim].iter().sum()
            }
        };

        for t in 0..used {
            if !x.iter().all(|lane| lane[t].is_finite()) || !coupling[t].is_finite() {
                return Err(Error::NumericalOverflow { block: b });
            }
            log_det[t] += actnorm + coupling[t] + mixing;
        }
        Ok(())
    }

    fn lanes_inverse(&self, b: usize, y: &mut Vec<Lane>, used: usize) -> Result<()> {
        let dim = self.spec.dim;
        let m = self.spec.transformed();
        let l = self.layout[b];
        let th = &self.theta;
        let fixed = &self.fixed[b];

        unpermute(y, &fixed.perm);
        if self.spec.mixing == Mixing::InvertibleLinear {
            // y holds L U c: solve L u = y, then U c = u
            let mut u = vec![[0.0; LANES]; dim];
            for i in 0..dim {
                let row = l.lower + lower_row(i);
                let s = dot_lanes(&th[row..row + i], &u, 0);
                for t in 0..LANES {
                    u[i][t] = y[i][t] - s[t];
                }
            }
            for i in (0..dim).rev() {
                let diag = fixed.sign[i] as f64 * libm::exp(th[l.log_diag + i]);
                let row = l.upper + upper_row(i, dim);
                let s = dot_lanes(&th[row..row + dim - 1 - i], y, i + 1);
                for t in 0..LANES {
                    y[i][t] = (u[i][t] - s[t]) / diag;
                }
            }
        }

        let (cs, ts) = self.partition(b);
        let out = self.lanes_subnet(b, y, cs);
        for t in 0..used {
            let ls = self.lanes_log_scales(&out, t);
            for j in 0..m {
                y[ts + j][t] = (y[ts + j][t] - out[m + j][t]) * libm::exp(-ls[j]);
            }
        }
        for (i, lane) in y.iter_mut().enumerate() {
            let (bias, inv) = (th[l.bias + i], -th[l.log_scale + i]);
            for v in lane.iter_mut().take(used) {
                *v = *v * libm::exp(inv) - bias;
            }
        }
        for t in 0..used {
            if !y.iter().all(|lane| lane[t].is_finite()) {
                return Err(Error::NumericalOverflow { block: b });
            }
        }
        Ok(())
    }
}
