//! Synthetic activation records for desk-scale experiments.
//!
//! Regular records come from a fixed correlated Gaussian field: every
//! stored value is `mu[v] + sqrt(corr) * f[c] + sqrt(1 - corr) * e[v]`
//! where `mu` is a fixed base pattern, `f[c]` a per-channel factor shared
//! by all pixels of the channel and `e` independent noise. Marginals have
//! unit variance and values within a channel map correlate with `corr`.
//! Anomalous records are fresh regular draws with `shift` added to a fixed
//! quarter of the stored values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::record::{ActivationRecord, Layer, PredictionRecord, SoftmaxMap, CLEAN};

/// Perturbation tag carried by synthetic anomalies.
pub const SHIFT_TAG: &str = "mean_shift";

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<ActivationRecord>,
    /// `0` regular, `1` anomalous; parallel to `records`.
    pub labels: Vec<u8>,
}

/// Layer layout used for a target volume `(H, W, L)`: a full-resolution
/// layer with `ceil(L/2)` channels and a half-resolution layer with the
/// remaining channels, so assembly exercises upsampling.
pub fn synth_layout(dims: [usize; 3]) -> Vec<(&'static str, usize, usize, usize)> {
    let [h, w, l] = dims;
    let first = l.div_ceil(2);
    let mut out = vec![("stage1.conv", first, h, w)];
    if l > first {
        out.push(("stage2.conv", l - first, h.div_ceil(2), w.div_ceil(2)));
    }
    out
}

struct Field {
    layout: Vec<(&'static str, usize, usize, usize)>,
    base: Vec<f32>,
    shifted: Vec<bool>,
}

impl Field {
    fn new(rng: &mut SeededRng, dims: [usize; 3]) -> Self {
        let layout = synth_layout(dims);
        let total: usize = layout.iter().map(|(_, c, h, w)| c * h * w).sum();
        let base = (0..total).map(|_| rng.normal() as f32).collect();
        let order = rng.permutation(total);
        let n_shift = libm::round(total as f64 * 0.25) as usize;
        let mut shifted = vec![false; total];
        for &i in &order[..n_shift] {
            shifted[i] = true;
        }
        Self {
            layout,
            base,
            shifted,
        }
    }

    fn draw(&self, rng: &mut SeededRng, corr: f64, shift: f32) -> Vec<Layer> {
        let a = libm::sqrt(corr);
        let b = libm::sqrt(1.0 - corr);
        let mut offset = 0;
        self.layout
            .iter()
            .map(|&(name, c, h, w)| {
                let n = h * w;
                let mut values = Vec::with_capacity(c * n);
                for _ in 0..c {
                    let factor = rng.normal();
                    for _ in 0..n {
                        let v = offset + values.len();
                        let mut x = self.base[v] as f64 + a * factor + b * rng.normal();
                        if shift != 0.0 && self.shifted[v] {
                            x += shift as f64;
                        }
                        values.push(x as f32);
                    }
                }
                offset += values.len();
                Layer {
                    name: name.into(),
                    channels: c,
                    height: h,
                    width: w,
                    values,
                }
            })
            .collect()
    }
}

/// Generates `n_regular` clean and `n_anomalous` shifted records.
///
/// Regular ids are `reg-00000..`, anomalous ids `anom-00000..`.
pub fn synth_generate(
    rng: &mut SeededRng,
    n_regular: usize,
    n_anomalous: usize,
    dims: [usize; 3],
    shift: f32,
    corr: f64,
) -> Result<SynthDataset> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
    }
    if !(0.0..1.0).contains(&corr) {
        return Err(Error::InvalidArgument(format!("corr must lie in [0, 1), got {corr}")));
    }
    let mut field_rng = rng.fork(1);
    let field = Field::new(&mut field_rng, dims);
    let mut records = Vec::with_capacity(n_regular + n_anomalous);
    let mut labels = Vec::with_capacity(n_regular + n_anomalous);
    for i in 0..n_regular {
        records.push(ActivationRecord {
            input_id: format!("reg-{i:05}"),
            perturbation: CLEAN.into(),
            layers: field.draw(rng, corr, 0.0),
        });
        labels.push(0);
    }
    for i in 0..n_anomalous {
        records.push(ActivationRecord {
            input_id: format!("anom-{i:05}"),
            perturbation: SHIFT_TAG.into(),
            layers: field.draw(rng, corr, shift),
        });
        labels.push(1);
    }
    Ok(SynthDataset { records, labels })
}

/// Stand-in segmentation head for synthetic records: a fixed random linear
/// read-out of the first layer's channels followed by a per-pixel softmax.
#[derive(Debug, Clone)]
pub struct SynthReadout {
    classes: usize,
    channels: usize,
    /// `classes x channels`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SynthReadout {
    pub fn new(rng: &mut SeededRng, classes: usize, channels: usize) -> Result<Self> {
        if classes < 2 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "read-out needs at least 2 classes and 1 channel, got {classes} and {channels}"
            )));
        }
        let scale = 1.0 / libm::sqrt(channels as f64);
        Ok(Self {
            classes,
            channels,
            weights: (0..classes * channels).map(|_| 2.0 * scale * rng.normal()).collect(),
            bias: (0..classes).map(|_| 0.5 * rng.normal()).collect(),
        })
    }

    /// Softmax maps of `passes` forward passes. With more than one pass
    /// every pass drops input channels with probability `dropout` (inverted
    /// scaling), mimicking test-time dropout.
    pub fn predict(
        &self,
        record: &ActivationRecord,
        passes: usize,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Result<PredictionRecord> {
        let layer = record
            .layers
            .first()
            .filter(|l| l.channels == self.channels)
            .ok_or_else(|| Error::ShapeMismatch("record does not match the read-out".into()))?;
        if passes == 0 || !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument("need passes >= 1 and dropout in [0, 1)".into()));
        }
        let pixels = layer.height * layer.width;
        let mut maps = Vec::with_capacity(passes);
        for _ in 0..passes {
            let keep: Vec<f64> = (0..self.channels)
                .map(|_| {
                    if passes == 1 {
                        1.0
                    } else if rng.uniform() < dropout {
                        0.0
                    } else {
                        1.0 / (1.0 - dropout)
                    }
                })
                .collect();
            let mut probs = vec![0.0f32; self.classes * pixels];
            let mut logits = vec![0.0f64; self.classes];
            for p in 0..pixels {
                for (k, logit) in logits.iter_mut().enumerate() {
                    let w = &self.weights[k * self.channels..(k + 1) * self.channels];
                    *logit = self.bias[k]
                        + (0..self.channels)
                            .map(|c| w[c] * keep[c] * layer.values[c * pixels + p] as f64)
                            .sum::<f64>();
                }
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let norm: f64 = logits.iter().map(|l| libm::exp(l - top)).sum();
                for k in 0..self.classes {
                    probs[k * pixels + p] = (libm::exp(logits[k] - top) / norm) as f32;
                }
            }
            maps.push(SoftmaxMap::new(self.classes, layer.height, layer.width, probs)?);
        }
        Ok(PredictionRecord {
            input_id: record.input_id.clone(),
            passes: maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::LayerSelection;
    use crate::sampling::assemble_volume;

    #[test]
    fn deterministic() {
        let a = synth_generate(&mut SeededRng::new(5), 3, 2, [4, 4, 3], 3.0, 0.5).unwrap();
        let b = synth_generate(&mut SeededRng::new(5), 3, 2, [4, 4, 3], 3.0, 0.5).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.labels, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn assembles_to_requested_dims() {
        let d = synth_generate(&mut SeededRng::new(1), 1, 0, [6, 5, 4], 0.0, 0.2).unwrap();
        let v = assemble_volume(&d.records[0], (6, 5), LayerSelection::Everywhere).unwrap();
        assert_eq!(v.shape(), &[6, 5, 4]);
        assert!(d.records[0].all_finite());
    }

    fn mean_gap(shift: f32, n: usize) -> f64 {
        let d = synth_generate(&mut SeededRng::new(2), n, n, [4, 4, 2], shift, 0.5).unwrap();
        let mean = |recs: &[ActivationRecord]| {
            let mut s = 0.0f64;
            let mut k = 0usize;
            for r in recs {
                for l in &r.layers {
                    s += l.values.iter().map(|&v| v as f64).sum::<f64>();
                    k += l.values.len();
                }
            }
            s / k as f64
        };
        (mean(&d.records[n..]) - mean(&d.records[..n])).abs()
    }

    #[test]
    fn null_shift_means_converge() {
        let small = mean_gap(0.0, 50);
        let large = mean_gap(0.0, 2000);
        assert!(large < 0.05, "{large}");
        assert!(large < small);
    }

    #[test]
    fn shift_moves_a_quarter_of_values() {
        // mean over all values moves by shift / 4
        let gap = mean_gap(2.0, 2000);
        assert!((gap - 0.5).abs() < 0.06, "{gap}");
    }

    #[test]
    fn rejects_bad_corr() {
        assert!(synth_generate(&mut SeededRng::new(1), 1, 1, [2, 2, 2], 1.0, 1.0).is_err());
    }

    #[test]
    fn readout_predictions_are_valid() {
        let d = synth_generate(&mut SeededRng::new(4), 2, 0, [4, 6, 3], 0.0, 0.5).unwrap();
        let mut rng = SeededRng::new(8);
        let head = SynthReadout::new(&mut rng, 5, 2).unwrap();
        let one = head.predict(&d.records[0], 1, 0.1, &mut rng).unwrap();
        one.validate().unwrap();
        assert_eq!((one.passes[0].classes, one.passes[0].height, one.passes[0].width), (5, 4, 6));
        let many = head.predict(&d.records[1], 4, 0.3, &mut rng).unwrap();
        many.validate().unwrap();
        assert_eq!(many.passes.len(), 4);
        assert_ne!(many.passes[0], many.passes[1]);
    }
}
