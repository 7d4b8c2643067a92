//! In-memory forms of activation, prediction and label records.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Perturbation tag used for unperturbed inputs.
pub const CLEAN: &str = "none";

/// One recorded layer output: `channels` maps of `height x width`, stored
/// channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Layer {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        if channels * height * width != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "layer {name}: {channels}x{height}x{width} != {} values",
                values.len()
            )));
        }
        Ok(Self {
            name,
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn schema(&self) -> LayerSchema {
        LayerSchema {
            name: self.name.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Layer shape without payload.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSchema {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// All recorded activations of the monitored network for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub input_id: String,
    pub perturbation: String,
    pub layers: Vec<Layer>,
}

impl ActivationRecord {
    pub fn schema(&self) -> Vec<LayerSchema> {
        self.layers.iter().map(Layer::schema).collect()
    }

    pub fn is_clean(&self) -> bool {
        self.perturbation == CLEAN
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.values.iter().all(|v| v.is_finite()))
    }
}

/// Which recorded layers contribute channel maps to the activation volume.
///
/// Layers are classified by the last segment of their name (after the
/// final `.` or `/`): `conv*` marks a convolution output and `pre_bn*`
/// marks the input of a batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LayerSelection {
    #[default]
    Everywhere,
    ConvOutputs,
    BeforeBatchnorm,
}

impl LayerSelection {
    pub fn matches(self, layer_name: &str) -> bool {
        let last = layer_name
            .rsplit(['.', '/'])
            .next()
            .unwrap_or(layer_name);
        match self {
            LayerSelection::Everywhere => true,
            LayerSelection::ConvOutputs => last.starts_with("conv"),
            LayerSelection::BeforeBatchnorm => last.starts_with("pre_bn"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerSelection::Everywhere => "everywhere",
            LayerSelection::ConvOutputs => "conv_outputs",
            LayerSelection::BeforeBatchnorm => "before_batchnorm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "everywhere" => Some(Self::Everywhere),
            "conv_outputs" => Some(Self::ConvOutputs),
            "before_batchnorm" => Some(Self::BeforeBatchnorm),
            _ => None,
        }
    }

    /// Total channel maps selected from a layer schema.
    pub fn depth(self, schema: &[LayerSchema]) -> usize {
        schema
            .iter()
            .filter(|l| self.matches(&l.name))
            .map(|l| l.channels)
            .sum()
    }
}

/// A `classes x height x width` map of per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f32>,
}

impl SoftmaxMap {
    pub fn new(classes: usize, height: usize, width: usize, probs: Vec<f32>) -> Result<Self> {
        if classes * height * width != probs.len() || classes == 0 {
            return Err(Error::ShapeMismatch(format!(
                "softmax map {classes}x{height}x{width} != {} values",
                probs.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            probs,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f32 {
        self.probs[class * self.pixels() + pixel]
    }

    /// Largest class probability at `pixel`.
    pub fn max_prob(&self, pixel: usize) -> f32 {
        (0..self.classes)
            .map(|k| self.prob(k, pixel))
            .fold(f32::NEG_INFINITY, f32::max)
    }

    /// Arg-max class map; ties resolve to the lowest class id.
    pub fn argmax(&self) -> LabelMap {
        let labels = (0..self.pixels())
            .map(|p| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.prob(k, p) > self.prob(best, p) {
                        best = k;
                    }
                }
                best as u32
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Checks every per-pixel distribution sums to one within `1e-4`.
    pub fn validate(&self) -> Result<()> {
        for p in 0..self.pixels() {
            let mut sum = 0.0f64;
            for k in 0..self.classes {
                let v = self.prob(k, p);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NotNormalized(format!(
                        "pixel {p} has invalid probability {v}"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::NotNormalized(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Softmax output of `T` forward passes for one input (`T = 1` without
/// dropout sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub input_id: String,
    pub passes: Vec<SoftmaxMap>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .passes
            .first()
            .ok_or_else(|| Error::InvalidArgument("prediction record has no passes".into()))?;
        for m in &self.passes {
            if (m.classes, m.height, m.width) != (first.classes, first.height, first.width) {
                return Err(Error::ShapeMismatch(
                    "softmax passes differ in shape".into(),
                ));
            }
            m.validate()?;
        }
        Ok(())
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height * width != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} != {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn selection_by_name_segment() {
        assert!(LayerSelection::Everywhere.matches("anything"));
        assert!(LayerSelection::ConvOutputs.matches("encoder.level1/conv3"));
        assert!(!LayerSelection::ConvOutputs.matches("conv_block.pre_bn"));
        assert!(LayerSelection::BeforeBatchnorm.matches("conv_block.pre_bn"));
        assert_eq!(
            LayerSelection::parse("before_batchnorm"),
            Some(LayerSelection::BeforeBatchnorm)
        );
        assert_eq!(LayerSelection::parse("bogus"), None);
    }

    #[test]
    fn softmax_validation() {
        let ok = SoftmaxMap::new(2, 1, 2, vec![0.6, 0.9, 0.4, 0.1]).unwrap();
        ok.validate().unwrap();
        assert_eq!(ok.max_prob(0), 0.6);
        assert_eq!(ok.max_prob(1), 0.9);
        let bad = SoftmaxMap::new(2, 1, 1, vec![0.6, 0.6]).unwrap();
        assert!(matches!(bad.validate(), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn argmax_labels() {
        let m = SoftmaxMap::new(2, 1, 3, vec![0.6, 0.2, 0.5, 0.4, 0.8, 0.5]).unwrap();
        assert_eq!(m.argmax().labels, vec![0, 1, 0]);
    }
}
