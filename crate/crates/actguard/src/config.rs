//! Run configuration: a JSON document whose values command-line flags
//! override.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use actguard_core::flow::{Coupling, FlowSpec, Mixing, Subnet};
use actguard_core::record::LayerSelection;
use actguard_core::sampling::DEFAULT_K_ATTEMPTS;
use actguard_core::scoring::Head;
use actguard_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Minimum distance between sampled voxels.
    pub r: Option<f64>,
    pub seed: u64,
    pub k_attempts: usize,
    pub selection: LayerSelection,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            r: None,
            seed: 0,
            k_attempts: DEFAULT_K_ATTEMPTS,
            selection: LayerSelection::Everywhere,
        }
    }
}

/// Flow architecture; the dimension comes from the sampling key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub coupling: Coupling,
    pub mixing: Mixing,
    pub subnet: Subnet,
    pub clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            coupling: Coupling::Affine,
            mixing: Mixing::InvertibleLinear,
            subnet: Subnet::Linear,
            clamp: 0.5,
        }
    }
}

impl FlowConfig {
    pub fn spec(&self, dim: usize) -> Result<FlowSpec> {
        let spec = FlowSpec {
            clamp: self.clamp,
            ..FlowSpec::new(dim, self.n_blocks, self.coupling, self.mixing, self.subnet)
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Head names: `euclidean`, `harmonic`, `mahalanobis`, `hbos<k>`.
    pub heads: Vec<String>,
    /// False-positive budget on clean scores used to pick thresholds.
    pub fpr_budget: Option<f64>,
    /// Fixed thresholds keyed by `head` or `perturbation/head`.
    pub theta: BTreeMap<String, f64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            heads: ["euclidean", "harmonic", "mahalanobis", "hbos30"].map(String::from).to_vec(),
            fpr_budget: None,
            theta: BTreeMap::new(),
        }
    }
}

impl ScoringConfig {
    pub fn parsed_heads(&self) -> Result<Vec<Head>> {
        if self.heads.is_empty() {
            return Err(Error::Config("no scoring heads selected".into()));
        }
        self.heads
            .iter()
            .map(|h| Head::parse(h).map_err(|e| Error::Config(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub key: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampling: SamplingConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.sampling.r {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("sampling.r must be positive, got {r}")));
            }
        }
        if self.sampling.k_attempts == 0 {
            return Err(Error::Config("sampling.k_attempts must be at least 1".into()));
        }
        self.flow.spec(2)?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scoring.parsed_heads()?;
        if let Some(b) = self.scoring.fpr_budget {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("scoring.fpr_budget must lie in [0, 1], got {b}")));
            }
        }
        Ok(())
    }
}

/// Returns the override when present, else the configured path, else an
/// error naming the missing input.
pub fn require_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or paths.{what} in the config)")))
}
