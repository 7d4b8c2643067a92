//! Maximum-likelihood training of a flow with Adam and early stopping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::{FlowParams, FlowSpec};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied after the Adam update.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub max_epochs: Option<usize>,
    pub seed: u64,
    /// Optional hard clip on the global gradient norm.
    pub grad_clip: Option<f64>,
    pub xavier_init: bool,
    /// Fraction of the training features held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.8,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            batch_size: 64,
            early_stop_patience: 10,
            max_epochs: None,
            seed: 0,
            grad_clip: None,
            xavier_init: false,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon must be positive and weight_decay non-negative");
        }
        if self.early_stop_patience == 0 || self.batch_size == 0 {
            return bad("patience and batch_size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update followed by decoupled weight decay
/// `p -= lr * wd * p`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::InvalidArgument("adam: non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let lr = config.learning_rate;
    let decay = lr * config.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (libm::sqrt(v_hat) + config.epsilon);
        params[i] -= decay * params[i];
    }
    Ok(())
}

/// Source of elapsed seconds for the training history.
pub trait Clock {
    fn seconds(&mut self) -> f64;
}

impl<F: FnMut() -> f64> Clock for F {
    fn seconds(&mut self) -> f64 {
        self()
    }
}

/// Clock that always reads zero.
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_nll(&self) -> f64 {
        self.epochs[self.best_epoch].val_nll
    }
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NumericalOverflow { .. } | Error::NonFiniteGradient { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Trains a fresh flow on `dataset`.
///
/// A seeded `validation_fraction` of the data is held out; ActNorm is
/// initialized on the first training batch; training stops after
/// `early_stop_patience` epochs without a validation improvement (or at
/// `max_epochs`) and the parameters of the best validation epoch are
/// returned.
pub fn train(
    dataset: &[Vec<f64>],
    spec: FlowSpec,
    config: &TrainConfig,
    clock: &mut dyn Clock,
) -> Result<(FlowParams, TrainHistory)> {
    config.validate()?;
    spec.validate()?;
    if dataset.len() < 2 * config.batch_size {
        return Err(Error::InsufficientData(format!(
            "need at least {} training vectors, got {}",
            2 * config.batch_size,
            dataset.len()
        )));
    }
    if let Some(x) = dataset.iter().find(|x| x.len() != spec.dim) {
        return Err(Error::ShapeMismatch(format!(
            "flow dim {} but feature vector has {} values",
            spec.dim,
            x.len()
        )));
    }
    let mut rng = SeededRng::new(config.seed);
    let mut params = FlowParams::new(spec, &mut rng.fork(1), config.xavier_init)?;
    let mut split_rng = rng.fork(2);
    let mut shuffle_rng = rng.fork(3);

    let order = split_rng.permutation(dataset.len());
    let n_val = libm::round(dataset.len() as f64 * config.validation_fraction).max(1.0) as usize;
    let n_train = dataset.len() - n_val;
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let val: Vec<Vec<f64>> = order[n_train..].iter().map(|&i| dataset[i].clone()).collect();

    let mut state = AdamState::new(params.num_params());
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let start = clock.seconds();
    let mut epoch = 0;
    loop {
        if config.max_epochs.is_some_and(|max| epoch >= max) {
            break;
        }
        shuffle_rng.shuffle(&mut train_idx);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            if !params.is_initialized() {
                params.actnorm_init(&batch)?;
            }
            let (loss, mut grads) = params
                .nll_grad(&batch)
                .map_err(|e| diverged(e, epoch, batch_no))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    let s = clip / norm;
                    grads.values.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam_step(params.theta_mut(), &grads.values, &mut state, config)
                .map_err(|_| Error::Diverged { epoch, batch: batch_no })?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_nll = params
            .mean_nll(&val)
            .map_err(|e| diverged(e, epoch, usize::MAX))?;
        if !val_nll.is_finite() {
            return Err(Error::Diverged { epoch, batch: usize::MAX });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_nll: loss_sum / n_train as f64,
            val_nll,
            seconds: clock.seconds() - start,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best = params.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
        epoch += 1;
    }
    if history.epochs.is_empty() {
        return Err(Error::InvalidArgument("max_epochs must be at least 1".into()));
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Coupling, Mixing, Subnet};

    fn cfg() -> TrainConfig {
        TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_adam_step() {
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg()).unwrap();
        let want = -2e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - want).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut p = [0.7, -1.5];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg()).unwrap();
        assert_eq!(p, [0.7, -1.5]);

        let mut q = [1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut q, &[0.0], &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(q[0], 1.0 - 2e-4 * 1e-5);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut [0.0], &[f64::NAN], &mut s, &cfg()).is_err());
        assert!(adam_step(&mut [0.0, 1.0], &[0.0], &mut s, &cfg()).is_err());
    }

    fn gaussian_data(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| (0..dim).map(|_| 1.0 + 2.0 * rng.normal()).collect()).collect()
    }

    fn small_spec() -> FlowSpec {
        FlowSpec::new(4, 2, Coupling::Affine, Mixing::InvertibleLinear, Subnet::Linear)
    }

    #[test]
    fn training_is_deterministic() {
        let data = gaussian_data(1, 300, 4);
        let config = TrainConfig {
            batch_size: 32,
            max_epochs: Some(4),
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&data, small_spec(), &config, &mut NoClock).unwrap();
        let (p2, h2) = train(&data, small_spec(), &config, &mut NoClock).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_eq!(h1.epochs.len(), 4);
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let data = gaussian_data(2, 200, 4);
        let config = TrainConfig {
            batch_size: 16,
            learning_rate: 2e-2,
            early_stop_patience: 2,
            max_epochs: Some(60),
            ..TrainConfig::default()
        };
        let (best, hist) = train(&data, small_spec(), &config, &mut NoClock).unwrap();
        for rec in &hist.epochs[hist.best_epoch..] {
            assert!(hist.best_val_nll() <= rec.val_nll);
        }
        // replay up to the best epoch
        let replay_cfg = TrainConfig {
            max_epochs: Some(hist.best_epoch + 1),
            ..config
        };
        let (replayed, _) = train(&data, small_spec(), &replay_cfg, &mut NoClock).unwrap();
        assert_eq!(best, replayed);
    }

    #[test]
    fn too_little_data() {
        let data = gaussian_data(3, 10, 4);
        assert!(matches!(
            train(&data, small_spec(), &TrainConfig::default(), &mut NoClock),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn single_step_decreases_batch_nll() {
        let mut violations = 0;
        let trials = 40;
        for seed in 0..trials {
            let spec = FlowSpec::new(5, 2, Coupling::Affine, Mixing::InvertibleLinear, Subnet::Mlp { width: 4 });
            let mut rng = SeededRng::new(seed);
            let mut p = FlowParams::new(spec, &mut rng, false).unwrap();
            p.randomize(&mut rng, 0.3);
            let batch: Vec<Vec<f64>> = (0..16).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
            let (before, g) = p.nll_grad(&batch).unwrap();
            let mut state = AdamState::new(p.num_params());
            let config = TrainConfig {
                learning_rate: 1e-4,
                weight_decay: 0.0,
                ..TrainConfig::default()
            };
            adam_step(p.theta_mut(), &g.values, &mut state, &config).unwrap();
            if p.mean_nll(&batch).unwrap() >= before {
                violations += 1;
            }
        }
        assert!(violations * 20 <= trials, "{violations} violations");
    }

    #[test]
    fn clock_is_recorded() {
        let data = gaussian_data(4, 200, 4);
        let config = TrainConfig {
            batch_size: 32,
            max_epochs: Some(2),
            ..TrainConfig::default()
        };
        let mut t = 0.0;
        let mut tick = move || {
            t += 1.5;
            t
        };
        let (_, hist) = train(&data, small_spec(), &config, &mut tick).unwrap();
        assert!(hist.epochs[1].seconds > hist.epochs[0].seconds);
    }
}
