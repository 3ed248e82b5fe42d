use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{backward, forward, initialize, Mode, NetworkSpec, Params};
use super::{OptimizerConfig, OptimizerState, Real};
use crate::encoding::InputLayout;
use crate::error::{Error, Result};
use crate::hashing::derive_seed;

/// Bumped whenever the checkpoint layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean batch loss is recorded every this many steps.
    pub log_interval: usize,
    pub weight_std: f64,
    pub bias_init: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 100_000,
            batch_size: 5,
            seed: 0,
            log_interval: 100,
            weight_std: 0.1,
            bias_init: 0.01,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Network, parameters and optimizer state after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrainedModel<T> {
    pub spec: NetworkSpec,
    pub params: Params<T>,
    pub optimizer: OptimizerState<T>,
    pub steps: usize,
    /// How flows were laid out as network input, when trained on flows.
    #[serde(default)]
    pub layout: Option<InputLayout>,
}

pub struct FitOutcome<T> {
    pub model: TrainedModel<T>,
    /// `(step, mean loss over the preceding interval)`.
    pub loss_trace: Vec<(usize, f64)>,
}

/// Trains from a fresh seeded initialization with mini-batches drawn from
/// per-epoch shuffles. Initialization, shuffling and dropout each use their
/// own stream derived from `cfg.seed`.
pub fn fit<T: Real>(spec: &NetworkSpec, data: &[(Vec<T>, usize)], cfg: &FitConfig) -> Result<FitOutcome<T>> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let classes = spec.class_count();
    if let Some((_, bad)) = data.iter().find(|(_, label)| *label >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut params: Params<T> = initialize(spec, cfg.weight_std, cfg.bias_init, derive_seed(cfg.seed, "init"))?;
    let mut optimizer = OptimizerState::new(cfg.optimizer.clone(), &params)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut loss_trace = Vec::new();
    let mut interval_loss = 0.0;
    let mut interval_steps = 0;
    let log_interval = cfg.log_interval.max(1);
    let mut inputs = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);

    for step in 1..=cfg.steps {
        inputs.clear();
        labels.clear();
        while labels.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let (x, y) = &data[order[cursor]];
            inputs.push(x.clone());
            labels.push(*y);
            cursor += 1;
        }
        let (loss, grads) = backward(spec, &params, &inputs, &labels, &mut dropout_rng)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        optimizer.step(&mut params, &grads)?;
        if !params.all_finite() {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        interval_loss += loss;
        interval_steps += 1;
        if step % log_interval == 0 || step == cfg.steps {
            loss_trace.push((step, interval_loss / interval_steps as f64));
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }

    Ok(FitOutcome {
        model: TrainedModel {
            spec: spec.clone(),
            params,
            optimizer,
            steps: cfg.steps,
            layout: None,
        },
        loss_trace,
    })
}

/// Softmax output for one example and its most likely class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Inference-mode probabilities for every input, computed in parallel; the
/// result for an input does not depend on the rest of the batch.
pub fn predict_batch<T: Real>(model: &TrainedModel<T>, inputs: &[Vec<T>]) -> Result<Vec<Prediction>> {
    let expected = model.spec.input_len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != expected) {
        return Err(Error::Shape(format!(
            "input has {} values, the model expects {expected}",
            bad.len()
        )));
    }
    let chunks: Vec<Result<Vec<Vec<T>>>> = inputs
        .par_chunks(64)
        .map(|chunk| {
            // dropout is inactive in inference mode, so the generator is never drawn from
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            forward(&model.spec, &model.params, chunk, Mode::Infer, &mut unused)
        })
        .collect();
    let mut predictions = Vec::with_capacity(inputs.len());
    for chunk in chunks {
        for p in chunk? {
            let probabilities: Vec<f64> = p.into_iter().map(Real::as_f64).collect();
            let class = argmax(&probabilities);
            predictions.push(Prediction {
                probabilities,
                class,
            });
        }
    }
    Ok(predictions)
}

/// Versioned on-disk container for a trained model.
#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub precision: String,
    pub model: TrainedModel<T>,
}

impl<T: Real> TrainedModel<T> {
    /// Writes the checkpoint atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let checkpoint = CheckpointRef {
            version: CHECKPOINT_VERSION,
            precision: T::NAME,
            model: self,
        };
        let text = serde_json::to_string(&checkpoint)?;
        crate::persist::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint<T> = serde_json::from_str(&text)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                checkpoint.version
            )));
        }
        if checkpoint.precision != T::NAME {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, requested {}",
                checkpoint.precision,
                T::NAME
            )));
        }
        checkpoint.model.params.check(&checkpoint.model.spec)?;
        Ok(checkpoint.model)
    }
}

#[derive(Serialize)]
#[serde(bound = "T: Real")]
struct CheckpointRef<'a, T> {
    version: u32,
    precision: &'static str,
    model: &'a TrainedModel<T>,
}
