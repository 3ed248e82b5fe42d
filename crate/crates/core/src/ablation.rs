//! Optimizer and activation comparisons on one pipeline configuration.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flowspace::FlowSpaceSpec;
use crate::nn::{Activation, OptimizerKind};
use crate::oracle::Oracle;
use crate::pipeline::{run_incremental, CycleSummary, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub optimizer: OptimizerKind,
    pub activation: Activation,
}

/// Every optimizer under the base activation, then every activation under the
/// base optimizer. The base pair appears once.
pub fn standard_variants(base: &TrainerConfig) -> Vec<Variant> {
    let base_opt = base.training.optimizer.kind;
    let base_act = base.architecture.activation;
    let mut out: Vec<Variant> = OptimizerKind::ALL
        .iter()
        .map(|&optimizer| Variant {
            optimizer,
            activation: base_act,
        })
        .collect();
    out.extend(Activation::ALL.iter().filter(|&&a| a != base_act).map(|&activation| Variant {
        optimizer: base_opt,
        activation,
    }));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracy: f64,
    pub final_loss: f64,
    pub cycles: Vec<CycleSummary>,
}

impl AblationRow {
    pub fn finite(&self) -> bool {
        self.final_loss.is_finite() && self.cycles.iter().all(|c| c.final_loss.is_none_or(f64::is_finite))
    }
}

pub fn apply(base: &TrainerConfig, variant: Variant) -> TrainerConfig {
    let mut cfg = base.clone();
    cfg.training.optimizer.kind = variant.optimizer;
    cfg.architecture.activation = variant.activation;
    cfg
}

/// Runs the full pipeline once per variant with the same seed, so every
/// variant sees the same flows and labels.
pub fn run_ablation(
    spec: &FlowSpaceSpec,
    oracle: &Oracle,
    base: &TrainerConfig,
    seed: u64,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let outcome = run_incremental(spec, oracle, &apply(base, variant), seed, &mut ())?;
            log::info!(
                "{:?}/{:?}: accuracy {:.4}",
                variant.optimizer,
                variant.activation,
                outcome.accuracy.value
            );
            Ok(AblationRow {
                variant,
                accuracy: outcome.accuracy.value,
                final_loss: outcome.cycles.last().and_then(|c| c.final_loss).unwrap_or(f64::NAN),
                cycles: outcome.cycles,
            })
        })
        .collect()
}
