//! The incremental loop: label flows, refit classes, retrain, predict a fresh
//! sample and pick angel and devil flows.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::encoding::InputLayout;
use crate::error::{Error, Result};
use crate::flowspace::{sample_flows, Flow, FlowSpaceSpec};
use crate::hashing::derive_seed;
use crate::labeling::{
    fit_class_model, fit_class_model_multi, relabel_dataset, ClassModel, LabeledFlow, DEFAULT_PERCENTILES,
};
use crate::nn::{fit, predict_batch, Architecture, FitConfig, NetworkSpec, TrainedModel};
use crate::oracle::{evaluate_batch, Metric, Oracle, QoRRecord};

/// Metric (or pair of metrics) the classes are defined on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<Metric>,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            metric: Metric::Delay,
            secondary: None,
        }
    }
}

impl Objective {
    pub fn fit<'a>(
        &self,
        records: impl IntoIterator<Item = &'a QoRRecord>,
        class_count: usize,
        percentiles: &[f64],
    ) -> Result<ClassModel> {
        match &self.secondary {
            None => fit_class_model(records, self.metric.clone(), class_count, percentiles),
            Some(second) => fit_class_model_multi(
                records,
                self.metric.clone(),
                second.clone(),
                class_count,
                percentiles,
            ),
        }
    }

    /// Short name used to tag selected flows, e.g. `delay` or `delay+area`.
    pub fn label(&self) -> String {
        match &self.secondary {
            None => self.metric.to_string(),
            Some(second) => format!("{}+{second}", self.metric),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Labeled flows collected before the first training.
    pub initial_threshold: usize,
    /// New labels between retrainings.
    pub retrain_interval: usize,
    /// Total flows drawn for training.
    pub training_budget: usize,
    /// Fresh flows classified at the end of every training.
    pub sample_count: usize,
    pub class_count: usize,
    /// Angel flows and devil flows selected, each.
    pub output_count: usize,
    pub objective: Objective,
    pub percentiles: Vec<f64>,
    pub architecture: Architecture,
    /// Reshape of the `L x n` one-hot matrix fed to the network; `None` keeps it.
    pub reshape: Option<(usize, usize)>,
    /// Optimizer and step settings; the seed is replaced by one derived from
    /// the run seed.
    pub training: FitConfig,
    /// Concurrent oracle evaluations.
    pub parallelism: usize,
    /// Largest tolerated fraction of failed oracle evaluations.
    pub max_failure_rate: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            initial_threshold: 1000,
            retrain_interval: 500,
            training_budget: 10_000,
            sample_count: 100_000,
            class_count: 7,
            output_count: 200,
            objective: Objective::default(),
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            architecture: Architecture::default(),
            reshape: None,
            training: FitConfig {
                steps: 20_000,
                ..FitConfig::default()
            },
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_failure_rate: 0.05,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return fail(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if self.percentiles.len() + 1 != self.class_count {
            return fail(format!(
                "{} classes need {} percentiles, got {}",
                self.class_count,
                self.class_count - 1,
                self.percentiles.len()
            ));
        }
        if self.initial_threshold == 0 || self.initial_threshold > self.training_budget {
            return fail(format!(
                "initial_threshold must lie in 1..={}, got {}",
                self.training_budget, self.initial_threshold
            ));
        }
        if self.retrain_interval == 0 && self.training_budget > self.initial_threshold {
            return fail("retrain_interval must be positive".into());
        }
        if self.output_count > self.sample_count {
            return fail(format!(
                "output_count {} exceeds sample_count {}",
                self.output_count, self.sample_count
            ));
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return fail("max_failure_rate must lie in [0, 1]".into());
        }
        if self.training.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        self.training.optimizer.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn layout(&self, spec: &FlowSpaceSpec) -> Result<InputLayout> {
        match self.reshape {
            None => Ok(InputLayout::natural(spec)),
            Some((h, w)) => InputLayout::reshaped(spec, h, w),
        }
    }

    pub fn network(&self, spec: &FlowSpaceSpec) -> Result<NetworkSpec> {
        let layout = self.layout(spec)?;
        self.architecture
            .build((layout.height, layout.width), self.class_count)
    }
}

/// Label counts at which training happens: the initial threshold, then every
/// retrain interval, then the budget itself if the last step is short.
pub fn training_schedule(cfg: &TrainerConfig) -> Vec<usize> {
    let mut events = vec![cfg.initial_threshold];
    let mut at = cfg.initial_threshold;
    while at < cfg.training_budget {
        at = (at + cfg.retrain_interval).min(cfg.training_budget);
        events.push(at);
    }
    events
}

/// A flow with its predicted class distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub flow: Flow,
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// Angel and devil flows, most confident first. A nonzero shortfall counts the
/// picks that had to come from outside the target class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub angels: Vec<PredictionRecord>,
    pub devils: Vec<PredictionRecord>,
    pub angel_shortfall: usize,
    pub devil_shortfall: usize,
}

/// Picks `count` angels (predicted class 0, highest `p_0`) and `count` devils
/// (predicted class `K-1`, highest `p_{K-1}`). Ties fall to the canonical flow
/// string, then to input order. When a class has too few members the list is
/// topped up with the highest-probability records not already chosen.
pub fn select_angel_devil(
    predictions: &[PredictionRecord],
    count: usize,
    class_count: usize,
    spec: &FlowSpaceSpec,
) -> Selection {
    if count == 0 || predictions.is_empty() || class_count < 2 {
        return Selection::default();
    }
    let names: Vec<String> = predictions.iter().map(|p| p.flow.to_canonical(spec)).collect();
    let mut taken = vec![false; predictions.len()];
    let (angels, angel_shortfall) = pick(predictions, &names, 0, count, &mut taken);
    let (devils, devil_shortfall) = pick(predictions, &names, class_count - 1, count, &mut taken);
    Selection {
        angels,
        devils,
        angel_shortfall,
        devil_shortfall,
    }
}

fn pick(
    predictions: &[PredictionRecord],
    names: &[String],
    class: usize,
    count: usize,
    taken: &mut [bool],
) -> (Vec<PredictionRecord>, usize) {
    let confidence = |i: usize| predictions[i].probabilities.get(class).copied().unwrap_or(0.0);
    let mut order: Vec<usize> = (0..predictions.len()).filter(|&i| !taken[i]).collect();
    order.sort_by(|&a, &b| {
        confidence(b)
            .partial_cmp(&confidence(a))
            .unwrap_or(Ordering::Equal)
            .then_with(|| names[a].cmp(&names[b]))
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| predictions[i].class == class)
        .take(count)
        .collect();
    let shortfall = count.saturating_sub(chosen.len());
    if shortfall > 0 {
        let fill: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| predictions[i].class != class)
            .take(shortfall)
            .collect();
        chosen.extend(fill);
    }
    for &i in &chosen {
        taken[i] = true;
    }
    let picked = chosen.iter().map(|&i| predictions[i].clone()).collect();
    (picked, shortfall)
}

/// Correct selections and the resulting accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct_angels: usize,
    pub correct_devils: usize,
    pub count: usize,
    /// `(correct_angels + correct_devils) / (2 * count)`.
    pub value: f64,
}

/// How the accuracy figure is computed, for reports.
pub const ACCURACY_FORMULA: &str = "(N_angel + N_devil) / (2 * count)";

pub fn compute_accuracy(
    angels: &[Flow],
    devils: &[Flow],
    truth: &HashMap<Flow, usize>,
    class_count: usize,
    count: usize,
) -> Result<Accuracy> {
    let lookup = |f: &Flow| {
        truth
            .get(f)
            .copied()
            .ok_or_else(|| Error::Data(format!("no ground truth for flow {:?}", f.steps())))
    };
    let mut correct_angels = 0;
    for f in angels {
        correct_angels += usize::from(lookup(f)? == 0);
    }
    let mut correct_devils = 0;
    for f in devils {
        correct_devils += usize::from(lookup(f)? == class_count - 1);
    }
    let value = if count == 0 {
        0.0
    } else {
        (correct_angels + correct_devils) as f64 / (2 * count) as f64
    };
    Ok(Accuracy {
        correct_angels,
        correct_devils,
        count,
        value,
    })
}

/// True classes of `flows` under `model`; flows the oracle fails on are
/// reported as errors.
pub fn ground_truth_classes(
    flows: &[Flow],
    spec: &FlowSpaceSpec,
    oracle: &Oracle,
    model: &ClassModel,
    parallelism: usize,
) -> Result<HashMap<Flow, usize>> {
    let results = evaluate_batch(flows, spec, oracle, parallelism)?;
    let mut truth = HashMap::with_capacity(flows.len());
    for (flow, result) in flows.iter().zip(results) {
        truth.insert(flow.clone(), model.classify(&result?)?);
    }
    Ok(truth)
}

/// Encodes flows with `layout` and runs the model over them.
pub fn predict_flows(
    model: &TrainedModel<f64>,
    layout: &InputLayout,
    spec: &FlowSpaceSpec,
    flows: &[Flow],
) -> Result<Vec<PredictionRecord>> {
    let inputs = flows
        .iter()
        .map(|f| layout.encode(f, spec))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let predictions = predict_batch(model, &inputs)?;
    Ok(flows
        .iter()
        .zip(predictions)
        .map(|(flow, p)| PredictionRecord {
            flow: flow.clone(),
            probabilities: p.probabilities,
            class: p.class,
        })
        .collect())
}

/// Refits the class model on every labeled flow and trains from a fresh
/// initialization on the refreshed labels.
pub fn train_cycle(
    spec: &FlowSpaceSpec,
    dataset: &mut [LabeledFlow],
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<(ClassModel, TrainedModel<f64>, Vec<(usize, f64)>)> {
    let class_model = cfg
        .objective
        .fit(dataset.iter().map(|d| &d.qor), cfg.class_count, &cfg.percentiles)?;
    relabel_dataset(dataset, &class_model)?;
    let layout = cfg.layout(spec)?;
    let network = cfg.network(spec)?;
    let data = dataset
        .iter()
        .map(|d| Ok((layout.encode(&d.flow, spec)?, d.label)))
        .collect::<Result<Vec<_>>>()?;
    let fit_cfg = FitConfig {
        seed: derive_seed(seed, "train"),
        ..cfg.training.clone()
    };
    let outcome = fit(&network, &data, &fit_cfg)?;
    let mut model = outcome.model;
    model.layout = Some(layout);
    Ok((class_model, model, outcome.loss_trace))
}

/// Training flows and sample flows for a run, drawn together as one set of
/// distinct flows so the two never overlap.
pub fn draw_flows(spec: &FlowSpaceSpec, cfg: &TrainerConfig, seed: u64) -> Result<(Vec<Flow>, Vec<Flow>)> {
    let mut training = sample_flows(
        spec,
        cfg.training_budget + cfg.sample_count,
        derive_seed(seed, "sample"),
    )?;
    let samples = training.split_off(cfg.training_budget);
    Ok((training, samples))
}

/// Everything known at the end of one training event.
pub struct CycleReport<'a> {
    /// 1-based.
    pub index: usize,
    pub labels_used: usize,
    pub wall_seconds: f64,
    pub class_model: &'a ClassModel,
    pub model: &'a TrainedModel<f64>,
    pub loss_trace: &'a [(usize, f64)],
    pub selection: &'a Selection,
    pub accuracy: Accuracy,
}

/// Hooks for persisting a run as it progresses. All methods default to no-ops.
pub trait RunObserver {
    fn flows_drawn(&mut self, _training: &[Flow], _samples: &[Flow]) -> Result<()> {
        Ok(())
    }

    /// New labeled flows, labeled under the class model of cycle `version`.
    fn labels_added(&mut self, _records: &[LabeledFlow], _version: usize) -> Result<()> {
        Ok(())
    }

    fn cycle_finished(&mut self, _report: &CycleReport<'_>) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

pub struct RunOutcome {
    pub class_model: ClassModel,
    pub model: TrainedModel<f64>,
    pub dataset: Vec<LabeledFlow>,
    pub predictions: Vec<PredictionRecord>,
    pub selection: Selection,
    pub accuracy: Accuracy,
    /// QoR of every sample flow the oracle could evaluate, in sample order.
    pub sample_qor: Vec<(Flow, QoRRecord)>,
    pub cycles: Vec<CycleSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub labels_used: usize,
    pub wall_seconds: f64,
    pub accuracy: f64,
    pub final_loss: Option<f64>,
}

/// Runs the whole loop.
///
/// After every training event the sample set is
/// classified and angels/devils are selected and scored against oracle ground
/// truth under that event's class model.
pub fn run_incremental(
    spec: &FlowSpaceSpec,
    oracle: &Oracle,
    cfg: &TrainerConfig,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let (training, samples) = draw_flows(spec, cfg, seed)?;
    let (training, samples) = (&training[..], &samples[..]);
    observer.flows_drawn(training, samples)?;
    let layout = cfg.layout(spec)?;

    let mut dataset: Vec<LabeledFlow> = Vec::with_capacity(training.len());
    let mut truth_cache: HashMap<Flow, Option<QoRRecord>> = HashMap::new();
    let mut failed = 0;
    let mut attempted = 0;
    let mut cycles = Vec::new();
    let mut last = None;

    for (index, &target) in training_schedule(cfg).iter().enumerate() {
        let cycle = index + 1;
        let batch = &training[attempted..target];
        let results = evaluate_batch(batch, spec, oracle, cfg.parallelism)?;
        let first_new = dataset.len();
        for (flow, result) in batch.iter().zip(results) {
            match result {
                Ok(qor) => dataset.push(LabeledFlow {
                    flow: flow.clone(),
                    qor,
                    label: 0,
                }),
                Err(e) => {
                    warn!("oracle failed on {}: {e}", flow.display(spec));
                    failed += 1;
                }
            }
        }
        attempted = target;
        if failed as f64 > cfg.max_failure_rate * attempted as f64 || dataset.is_empty() {
            return Err(Error::Aborted {
                failed,
                total: attempted,
                dir: Default::default(),
            });
        }

        let (class_model, model, loss_trace) = train_cycle(spec, &mut dataset, cfg, seed)?;
        observer.labels_added(&dataset[first_new..], cycle)?;

        let predictions = predict_flows(&model, &layout, spec, samples)?;
        let selection = select_angel_devil(&predictions, cfg.output_count, cfg.class_count, spec);
        let selected: Vec<Flow> = selection
            .angels
            .iter()
            .chain(&selection.devils)
            .map(|p| p.flow.clone())
            .collect();
        fill_cache(&mut truth_cache, &selected, spec, oracle, cfg.parallelism)?;
        let truth = classes_from_cache(&truth_cache, &selected, &class_model)?;
        let accuracy = compute_accuracy(
            &flows_of(&selection.angels),
            &flows_of(&selection.devils),
            &truth,
            cfg.class_count,
            cfg.output_count,
        )?;
        let wall_seconds = started.elapsed().as_secs_f64();
        info!(
            "cycle {cycle}: {} labels, accuracy {:.4}, {:.1}s",
            dataset.len(),
            accuracy.value,
            wall_seconds
        );
        observer.cycle_finished(&CycleReport {
            index: cycle,
            labels_used: dataset.len(),
            wall_seconds,
            class_model: &class_model,
            model: &model,
            loss_trace: &loss_trace,
            selection: &selection,
            accuracy,
        })?;
        cycles.push(CycleSummary {
            cycle,
            labels_used: dataset.len(),
            wall_seconds,
            accuracy: accuracy.value,
            final_loss: loss_trace.last().map(|&(_, l)| l),
        });
        last = Some((class_model, model, predictions, selection, accuracy));
    }

    let (class_model, model, predictions, selection, accuracy) = last.expect("at least one training event");
    fill_cache(&mut truth_cache, samples, spec, oracle, cfg.parallelism)?;
    let sample_qor = samples
        .iter()
        .filter_map(|f| truth_cache[f].clone().map(|q| (f.clone(), q)))
        .collect();
    Ok(RunOutcome {
        class_model,
        model,
        dataset,
        predictions,
        selection,
        accuracy,
        sample_qor,
        cycles,
    })
}

fn flows_of(records: &[PredictionRecord]) -> Vec<Flow> {
    records.iter().map(|p| p.flow.clone()).collect()
}

fn fill_cache(
    cache: &mut HashMap<Flow, Option<QoRRecord>>,
    flows: &[Flow],
    spec: &FlowSpaceSpec,
    oracle: &Oracle,
    parallelism: usize,
) -> Result<()> {
    let missing: Vec<Flow> = flows.iter().filter(|f| !cache.contains_key(*f)).cloned().collect();
    let results = evaluate_batch(&missing, spec, oracle, parallelism)?;
    for (flow, result) in missing.into_iter().zip(results) {
        if let Err(e) = &result {
            warn!("ground truth unavailable for {}: {e}", flow.display(spec));
        }
        cache.insert(flow, result.ok());
    }
    Ok(())
}

fn classes_from_cache(
    cache: &HashMap<Flow, Option<QoRRecord>>,
    flows: &[Flow],
    model: &ClassModel,
) -> Result<HashMap<Flow, usize>> {
    let mut truth = HashMap::with_capacity(flows.len());
    for flow in flows {
        if let Some(Some(qor)) = cache.get(flow) {
            truth.insert(flow.clone(), model.classify(qor)?);
        }
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowspace::enumerate_flows;
    use crate::nn::{OptimizerConfig, OptimizerKind};
    use crate::oracle::SyntheticOracleConfig;
    use proptest::prelude::*;

    fn record(steps: &[usize], p: [f64; 7]) -> PredictionRecord {
        let probabilities = p.to_vec();
        let class = crate::nn::argmax(&probabilities);
        PredictionRecord {
            flow: Flow::from_indices(steps),
            probabilities,
            class,
        }
    }

    fn table_two() -> (FlowSpaceSpec, Vec<PredictionRecord>) {
        let spec = FlowSpaceSpec::numbered(3, 1).unwrap();
        let rows = vec![
            record(&[0, 1, 2], [0.47, 0.13, 0.22, 0.02, 0.03, 0.12, 0.01]),
            record(&[0, 2, 1], [0.51, 0.12, 0.01, 0.09, 0.17, 0.08, 0.02]),
            record(&[1, 0, 2], [0.02, 0.45, 0.14, 0.12, 0.11, 0.10, 0.06]),
            record(&[1, 2, 0], [0.12, 0.03, 0.17, 0.62, 0.01, 0.02, 0.03]),
            record(&[2, 0, 1], [0.35, 0.23, 0.09, 0.02, 0.13, 0.17, 0.01]),
        ];
        (spec, rows)
    }

    #[test]
    fn schedule_counts() {
        let default = TrainerConfig::default();
        let events = training_schedule(&default);
        assert_eq!(events.len(), 1 + (10_000 - 1000) / 500);
        assert_eq!(events.first(), Some(&1000));
        assert_eq!(events.last(), Some(&10_000));
        let scaled = TrainerConfig {
            training_budget: 3000,
            ..TrainerConfig::default()
        };
        assert_eq!(training_schedule(&scaled), vec![1000, 1500, 2000, 2500, 3000]);
        let single = TrainerConfig {
            training_budget: 1000,
            ..TrainerConfig::default()
        };
        assert_eq!(training_schedule(&single), vec![1000]);
        let ragged = TrainerConfig {
            training_budget: 1700,
            ..TrainerConfig::default()
        };
        assert_eq!(training_schedule(&ragged), vec![1000, 1500, 1700]);
    }

    #[test]
    fn table_two_angels() {
        let (spec, rows) = table_two();
        let sel = select_angel_devil(&rows, 2, 7, &spec);
        let angels: Vec<_> = sel.angels.iter().map(|p| p.flow.clone()).collect();
        assert_eq!(angels, vec![rows[1].flow.clone(), rows[0].flow.clone()]);
        assert_eq!(sel.angel_shortfall, 0);
        assert!(!angels.contains(&rows[4].flow));
    }

    #[test]
    fn zero_count_is_empty() {
        let (spec, rows) = table_two();
        assert_eq!(select_angel_devil(&rows, 0, 7, &spec), Selection::default());
    }

    #[test]
    fn uniform_probabilities_use_tie_break() {
        let spec = FlowSpaceSpec::numbered(3, 2).unwrap();
        let flows = sample_flows(&spec, 10, 4).unwrap();
        let rows: Vec<_> = flows
            .iter()
            .map(|f| PredictionRecord {
                flow: f.clone(),
                probabilities: vec![1.0 / 7.0; 7],
                class: 0,
            })
            .collect();
        let sel = select_angel_devil(&rows, 3, 7, &spec);
        assert_eq!(sel.angels.len(), 3);
        assert_eq!(sel.angel_shortfall, 0);
        let mut names: Vec<String> = flows.iter().map(|f| f.to_canonical(&spec)).collect();
        names.sort();
        let picked: Vec<String> = sel.angels.iter().map(|p| p.flow.to_canonical(&spec)).collect();
        assert_eq!(picked, names[..3].to_vec());
        // no record predicts the last class, so all devils are fill
        assert_eq!(sel.devils.len(), 3);
        assert_eq!(sel.devil_shortfall, 3);
        assert_eq!(
            sel.devils.iter().map(|p| p.flow.to_canonical(&spec)).collect::<Vec<_>>(),
            names[3..6].to_vec()
        );
    }

    proptest! {
        #[test]
        fn selection_sizes_and_disjointness(seed in 0u64..1000, count in 1usize..6, n in 0usize..30) {
            let spec = FlowSpaceSpec::numbered(3, 2).unwrap();
            let flows = sample_flows(&spec, n, seed).unwrap();
            let rows: Vec<_> = flows.iter().enumerate().map(|(i, f)| {
                let mut p = vec![0.0; 4];
                let h = crate::hashing::mix64(seed ^ i as u64);
                for (j, v) in p.iter_mut().enumerate() {
                    *v = ((h >> (j * 8)) & 0xff) as f64 + 1.0;
                }
                let total: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= total);
                let class = crate::nn::argmax(&p);
                PredictionRecord { flow: f.clone(), probabilities: p, class }
            }).collect();
            let sel = select_angel_devil(&rows, count, 4, &spec);
            if n >= 2 * count {
                prop_assert_eq!(sel.angels.len(), count);
                prop_assert_eq!(sel.devils.len(), count);
            }
            for a in &sel.angels {
                prop_assert!(sel.devils.iter().all(|d| d.flow != a.flow));
            }
            for w in sel.angels.windows(2) {
                if w[0].class == w[1].class {
                    prop_assert!(w[0].probabilities[0] >= w[1].probabilities[0]);
                }
            }
        }
    }

    #[test]
    fn accuracy_arithmetic() {
        let flows: Vec<Flow> = (0..400u16).map(|i| Flow::new(vec![i])).collect();
        let mut truth = HashMap::new();
        for (i, f) in flows.iter().enumerate() {
            let class = match i {
                0..190 => 0,
                200..390 => 6,
                _ => 3,
            };
            truth.insert(f.clone(), class);
        }
        let acc = compute_accuracy(&flows[..200], &flows[200..], &truth, 7, 200).unwrap();
        assert_eq!((acc.correct_angels, acc.correct_devils), (190, 190));
        assert!((acc.value - 0.95).abs() < 1e-15);
        let perfect = compute_accuracy(&flows[..190], &flows[200..390], &truth, 7, 190).unwrap();
        assert_eq!(perfect.value, 1.0);
        let none = compute_accuracy(&flows[390..], &flows[190..200], &truth, 7, 10).unwrap();
        assert_eq!(none.value, 0.0);
        let missing = [Flow::new(vec![999])];
        assert!(matches!(
            compute_accuracy(&missing, &[], &truth, 7, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn ground_truth_matches_percentile_partition() {
        let spec = FlowSpaceSpec::numbered(4, 2).unwrap();
        let oracle = Oracle::Synthetic(SyntheticOracleConfig::default());
        let flows: Vec<Flow> = enumerate_flows(&spec).unwrap().collect();
        assert_eq!(flows.len(), 2520);
        let qor: Vec<QoRRecord> = flows.iter().map(|f| oracle.evaluate(&spec, f).unwrap()).collect();
        let model = fit_class_model(&qor, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
        let truth = ground_truth_classes(&flows, &spec, &oracle, &model, 2).unwrap();
        let mut sizes = [0usize; 7];
        for c in truth.values() {
            sizes[*c] += 1;
        }
        // ranks ceil(p/100 * 2520) = 126, 378, 1008, 1638, 2268, 2394
        let distinct: std::collections::HashSet<u64> = qor.iter().map(|q| q.delay.to_bits()).collect();
        assert_eq!(distinct.len(), qor.len());
        assert_eq!(sizes, [126, 252, 630, 630, 630, 126, 126]);
        assert!(ground_truth_classes(&[], &spec, &oracle, &model, 1).unwrap().is_empty());
    }

    fn tiny_config() -> TrainerConfig {
        TrainerConfig {
            initial_threshold: 60,
            retrain_interval: 30,
            training_budget: 120,
            sample_count: 200,
            class_count: 3,
            output_count: 5,
            percentiles: vec![20.0, 80.0],
            architecture: Architecture {
                conv_filters: 2,
                conv_kernel: (3, 6),
                local_filters: 0,
                dense_units: 8,
                ..Architecture::default()
            },
            training: FitConfig {
                steps: 40,
                log_interval: 20,
                optimizer: OptimizerConfig::new(OptimizerKind::Rmsprop, 1e-3),
                ..FitConfig::default()
            },
            parallelism: 2,
            ..TrainerConfig::default()
        }
    }

    #[derive(Default)]
    struct Recorder {
        training: Vec<Flow>,
        samples: Vec<Flow>,
        labels: Vec<(usize, usize)>,
        cycles: Vec<(usize, usize, usize)>,
    }

    impl RunObserver for Recorder {
        fn flows_drawn(&mut self, training: &[Flow], samples: &[Flow]) -> Result<()> {
            self.training = training.to_vec();
            self.samples = samples.to_vec();
            Ok(())
        }

        fn labels_added(&mut self, records: &[LabeledFlow], version: usize) -> Result<()> {
            self.labels.push((records.len(), version));
            Ok(())
        }

        fn cycle_finished(&mut self, report: &CycleReport<'_>) -> Result<()> {
            self.cycles.push((report.index, report.labels_used, report.selection.angels.len()));
            Ok(())
        }
    }

    #[test]
    fn incremental_run_contract() {
        let spec = FlowSpaceSpec::numbered(4, 2).unwrap();
        let oracle = Oracle::Synthetic(SyntheticOracleConfig::default());
        let cfg = tiny_config();
        let mut rec = Recorder::default();
        let out = run_incremental(&spec, &oracle, &cfg, 9, &mut rec).unwrap();

        let training: std::collections::HashSet<_> = rec.training.iter().collect();
        assert!(rec.samples.iter().all(|f| !training.contains(f)));
        assert_eq!(rec.training.len(), 120);
        assert_eq!(rec.samples.len(), 200);
        assert_eq!(rec.labels, vec![(60, 1), (30, 2), (30, 3)]);
        assert_eq!(rec.cycles, vec![(1, 60, 5), (2, 90, 5), (3, 120, 5)]);
        assert_eq!(out.cycles.len(), 3);
        assert_eq!(out.predictions.len(), 200);
        assert_eq!(out.sample_qor.len(), 200);
        assert_eq!(out.selection.angels.len(), 5);
        assert_eq!(out.selection.devils.len(), 5);
        for p in &out.predictions {
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // the final class model is fitted on exactly the labels collected
        let refit = cfg
            .objective
            .fit(out.dataset.iter().map(|d| &d.qor), 3, &cfg.percentiles)
            .unwrap();
        assert_eq!(refit, out.class_model);

        let again = run_incremental(&spec, &oracle, &cfg, 9, &mut ()).unwrap();
        assert_eq!(again.selection, out.selection);
        assert_eq!(again.model, out.model);
    }

    #[test]
    fn failing_oracle_aborts() {
        let spec = FlowSpaceSpec::numbered(4, 2).unwrap();
        let oracle = Oracle::External {
            tool: crate::oracle::ExternalToolConfig {
                command: vec!["/nonexistent/tool".into()],
                preamble: String::new(),
                postamble: String::new(),
                pass_commands: Default::default(),
                patterns: [("delay", "d=(\\S+)"), ("area", "a=(\\S+)")]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
                timeout_secs: 5.0,
            },
            design: "/nonexistent/design".into(),
        };
        let err = run_incremental(&spec, &oracle, &tiny_config(), 1, &mut ()).err().unwrap();
        assert!(matches!(err, Error::Aborted { failed: 60, total: 60, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = [
            TrainerConfig {
                class_count: 1,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                initial_threshold: 20_000,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                output_count: 200_000,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                percentiles: vec![50.0],
                ..TrainerConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
