//! Run configuration, the stage commands behind the `flowforge` binary, and
//! the argument parser.

use std::collections::{HashMap, HashSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowspace::{count_flows_full, Flow, FlowSpaceSpec};
use crate::labeling::{ClassModel, LabeledFlow};
use crate::nn::TrainedModel;
use crate::oracle::{evaluate_batch, Oracle, QoRRecord};
use crate::pipeline::{
    compute_accuracy, draw_flows, predict_flows, run_incremental, select_angel_devil, train_cycle, Accuracy,
    CycleReport, CycleSummary, RunObserver, RunOutcome, Selection, TrainerConfig, ACCURACY_FORMULA,
};
use crate::rundir::{self, *};

/// Overrides the configured global seed.
pub const SEED_ENV: &str = "FLOWFORGE_SEED";

/// Everything a run needs. Relative `output_dir` paths are resolved against
/// the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub flow_space: FlowSpaceSpec,
    pub oracle: Oracle,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        match &self.oracle {
            Oracle::Synthetic(s) => s.validate().map_err(Error::Config)?,
            Oracle::External { tool, .. } => tool.validate()?,
        }
        self.trainer
            .network(&self.flow_space)
            .map_err(|e| Error::Config(format!("network does not fit the flow space: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn spec(&self) -> &FlowSpaceSpec {
        &self.flow_space
    }
}

/// Locks the output directory and records the resolved config in it.
fn open_run(cfg: &RunConfig) -> Result<RunDir> {
    let dir = RunDir::lock(&cfg.output_dir)?;
    let text = cfg.to_toml()?;
    info!("resolved config (seed {}):\n{text}", cfg.seed);
    crate::persist::write_atomic(&dir.path(CONFIG), text.as_bytes())?;
    Ok(dir)
}

fn aborted_in(dir: &RunDir) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Aborted { failed, total, .. } => Error::Aborted {
            failed,
            total,
            dir: dir.root().to_path_buf(),
        },
        other => other,
    }
}

/// Exact size of the configured flow space.
pub fn cmd_count(cfg: &RunConfig) -> Result<BigUint> {
    count_flows_full(cfg.spec())
}

/// Draws the training and sample flows into the run directory.
pub fn cmd_sample(cfg: &RunConfig) -> Result<(usize, usize)> {
    let dir = open_run(cfg)?;
    let (training, samples) = draw_flows(cfg.spec(), &cfg.trainer, cfg.seed)?;
    write_flows(&dir.path(TRAINING_FLOWS), &training, cfg.spec())?;
    write_flows(&dir.path(SAMPLE_FLOWS), &samples, cfg.spec())?;
    Ok((training.len(), samples.len()))
}

/// Which flows `evaluate` measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvaluateTarget {
    /// At most this many not-yet-labeled training flows; all when `None`.
    pub count: Option<usize>,
    /// Measure the sample flows (ground truth) instead of training flows.
    pub samples: bool,
}

fn check_failures(failed: usize, total: usize, cfg: &RunConfig) -> Result<()> {
    if total > 0 && failed as f64 > cfg.trainer.max_failure_rate * total as f64 {
        return Err(Error::Aborted {
            failed,
            total,
            dir: PathBuf::new(),
        });
    }
    Ok(())
}

/// Measures flows with the oracle. Training results are appended to the
/// dataset, labeled under a class model refitted on all records.
pub fn cmd_evaluate(cfg: &RunConfig, target: EvaluateTarget) -> Result<usize> {
    let dir = open_run(cfg)?;
    evaluate_into(&dir, cfg, target).map_err(aborted_in(&dir))
}

fn evaluate_into(dir: &RunDir, cfg: &RunConfig, target: EvaluateTarget) -> Result<usize> {
    let spec = cfg.spec();
    let (list, store) = if target.samples {
        (SAMPLE_FLOWS, SAMPLE_QOR)
    } else {
        (TRAINING_FLOWS, DATASET)
    };
    let flows = read_flows(&dir.require(list)?, spec)?;
    let store_path = dir.path(store);
    let existing: Vec<DatasetRecord> = if target.samples || !store_path.exists() {
        Vec::new()
    } else {
        read_jsonl(&store_path)?
    };
    let done: HashSet<String> = if target.samples && store_path.exists() {
        read_jsonl::<SampleQoR>(&store_path)?.into_iter().map(|r| r.flow).collect()
    } else {
        existing.iter().map(|r| r.flow.clone()).collect()
    };
    let pending: Vec<Flow> = flows
        .into_iter()
        .filter(|f| !done.contains(&f.to_canonical(spec)))
        .take(target.count.unwrap_or(usize::MAX))
        .collect();
    let results = evaluate_batch(&pending, spec, &cfg.oracle, cfg.trainer.parallelism)?;
    let mut measured = Vec::new();
    let mut failed = 0;
    for (flow, result) in pending.into_iter().zip(results) {
        match result {
            Ok(qor) => measured.push((flow, qor)),
            Err(e) => {
                log::warn!("oracle failed on {}: {e}", flow.display(spec));
                failed += 1;
            }
        }
    }
    check_failures(failed, measured.len() + failed, cfg)?;

    if target.samples {
        append_jsonl(
            &store_path,
            measured.iter().map(|(f, q)| SampleQoR {
                flow: f.to_canonical(spec),
                qor: q.clone(),
            }),
        )?;
        return Ok(measured.len());
    }
    if measured.is_empty() {
        return Ok(0);
    }
    let version = existing.iter().map(|r| r.model_version).max().unwrap_or(0) + 1;
    let all_qor: Vec<QoRRecord> = existing
        .iter()
        .map(|r| Ok(r.to_labeled(spec)?.qor))
        .chain(measured.iter().map(|(_, q)| Ok(q.clone())))
        .collect::<Result<_>>()?;
    let model = cfg
        .trainer
        .objective
        .fit(&all_qor, cfg.trainer.class_count, &cfg.trainer.percentiles)?;
    let mut records = Vec::with_capacity(measured.len());
    for (flow, qor) in measured {
        let label = model.classify(&qor)?;
        records.push(DatasetRecord::new(&LabeledFlow { flow, qor, label }, spec, version));
    }
    append_jsonl(&store_path, &records)?;
    Ok(records.len())
}

fn load_dataset(dir: &RunDir, spec: &FlowSpaceSpec) -> Result<Vec<LabeledFlow>> {
    let records: Vec<DatasetRecord> = read_jsonl(&dir.require(DATASET)?)?;
    if records.is_empty() {
        return Err(Error::StageOrder(dir.path(DATASET)));
    }
    records.iter().map(|r| r.to_labeled(spec)).collect()
}

/// Refits the class model on the whole dataset and trains a fresh model.
pub fn cmd_train(cfg: &RunConfig) -> Result<(ClassModel, Vec<(usize, f64)>)> {
    let dir = open_run(cfg)?;
    let mut dataset = load_dataset(&dir, cfg.spec())?;
    let (class_model, model, trace) = train_cycle(cfg.spec(), &mut dataset, &cfg.trainer, cfg.seed)?;
    model.save(&dir.path(MODEL))?;
    write_json(&dir.path(CLASS_MODEL), &class_model)?;
    Ok((class_model, trace))
}

/// Classifies the sample flows with the trained model.
pub fn cmd_predict(cfg: &RunConfig) -> Result<usize> {
    let dir = open_run(cfg)?;
    let model_path = dir.require(MODEL)?;
    let samples = read_flows(&dir.require(SAMPLE_FLOWS)?, cfg.spec())?;
    let model = TrainedModel::<f64>::load(&model_path)?;
    let layout = match model.layout {
        Some(layout) => layout,
        None => cfg.trainer.layout(cfg.spec())?,
    };
    let predictions = predict_flows(&model, &layout, cfg.spec(), &samples)?;
    write_predictions(
        &dir.path(PREDICTIONS),
        &predictions,
        cfg.spec(),
        model.spec.class_count(),
    )?;
    Ok(predictions.len())
}

fn write_selection_files(root: &Path, selection: &Selection, spec: &FlowSpaceSpec, class_count: usize) -> Result<()> {
    write_selection(&root.join(ANGELS), &selection.angels, 0, spec)?;
    write_selection(&root.join(DEVILS), &selection.devils, class_count - 1, spec)?;
    write_json(
        &root.join(SELECTION),
        &SelectionSummary {
            angels: selection.angels.len(),
            devils: selection.devils.len(),
            angel_shortfall: selection.angel_shortfall,
            devil_shortfall: selection.devil_shortfall,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub angels: usize,
    pub devils: usize,
    pub angel_shortfall: usize,
    pub devil_shortfall: usize,
}

/// Picks angel and devil flows from the stored predictions.
pub fn cmd_select(cfg: &RunConfig) -> Result<Selection> {
    let dir = open_run(cfg)?;
    let predictions = read_predictions(&dir.require(PREDICTIONS)?, cfg.spec())?;
    let selection = select_angel_devil(
        &predictions,
        cfg.trainer.output_count,
        cfg.trainer.class_count,
        cfg.spec(),
    );
    write_selection_files(dir.root(), &selection, cfg.spec(), cfg.trainer.class_count)?;
    Ok(selection)
}

/// Accuracy figures as stored in `accuracy.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub formula: String,
    pub correct_angels: usize,
    pub correct_devils: usize,
    pub count: usize,
    pub accuracy: f64,
}

impl From<Accuracy> for AccuracyReport {
    fn from(a: Accuracy) -> Self {
        AccuracyReport {
            formula: ACCURACY_FORMULA.to_string(),
            correct_angels: a.correct_angels,
            correct_devils: a.correct_devils,
            count: a.count,
            accuracy: a.value,
        }
    }
}

struct DirObserver<'a> {
    dir: &'a RunDir,
    spec: &'a FlowSpaceSpec,
    class_count: usize,
}

impl RunObserver for DirObserver<'_> {
    fn flows_drawn(&mut self, training: &[Flow], samples: &[Flow]) -> Result<()> {
        write_flows(&self.dir.path(TRAINING_FLOWS), training, self.spec)?;
        write_flows(&self.dir.path(SAMPLE_FLOWS), samples, self.spec)
    }

    fn labels_added(&mut self, records: &[LabeledFlow], version: usize) -> Result<()> {
        append_jsonl(
            &self.dir.path(DATASET),
            records.iter().map(|r| DatasetRecord::new(r, self.spec, version)),
        )
    }

    fn cycle_finished(&mut self, report: &CycleReport<'_>) -> Result<()> {
        let cycle_dir = self.dir.cycle_dir(report.index);
        report.model.save(&cycle_dir.join(MODEL))?;
        write_json(&cycle_dir.join(CLASS_MODEL), report.class_model)?;
        write_selection_files(&cycle_dir, report.selection, self.spec, self.class_count)?;
        write_json(&cycle_dir.join(ACCURACY), &AccuracyReport::from(report.accuracy))?;
        append_jsonl(
            &self.dir.path(CYCLES),
            [CycleSummary {
                cycle: report.index,
                labels_used: report.labels_used,
                wall_seconds: report.wall_seconds,
                accuracy: report.accuracy.value,
                final_loss: report.loss_trace.last().map(|&(_, l)| l),
            }],
        )
    }
}

/// The whole pipeline into a fresh run directory.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    let dir = open_run(cfg)?;
    dir.clear()?;
    let spec = cfg.spec();
    let class_count = cfg.trainer.class_count;
    let mut observer = DirObserver {
        dir: &dir,
        spec,
        class_count,
    };
    let outcome = run_incremental(spec, &cfg.oracle, &cfg.trainer, cfg.seed, &mut observer)
        .map_err(aborted_in(&dir))?;
    outcome.model.save(&dir.path(MODEL))?;
    write_json(&dir.path(CLASS_MODEL), &outcome.class_model)?;
    write_predictions(&dir.path(PREDICTIONS), &outcome.predictions, spec, class_count)?;
    write_selection_files(dir.root(), &outcome.selection, spec, class_count)?;
    append_jsonl(
        &dir.path(SAMPLE_QOR),
        outcome.sample_qor.iter().map(|(f, q)| SampleQoR {
            flow: f.to_canonical(spec),
            qor: q.clone(),
        }),
    )?;
    write_json(&dir.path(ACCURACY), &AccuracyReport::from(outcome.accuracy))?;
    Ok(outcome)
}

/// Row counts of the CSVs written by [`cmd_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub scatter_rows: usize,
    pub selected_rows: usize,
    pub trace_rows: usize,
    pub accuracy: AccuracyReport,
}

/// Writes `qor_scatter.csv`, `selected_flows.csv` and `accuracy_trace.csv`
/// (and refreshes `accuracy.json`) from a run directory. `target` may be the
/// run directory or a config file naming it.
pub fn cmd_report(target: &Path) -> Result<ReportSummary> {
    let root = if target.is_dir() {
        target.to_path_buf()
    } else {
        RunConfig::load(target)?.output_dir
    };
    let cfg_path = rundir::require(&root, CONFIG)?;
    let cfg = RunConfig::load(&cfg_path)?;
    let spec = cfg.spec();
    let class_model: ClassModel = read_json(&rundir::require(&root, CLASS_MODEL)?)?;
    let qor_rows: Vec<SampleQoR> = read_jsonl(&rundir::require(&root, SAMPLE_QOR)?)?;
    let angels = read_selection_flows(&rundir::require(&root, ANGELS)?, spec)?;
    let devils = read_selection_flows(&rundir::require(&root, DEVILS)?, spec)?;
    let dir = RunDir::lock(&root)?;

    let mut qor: HashMap<Flow, QoRRecord> = HashMap::with_capacity(qor_rows.len());
    let mut truth = HashMap::with_capacity(qor_rows.len());
    let mut scatter = Vec::with_capacity(qor_rows.len());
    for row in &qor_rows {
        let flow = spec.parse_flow(&row.flow)?;
        let class = class_model.classify(&row.qor)?;
        scatter.push(vec![
            row.flow.clone(),
            row.qor.delay.to_string(),
            row.qor.area.to_string(),
            class.to_string(),
        ]);
        truth.insert(flow.clone(), class);
        qor.insert(flow, row.qor.clone());
    }
    write_csv(
        &dir.path(QOR_SCATTER),
        &["flow", "delay", "area", "true_class"],
        scatter,
    )?;

    let tag = cfg.trainer.objective.label();
    let mut selected = Vec::with_capacity(angels.len() + devils.len());
    for (flows, kind) in [(&angels, "angel"), (&devils, "devil")] {
        for flow in flows {
            let q = qor
                .get(flow)
                .ok_or_else(|| Error::Data(format!("no QoR recorded for selected flow {}", flow.display(spec))))?;
            selected.push(vec![
                flow.to_canonical(spec),
                format!("{tag}-{kind}"),
                q.delay.to_string(),
                q.area.to_string(),
            ]);
        }
    }
    let selected_rows = selected.len();
    write_csv(
        &dir.path(SELECTED_FLOWS),
        &["flow", "kind", "delay", "area"],
        selected,
    )?;

    let cycles: Vec<CycleSummary> = if dir.path(CYCLES).exists() {
        read_jsonl(&dir.path(CYCLES))?
    } else {
        Vec::new()
    };
    write_csv(
        &dir.path(ACCURACY_TRACE),
        &["cycle", "labels_used", "wall_seconds", "accuracy"],
        cycles.iter().map(|c| {
            vec![
                c.cycle.to_string(),
                c.labels_used.to_string(),
                c.wall_seconds.to_string(),
                c.accuracy.to_string(),
            ]
        }),
    )?;

    let accuracy = AccuracyReport::from(compute_accuracy(
        &angels,
        &devils,
        &truth,
        cfg.trainer.class_count,
        cfg.trainer.output_count,
    )?);
    write_json(&dir.path(ACCURACY), &accuracy)?;
    Ok(ReportSummary {
        scatter_rows: qor_rows.len(),
        selected_rows,
        trace_rows: cycles.len(),
        accuracy,
    })
}

#[derive(Debug, Parser)]
#[command(name = "flowforge", version, about = "Design-specific synthesis flow generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Run directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the exact number of flows in the configured space.
    Count(ConfigArgs),
    /// Draw training and sample flows.
    Sample(ConfigArgs),
    /// Measure flows with the oracle.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Measure at most this many pending training flows.
        #[arg(long)]
        count: Option<usize>,
        /// Measure the sample flows instead (ground truth for reports).
        #[arg(long)]
        samples: bool,
    },
    /// Fit classes and train the classifier on the dataset.
    Train(ConfigArgs),
    /// Classify the sample flows.
    Predict(ConfigArgs),
    /// Pick angel and devil flows from the predictions.
    Select(ConfigArgs),
    /// Run the whole pipeline.
    Run(ConfigArgs),
    /// Write plotting CSVs for a finished run.
    Report {
        /// Run directory, or the config that names it.
        target: PathBuf,
    },
}

pub fn execute(command: &Command) -> Result<String> {
    Ok(match command {
        Command::Count(a) => cmd_count(&a.load()?)?.to_string(),
        Command::Sample(a) => {
            let (t, s) = cmd_sample(&a.load()?)?;
            format!("drew {t} training flows and {s} sample flows")
        }
        Command::Evaluate {
            args,
            count,
            samples,
        } => {
            let n = cmd_evaluate(
                &args.load()?,
                EvaluateTarget {
                    count: *count,
                    samples: *samples,
                },
            )?;
            format!("evaluated {n} flows")
        }
        Command::Train(a) => {
            let (model, trace) = cmd_train(&a.load()?)?;
            let loss = trace.last().map_or(f64::NAN, |&(_, l)| l);
            format!(
                "trained on {} classes; determinators {:?}; final loss {loss}",
                model.class_count, model.determinators
            )
        }
        Command::Predict(a) => format!("classified {} flows", cmd_predict(&a.load()?)?),
        Command::Select(a) => {
            let s = cmd_select(&a.load()?)?;
            format!(
                "selected {} angels and {} devils (shortfall {}/{})",
                s.angels.len(),
                s.devils.len(),
                s.angel_shortfall,
                s.devil_shortfall
            )
        }
        Command::Run(a) => {
            let out = cmd_run(&a.load()?)?;
            format!(
                "{} training events; accuracy {} = {ACCURACY_FORMULA} with {} + {} correct of {}",
                out.cycles.len(),
                out.accuracy.value,
                out.accuracy.correct_angels,
                out.accuracy.correct_devils,
                out.accuracy.count
            )
        }
        Command::Report { target } => {
            let r = cmd_report(target)?;
            format!(
                "wrote {} scatter rows, {} selected rows, {} trace rows; accuracy {}",
                r.scatter_rows, r.selected_rows, r.trace_rows, r.accuracy.accuracy
            )
        }
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli.command) {
        Ok(message) => {
            println!("{message}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
