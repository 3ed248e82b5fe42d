//! On-disk layout of a run directory and the file formats in it.
//!
//! ```text
//! <run>/
//!   .lock                    held while a command works on the directory
//!   config.toml              resolved configuration, including the seed
//!   training_flows.txt       one canonical flow per line
//!   sample_flows.txt
//!   dataset.jsonl            append-only labeled records
//!   sample_qor.jsonl         oracle results for the sample flows
//!   cycles.jsonl             one summary per training event
//!   cycles/cycle-NNN/        model.json, class_model.json, angel/devil CSVs
//!   model.json, class_model.json
//!   predictions.csv, angel_flows.csv, devil_flows.csv, selection.json
//!   accuracy.json
//!   qor_scatter.csv, selected_flows.csv, accuracy_trace.csv   (report)
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowspace::{Flow, FlowSpaceSpec};
use crate::labeling::LabeledFlow;
use crate::oracle::QoRRecord;
use crate::persist::write_atomic;
use crate::pipeline::PredictionRecord;

pub const LOCK: &str = ".lock";
pub const CONFIG: &str = "config.toml";
pub const TRAINING_FLOWS: &str = "training_flows.txt";
pub const SAMPLE_FLOWS: &str = "sample_flows.txt";
pub const DATASET: &str = "dataset.jsonl";
pub const SAMPLE_QOR: &str = "sample_qor.jsonl";
pub const CYCLES: &str = "cycles.jsonl";
pub const CYCLE_DIR: &str = "cycles";
pub const MODEL: &str = "model.json";
pub const CLASS_MODEL: &str = "class_model.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const ANGELS: &str = "angel_flows.csv";
pub const DEVILS: &str = "devil_flows.csv";
pub const SELECTION: &str = "selection.json";
pub const ACCURACY: &str = "accuracy.json";
pub const QOR_SCATTER: &str = "qor_scatter.csv";
pub const SELECTED_FLOWS: &str = "selected_flows.csv";
pub const ACCURACY_TRACE: &str = "accuracy_trace.csv";

/// A locked run directory. The lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed and takes its lock.
    pub fn lock(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&lock, e))?;
                Ok(RunDir {
                    root: root.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(root.to_path_buf())),
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an artifact a stage needs; missing files are stage-order errors.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        require(&self.root, name)
    }

    pub fn cycle_dir(&self, cycle: usize) -> PathBuf {
        self.root.join(CYCLE_DIR).join(format!("cycle-{cycle:03}"))
    }

    /// Removes the artifacts of a previous full run so a new one starts clean.
    pub fn clear(&self) -> Result<()> {
        for name in [
            TRAINING_FLOWS,
            SAMPLE_FLOWS,
            DATASET,
            SAMPLE_QOR,
            CYCLES,
            MODEL,
            CLASS_MODEL,
            PREDICTIONS,
            ANGELS,
            DEVILS,
            SELECTION,
            ACCURACY,
            QOR_SCATTER,
            SELECTED_FLOWS,
            ACCURACY_TRACE,
        ] {
            let path = self.path(name);
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        let cycles = self.path(CYCLE_DIR);
        if cycles.exists() {
            std::fs::remove_dir_all(&cycles).map_err(|e| Error::io(&cycles, e))?;
        }
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join(LOCK));
    }
}

pub fn require(root: &Path, name: &str) -> Result<PathBuf> {
    let path = root.join(name);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::StageOrder(path))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_flows(path: &Path, flows: &[Flow], spec: &FlowSpaceSpec) -> Result<()> {
    let mut text = String::new();
    for f in flows {
        text.push_str(&f.to_canonical(spec));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_flows(path: &Path, spec: &FlowSpaceSpec) -> Result<Vec<Flow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| spec.parse_flow(l.trim()))
        .collect()
}

/// One line of `dataset.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub flow: String,
    pub delay: f64,
    pub area: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
    pub label: usize,
    /// Training event whose class model produced `label`.
    pub model_version: usize,
}

impl DatasetRecord {
    pub fn new(item: &LabeledFlow, spec: &FlowSpaceSpec, model_version: usize) -> Self {
        DatasetRecord {
            flow: item.flow.to_canonical(spec),
            delay: item.qor.delay,
            area: item.qor.area,
            extras: item.qor.extras.clone(),
            label: item.label,
            model_version,
        }
    }

    pub fn to_labeled(&self, spec: &FlowSpaceSpec) -> Result<LabeledFlow> {
        let qor = QoRRecord {
            delay: self.delay,
            area: self.area,
            extras: self.extras.clone(),
        };
        qor.check()?;
        Ok(LabeledFlow {
            flow: spec.parse_flow(&self.flow)?,
            qor,
            label: self.label,
        })
    }
}

/// Appends one JSON document per line.
pub fn append_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(items)
}

/// One line of `sample_qor.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleQoR {
    pub flow: String,
    #[serde(flatten)]
    pub qor: QoRRecord,
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(path: &Path, writer: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Data(format!("cannot encode {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Writes a CSV with a header row; every row must match the header width.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(header).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_error(path))?;
    }
    finish_csv(path, w)
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(csv_error(path))?;
    let header = r
        .headers()
        .map_err(csv_error(path))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for record in r.records() {
        rows.push(record.map_err(csv_error(path))?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

pub fn parse_f64(field: &str, path: &Path) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("{}: `{field}` is not a number", path.display())))
}

pub fn parse_usize(field: &str, path: &Path) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("{}: `{field}` is not a count", path.display())))
}

pub fn prediction_header(class_count: usize) -> Vec<String> {
    let mut header = vec!["flow".to_string(), "class".to_string()];
    header.extend((0..class_count).map(|i| format!("p{i}")));
    header
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord], spec: &FlowSpaceSpec, class_count: usize) -> Result<()> {
    let header = prediction_header(class_count);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        records.iter().map(|p| {
            let mut row = vec![p.flow.to_canonical(spec), p.class.to_string()];
            row.extend(p.probabilities.iter().map(|v| v.to_string()));
            row
        }),
    )
}

pub fn read_predictions(path: &Path, spec: &FlowSpaceSpec) -> Result<Vec<PredictionRecord>> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 4 || header[0] != "flow" || header[1] != "class" {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    rows.iter()
        .map(|row| {
            Ok(PredictionRecord {
                flow: spec.parse_flow(&row[0])?,
                class: parse_usize(&row[1], path)?,
                probabilities: row[2..]
                    .iter()
                    .map(|v| parse_f64(v, path))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub const SELECTION_HEADER: [&str; 4] = ["rank", "flow", "probability", "predicted_class"];

/// Angel or devil list; `class` is the class whose probability is reported.
pub fn write_selection(path: &Path, records: &[PredictionRecord], class: usize, spec: &FlowSpaceSpec) -> Result<()> {
    write_csv(
        path,
        &SELECTION_HEADER,
        records.iter().enumerate().map(|(i, p)| {
            vec![
                (i + 1).to_string(),
                p.flow.to_canonical(spec),
                p.probabilities[class].to_string(),
                p.class.to_string(),
            ]
        }),
    )
}

pub fn read_selection_flows(path: &Path, spec: &FlowSpaceSpec) -> Result<Vec<Flow>> {
    let (header, rows) = read_csv(path)?;
    if header != SELECTION_HEADER {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    rows.iter().map(|row| spec.parse_flow(&row[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::lock(tmp.path()).unwrap();
        assert!(matches!(RunDir::lock(tmp.path()), Err(Error::Locked(_))));
        drop(dir);
        assert!(RunDir::lock(tmp.path()).is_ok());
    }

    #[test]
    fn missing_artifact_is_stage_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = require(tmp.path(), MODEL).unwrap_err();
        assert!(matches!(err, Error::StageOrder(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn csv_numbers_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.csv");
        let values = [0.1 + 0.2, 1e-300, 123456.78901234568, f64::MIN_POSITIVE, 1.0 / 3.0];
        write_csv(&path, &["v"], values.iter().map(|v| vec![v.to_string()])).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("v\n") && !text.contains('\r'));
        let (_, rows) = read_csv(&path).unwrap();
        for (row, v) in rows.iter().zip(values) {
            assert_eq!(parse_f64(&row[0], &path).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn dataset_records_round_trip() {
        let spec = FlowSpaceSpec::new(vec!["balance", "rewrite"], 1).unwrap();
        let item = LabeledFlow {
            flow: Flow::from_indices(&[1, 0]),
            qor: QoRRecord::new(0.1 + 0.2, 7.25).unwrap(),
            label: 2,
        };
        let rec = DatasetRecord::new(&item, &spec, 3);
        assert_eq!(rec.flow, "rewrite;balance");
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join(DATASET);
        append_jsonl(&path, [&rec]).unwrap();
        append_jsonl(&path, [&rec]).unwrap();
        let back: Vec<DatasetRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![rec.clone(), rec.clone()]);
        assert_eq!(back[0].to_labeled(&spec).unwrap(), item);
    }

    #[test]
    fn predictions_round_trip() {
        let spec = FlowSpaceSpec::numbered(2, 1).unwrap();
        let records = vec![PredictionRecord {
            flow: Flow::from_indices(&[1, 0]),
            probabilities: vec![0.1 + 0.2, 0.7 - 0.0000001, 1e-17],
            class: 1,
        }];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join(PREDICTIONS);
        write_predictions(&path, &records, &spec, 3).unwrap();
        assert_eq!(read_predictions(&path, &spec).unwrap(), records);
    }
}
