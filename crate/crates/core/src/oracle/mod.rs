//! Quality-of-Result measurement: an external synthesis tool driven through
//! a script, or a deterministic synthetic surrogate.

mod external;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowspace::{Flow, FlowSpaceSpec};

pub use external::{evaluate_external, render_script, ExternalToolConfig, TOOL_PATH_ENV};
pub use synthetic::{evaluate_synthetic, SyntheticOracleConfig, METRIC_FLOOR};

/// Measured delay and area of one flow, plus optional named metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoRRecord {
    pub delay: f64,
    pub area: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
}

impl QoRRecord {
    pub fn new(delay: f64, area: f64) -> Result<Self> {
        let record = QoRRecord {
            delay,
            area,
            extras: BTreeMap::new(),
        };
        record.check()?;
        Ok(record)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.delay.is_finite() && self.delay > 0.0) {
            return Err(Error::Data(format!("delay must be positive, got {}", self.delay)));
        }
        if !(self.area.is_finite() && self.area > 0.0) {
            return Err(Error::Data(format!("area must be positive, got {}", self.area)));
        }
        if let Some((name, v)) = self.extras.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("metric `{name}` is not finite: {v}")));
        }
        Ok(())
    }

    pub fn metric(&self, metric: &Metric) -> Option<f64> {
        match metric {
            Metric::Delay => Some(self.delay),
            Metric::Area => Some(self.area),
            Metric::Extra(name) => self.extras.get(name).copied(),
        }
    }
}

/// Selects one QoR value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Metric {
    Delay,
    Area,
    Extra(String),
}

impl From<String> for Metric {
    fn from(s: String) -> Self {
        match s.as_str() {
            "delay" => Metric::Delay,
            "area" => Metric::Area,
            _ => Metric::Extra(s),
        }
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> Self {
        m.to_string()
    }
}

impl FromStr for Metric {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Metric::from(s.to_string()))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Delay => f.write_str("delay"),
            Metric::Area => f.write_str("area"),
            Metric::Extra(name) => f.write_str(name),
        }
    }
}

/// Where QoR values come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    Synthetic(SyntheticOracleConfig),
    External {
        #[serde(flatten)]
        tool: ExternalToolConfig,
        design: PathBuf,
    },
}

impl Oracle {
    pub fn evaluate(&self, spec: &FlowSpaceSpec, flow: &Flow) -> Result<QoRRecord> {
        match self {
            Oracle::Synthetic(cfg) => Ok(evaluate_synthetic(flow, cfg)),
            Oracle::External { tool, design } => evaluate_external(flow, spec, design, tool),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, Oracle::Synthetic(_))
    }
}

/// Evaluates `flows` on up to `parallelism` workers. Results are in input
/// order; a failing flow yields an error entry at its index.
pub fn evaluate_batch(
    flows: &[Flow],
    spec: &FlowSpaceSpec,
    oracle: &Oracle,
    parallelism: usize,
) -> Result<Vec<Result<QoRRecord>>> {
    if parallelism == 0 {
        return Err(Error::Argument("parallelism must be at least 1".into()));
    }
    if parallelism == 1 || flows.len() < 2 {
        return Ok(flows.iter().map(|f| oracle.evaluate(spec, f)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| flows.par_iter().map(|f| oracle.evaluate(spec, f)).collect()))
}
