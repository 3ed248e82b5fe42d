//! Percentile class models over QoR and the labels they assign.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowspace::Flow;
use crate::oracle::{Metric, QoRRecord};

/// Percentiles of the six determinators of the default seven-class model.
pub const DEFAULT_PERCENTILES: [f64; 6] = [5.0, 15.0, 40.0, 65.0, 90.0, 95.0];

/// K-class partition of one or two QoR metrics by ascending determinators.
///
/// Class 0 holds `r <= x_0`, class `i` holds `x_{i-1} < r <= x_i`, and class
/// `K - 1` holds `r > x_{K-2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub metric: Metric,
    pub determinators: Vec<f64>,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<SecondaryMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondaryMetric {
    pub metric: Metric,
    pub determinators: Vec<f64>,
}

/// A flow with its raw QoR and its current label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFlow {
    pub flow: Flow,
    pub qor: QoRRecord,
    pub label: usize,
}

fn check_arguments(class_count: usize, percentiles: &[f64]) -> Result<()> {
    if class_count < 2 {
        return Err(Error::Argument(format!(
            "at least two classes are required, got {class_count}"
        )));
    }
    if percentiles.len() != class_count - 1 {
        return Err(Error::Argument(format!(
            "{class_count} classes need {} percentiles, got {}",
            class_count - 1,
            percentiles.len()
        )));
    }
    if percentiles.iter().any(|p| !(p.is_finite() && *p > 0.0 && *p < 100.0)) {
        return Err(Error::Argument("percentiles must lie in (0, 100)".into()));
    }
    if percentiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("percentiles must be strictly ascending".into()));
    }
    Ok(())
}

/// 1-based rank `ceil(p / 100 * n)` of the `p`-th percentile, clamped to `[1, n]`.
pub fn percentile_rank(percentile: f64, n: usize) -> usize {
    ((percentile * n as f64 / 100.0).ceil() as usize).clamp(1, n)
}

fn determinators(values: &mut [f64], percentiles: &[f64]) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = percentiles
        .iter()
        .map(|&p| values[percentile_rank(p, values.len()) - 1])
        .collect();
    // duplicates in the data would collapse intervals; keep them strictly ascending
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1].next_up();
        }
    }
    out
}

fn metric_values(records: &[&QoRRecord], metric: &Metric) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.metric(metric)
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("record lacks a finite `{metric}` value")))
        })
        .collect()
}

/// Fits determinators at the given percentiles of `metric` over `records`.
pub fn fit_class_model<'a>(
    records: impl IntoIterator<Item = &'a QoRRecord>,
    metric: Metric,
    class_count: usize,
    percentiles: &[f64],
) -> Result<ClassModel> {
    check_arguments(class_count, percentiles)?;
    let records: Vec<&QoRRecord> = records.into_iter().collect();
    if records.is_empty() {
        return Err(Error::Fit("no records to fit a class model on".into()));
    }
    let mut values = metric_values(&records, &metric)?;
    Ok(ClassModel {
        determinators: determinators(&mut values, percentiles),
        metric,
        class_count,
        secondary: None,
    })
}

/// As [`fit_class_model`], with a second metric fitted at the same percentiles.
pub fn fit_class_model_multi<'a>(
    records: impl IntoIterator<Item = &'a QoRRecord>,
    primary: Metric,
    secondary: Metric,
    class_count: usize,
    percentiles: &[f64],
) -> Result<ClassModel> {
    let records: Vec<&QoRRecord> = records.into_iter().collect();
    let mut model = fit_class_model(records.iter().copied(), primary, class_count, percentiles)?;
    let mut values = metric_values(&records, &secondary)?;
    model.secondary = Some(SecondaryMetric {
        determinators: determinators(&mut values, percentiles),
        metric: secondary,
    });
    Ok(model)
}

fn band(value: f64, determinators: &[f64]) -> Result<usize> {
    if !value.is_finite() {
        return Err(Error::Data(format!("metric value {value} is not finite")));
    }
    Ok(determinators.iter().filter(|&&x| x < value).count())
}

impl ClassModel {
    pub fn is_multi(&self) -> bool {
        self.secondary.is_some()
    }

    fn primary_value(&self, record: &QoRRecord) -> Result<f64> {
        record
            .metric(&self.metric)
            .ok_or_else(|| Error::Data(format!("record lacks metric `{}`", self.metric)))
    }

    /// Label under the primary metric alone.
    pub fn assign_class(&self, record: &QoRRecord) -> Result<usize> {
        band(self.primary_value(record)?, &self.determinators)
    }

    /// Worse of the two per-metric labels.
    pub fn assign_class_multi(&self, record: &QoRRecord) -> Result<usize> {
        let secondary = self
            .secondary
            .as_ref()
            .ok_or_else(|| Error::Argument("class model has no second metric".into()))?;
        let first = self.assign_class(record)?;
        let value = record.metric(&secondary.metric).ok_or_else(|| {
            Error::Data(format!("record lacks metric `{}`", secondary.metric))
        })?;
        Ok(first.max(band(value, &secondary.determinators)?))
    }

    /// Single- or multi-metric label, whichever this model is.
    pub fn classify(&self, record: &QoRRecord) -> Result<usize> {
        if self.is_multi() {
            self.assign_class_multi(record)
        } else {
            self.assign_class(record)
        }
    }
}

/// Recomputes every label from the raw QoR under `model`.
pub fn relabel_dataset(dataset: &mut [LabeledFlow], model: &ClassModel) -> Result<()> {
    for item in dataset.iter_mut() {
        item.label = model.classify(&item.qor)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn records(values: &[f64]) -> Vec<QoRRecord> {
        values.iter().map(|&v| QoRRecord::new(v, 1.0).unwrap()).collect()
    }

    fn shuffled_range(n: usize, seed: u64) -> Vec<f64> {
        use rand::seq::SliceRandom;
        let mut v: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        v
    }

    fn class_sizes(model: &ClassModel, recs: &[QoRRecord]) -> Vec<usize> {
        let mut sizes = vec![0; model.class_count];
        for r in recs {
            sizes[model.assign_class(r).unwrap()] += 1;
        }
        sizes
    }

    #[test]
    fn thousand_record_ranks() {
        let recs = records(&shuffled_range(1000, 3));
        let model = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
        // 50th least and 50th largest
        assert_eq!(model.determinators[0], 50.0);
        assert_eq!(model.determinators[5], 950.0);
        assert_eq!(model.determinators, vec![50.0, 150.0, 400.0, 650.0, 900.0, 950.0]);
        assert_eq!(class_sizes(&model, &recs), vec![50, 100, 250, 250, 250, 50, 50]);
    }

    #[test]
    fn median_split() {
        let recs = records(&shuffled_range(100, 1));
        let model = fit_class_model(&recs, Metric::Delay, 2, &[50.0]).unwrap();
        assert_eq!(model.determinators, vec![50.0]);
    }

    #[test]
    fn uniform_random_class_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<QoRRecord> = (0..1000)
            .map(|_| QoRRecord::new(rng.random_range(1.0..2.0), 1.0).unwrap())
            .collect();
        let model = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
        assert_eq!(class_sizes(&model, &recs), vec![50, 100, 250, 250, 250, 50, 50]);
    }

    #[test]
    fn growing_dataset_moves_determinators() {
        let values = shuffled_range(1500, 4);
        let small = fit_class_model(&records(&values[..1000]), Metric::Delay, 7, &DEFAULT_PERCENTILES)
            .unwrap();
        let recs = records(&values);
        let big = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
        assert_eq!(big.determinators[0], 75.0);
        assert_ne!(small.determinators, big.determinators);
    }

    #[test]
    fn table_boundaries() {
        let model = ClassModel {
            metric: Metric::Delay,
            determinators: vec![10.0, 20.0],
            class_count: 3,
            secondary: None,
        };
        let label = |v: f64| model.assign_class(&QoRRecord::new(v, 1.0).unwrap()).unwrap();
        assert_eq!(label(10.0), 0);
        assert_eq!(label(15.0), 1);
        assert_eq!(label(20.0), 1);
        assert_eq!(label(20.5), 2);
        assert_eq!(label(1e9), 2);
        let bad = QoRRecord {
            delay: f64::NAN,
            area: 1.0,
            extras: Default::default(),
        };
        assert!(matches!(model.assign_class(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn multi_metric_takes_worse_label() {
        let model = ClassModel {
            metric: Metric::Delay,
            determinators: vec![10.0, 20.0, 30.0],
            class_count: 4,
            secondary: Some(SecondaryMetric {
                metric: Metric::Area,
                determinators: vec![1.0, 2.0, 3.0],
            }),
        };
        let r = |d: f64, a: f64| QoRRecord::new(d, a).unwrap();
        assert_eq!(model.assign_class_multi(&r(10.0, 1.0)).unwrap(), 0);
        assert_eq!(model.assign_class_multi(&r(5.0, 3.5)).unwrap(), 3);
        assert_eq!(model.assign_class_multi(&r(99.0, 99.0)).unwrap(), 3);
        assert_eq!(model.classify(&r(25.0, 1.5)).unwrap(), 2);

        let power = ClassModel {
            secondary: Some(SecondaryMetric {
                metric: Metric::Extra("power".into()),
                determinators: vec![1.0, 2.0, 3.0],
            }),
            ..model.clone()
        };
        assert!(matches!(
            power.assign_class_multi(&r(1.0, 1.0)),
            Err(Error::Data(_))
        ));
        let single = ClassModel {
            secondary: None,
            ..model
        };
        assert!(single.assign_class_multi(&r(1.0, 1.0)).is_err());
    }

    #[test]
    fn multi_fit() {
        let recs: Vec<QoRRecord> = (1..=100)
            .map(|i| QoRRecord::new(i as f64, (101 - i) as f64).unwrap())
            .collect();
        let model =
            fit_class_model_multi(&recs, Metric::Delay, Metric::Area, 2, &[50.0]).unwrap();
        assert_eq!(model.secondary.as_ref().unwrap().determinators, vec![50.0]);
    }

    #[test]
    fn fit_errors() {
        let recs = records(&[1.0, 2.0]);
        assert!(matches!(
            fit_class_model(&[], Metric::Delay, 7, &DEFAULT_PERCENTILES),
            Err(Error::Fit(_))
        ));
        assert!(matches!(
            fit_class_model(&recs, Metric::Delay, 1, &[]),
            Err(Error::Argument(_))
        ));
        assert!(fit_class_model(&recs, Metric::Delay, 3, &[50.0]).is_err());
        assert!(fit_class_model(&recs, Metric::Delay, 3, &[60.0, 50.0]).is_err());
        assert!(fit_class_model(&recs, Metric::Delay, 2, &[100.0]).is_err());
        assert!(fit_class_model(&recs, Metric::Extra("power".into()), 2, &[50.0]).is_err());
    }

    #[test]
    fn ties_are_nudged_apart() {
        let recs = records(&[5.0; 40]);
        let model = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
        assert!(model.determinators.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(model.determinators[0], 5.0);
        assert_eq!(class_sizes(&model, &recs)[0], 40);
    }

    #[test]
    fn relabel_is_idempotent() {
        let recs = records(&shuffled_range(200, 8));
        let model = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
        let mut data: Vec<LabeledFlow> = recs
            .into_iter()
            .map(|qor| LabeledFlow {
                flow: Flow::from_indices(&[0]),
                qor,
                label: 0,
            })
            .collect();
        relabel_dataset(&mut data, &model).unwrap();
        let once = data.clone();
        relabel_dataset(&mut data, &model).unwrap();
        assert_eq!(once, data);
        assert!(data.iter().any(|d| d.label == 6));
    }

    proptest! {
        #[test]
        fn monotone_partition(
            values in prop::collection::vec(0.1f64..1e3, 1..300),
            a in 0.1f64..1e3,
            b in 0.1f64..1e3,
        ) {
            let recs = records(&values);
            let model = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let la = model.assign_class(&QoRRecord::new(lo, 1.0).unwrap()).unwrap();
            let lb = model.assign_class(&QoRRecord::new(hi, 1.0).unwrap()).unwrap();
            prop_assert!(la <= lb);
            prop_assert!(lb < 7);
        }

        #[test]
        fn class_zero_rank(n in 1usize..2000, seed in any::<u64>()) {
            let recs = records(&shuffled_range(n, seed));
            let model = fit_class_model(&recs, Metric::Delay, 7, &DEFAULT_PERCENTILES).unwrap();
            let zero = recs.iter().filter(|r| model.assign_class(r).unwrap() == 0).count();
            prop_assert_eq!(zero, percentile_rank(5.0, n));
        }
    }
}
