//! Error metrics, the historical-average baseline and comparison reports.

use std::collections::HashMap;
use std::io::Write;

use chrono::{DateTime, SecondsFormat, Utc};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{DayType, FlowTensor, FragmentIndex};
use crate::par;

fn check_shapes(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predicted matrices vs {} true ones",
            pred.len(),
            truth.len()
        )));
    }
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "matrix {k}: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Sum of `f(pred - truth)` and the number of entries it ran over.
fn accumulate(
    pred: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    nonzero_only: bool,
    f: impl Fn(f64) -> f64,
) -> Result<(f64, usize)> {
    check_shapes(pred, truth)?;
    let mut sum = 0.0;
    let mut count = 0;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t.iter()) {
            if nonzero_only && *b == 0.0 {
                continue;
            }
            sum += f(a - b);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean absolute error over all entries, or over entries with nonzero truth.
/// Zero when nothing is counted.
pub fn mae_with(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>], nonzero_only: bool) -> Result<f64> {
    let (s, n) = accumulate(pred, truth, nonzero_only, f64::abs)?;
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn rmse_with(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>], nonzero_only: bool) -> Result<f64> {
    let (s, n) = accumulate(pred, truth, nonzero_only, |d| d * d)?;
    Ok(if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
}

pub fn mae(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<f64> {
    mae_with(pred, truth, false)
}

pub fn rmse(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<f64> {
    rmse_with(pred, truth, false)
}

/// Adjusted Rand index of two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |k: u64| (k * k.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&k| pairs(k)).sum();
    let sa: f64 = rows.values().map(|&k| pairs(k)).sum();
    let sb: f64 = cols.values().map(|&k| pairs(k)).sum();
    let total = pairs(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both labelings trivial (all one cluster or all singletons)
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Which bucket an HA prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaSource {
    /// Same hour, weekday and day type.
    Exact,
    /// Same hour and day type, any weekday.
    HourDayType,
    /// Mean of all training matrices.
    Global,
}

fn mean_of(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(mats[0].nrows(), mats[0].ncols());
    for m in mats {
        acc += *m;
    }
    acc / mats.len() as f64
}

/// Historical average: mean of training matrices sharing the target's
/// hour, weekday and day type, with coarser fallbacks.
pub fn ha_baseline(train: &FlowTensor, targets: &[FragmentIndex]) -> Result<(Vec<DMatrix<f64>>, Vec<HaSource>)> {
    if train.is_empty() {
        return Err(Error::Data("historical average needs training fragments".into()));
    }
    // sorting by start makes the summation order independent of input order
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| train.fragments[i].start);
    let mut exact: HashMap<(u32, u32, DayType), Vec<&DMatrix<f64>>> = HashMap::new();
    let mut coarse: HashMap<(u32, DayType), Vec<&DMatrix<f64>>> = HashMap::new();
    for &i in &order {
        let f = &train.fragments[i];
        let m = &train.matrices[i];
        exact.entry(f.period_key()).or_default().push(m);
        coarse.entry((f.hour(), f.day_type)).or_default().push(m);
    }
    let all: Vec<&DMatrix<f64>> = order.iter().map(|&i| &train.matrices[i]).collect();
    let out = par::map_slice(targets, |t| {
        if let Some(v) = exact.get(&t.period_key()) {
            (mean_of(v), HaSource::Exact)
        } else if let Some(v) = coarse.get(&(t.hour(), t.day_type)) {
            (mean_of(v), HaSource::HourDayType)
        } else {
            (mean_of(&all), HaSource::Global)
        }
    });
    Ok(out.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentMetric {
    pub fragment_start: DateTime<Utc>,
    pub hour: u32,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub fingerprint: String,
    pub mae: f64,
    pub rmse: f64,
    pub nonzero_only: bool,
    pub per_fragment: Vec<FragmentMetric>,
}

/// Truth matrices aligned to `frags` by start time.
fn align<'a>(frags: &[FragmentIndex], truth: &'a FlowTensor) -> Result<Vec<&'a DMatrix<f64>>> {
    let by_start: HashMap<DateTime<Utc>, usize> =
        truth.fragments.iter().enumerate().map(|(i, f)| (f.start, i)).collect();
    frags
        .iter()
        .map(|f| {
            by_start
                .get(&f.start)
                .map(|&i| &truth.matrices[i])
                .ok_or_else(|| Error::Data(format!("no true fragment starting {}", f.start)))
        })
        .collect()
}

/// One report per named prediction tensor against `truth`.
pub fn compare(
    models: &[(String, FlowTensor)],
    truth: &FlowTensor,
    fingerprint: &str,
    nonzero_only: bool,
) -> Result<Vec<MetricReport>> {
    models
        .iter()
        .map(|(name, pred)| {
            let t: Vec<DMatrix<f64>> = align(&pred.fragments, truth)?.into_iter().cloned().collect();
            let per = par::map_range(pred.len(), |k| -> Result<FragmentMetric> {
                let p = std::slice::from_ref(&pred.matrices[k]);
                let tt = std::slice::from_ref(&t[k]);
                Ok(FragmentMetric {
                    fragment_start: pred.fragments[k].start,
                    hour: pred.fragments[k].hour(),
                    mae: mae_with(p, tt, nonzero_only)?,
                    rmse: rmse_with(p, tt, nonzero_only)?,
                })
            });
            Ok(MetricReport {
                model: name.clone(),
                fingerprint: fingerprint.to_string(),
                mae: mae_with(&pred.matrices, &t, nonzero_only)?,
                rmse: rmse_with(&pred.matrices, &t, nonzero_only)?,
                nonzero_only,
                per_fragment: per.into_iter().collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// `model,fragment_start,hour,mae,rmse`
pub fn write_report_csv<W: Write>(w: W, reports: &[MetricReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["model", "fragment_start", "hour", "mae", "rmse"])?;
    for r in reports {
        for f in &r.per_fragment {
            wr.write_record([
                r.model.clone(),
                f.fragment_start.to_rfc3339_opts(SecondsFormat::Secs, true),
                f.hour.to_string(),
                f.mae.to_string(),
                f.rmse.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub fingerprint: String,
    pub models: Vec<ModelSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub fragments: usize,
    pub nonzero_only: bool,
}

pub fn summarize(reports: &[MetricReport]) -> ReportSummary {
    ReportSummary {
        fingerprint: reports.first().map(|r| r.fingerprint.clone()).unwrap_or_default(),
        models: reports
            .iter()
            .map(|r| ModelSummary {
                model: r.model.clone(),
                mae: r.mae,
                rmse: r.rmse,
                fragments: r.per_fragment.len(),
                nonzero_only: r.nonzero_only,
            })
            .collect(),
    }
}
