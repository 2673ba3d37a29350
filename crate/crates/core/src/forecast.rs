//! Coefficient forecasting with averaged transition matrices.
//!
//! A transition `A` maps one coefficient row to the next, `s_next = s_prev A`.
//! Two averaged transitions are kept: `a_p` over the most recent precedent
//! pairs and `a_q` over same-time-of-day pairs on previous days. A forecast row
//! is `0.5 (s_{t-1} a_p + s_{t-day} a_q)` and the flow matrix is the matching
//! combination of bases, clamped at zero.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{in_out_flow, FlowTensor, FragmentIndex};
use crate::pattern::BasisSet;
use crate::recon::CoefficientMatrix;

const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMode {
    /// Re-estimate both transitions for every forecast step.
    #[default]
    PerStep,
    /// Estimate once at the first target and reuse for the whole horizon.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastParams {
    pub p: usize,
    pub q: usize,
    pub h: usize,
    pub mode: TransitionMode,
}

impl Default for ForecastParams {
    fn default() -> Self {
        ForecastParams {
            p: 5,
            q: 8,
            h: 24,
            mode: TransitionMode::PerStep,
        }
    }
}

impl ForecastParams {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(Error::Config(format!(
                "p and q must be >= 1, got p={} q={}",
                self.p, self.q
            )));
        }
        Ok(())
    }
}

/// Minimum-norm `A` with `s_prev A = s_next`. Degenerate `s_prev` gives the
/// identity and `true`.
pub fn solve_transition(s_prev: &[f64], s_next: &[f64]) -> (DMatrix<f64>, bool) {
    let c = s_prev.len();
    let norm2: f64 = s_prev.iter().map(|v| v * v).sum();
    if norm2.sqrt() <= DEGENERATE_NORM {
        warn!("transition from a zero coefficient row; using identity");
        return (DMatrix::identity(c, c), true);
    }
    let a = DMatrix::from_fn(c, s_next.len(), |i, j| s_prev[i] * s_next[j] / norm2);
    (a, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub a_p: DMatrix<f64>,
    pub a_q: DMatrix<f64>,
    /// Precedent pairs actually averaged.
    pub p: usize,
    /// Periodic pairs actually averaged.
    pub q: usize,
    /// Fragments per day.
    pub period: usize,
    /// Pairs that fell back to the identity.
    pub degenerate: usize,
}

/// One coefficient row in time.
#[derive(Debug, Clone)]
struct Entry {
    frag: FragmentIndex,
    row: Vec<f64>,
}

fn seconds_of_day(f: &FragmentIndex) -> u32 {
    use chrono::Timelike;
    f.local_start().time().num_seconds_from_midnight()
}

/// Entries usable for `target`, sorted by start.
fn precedents<'a>(entries: &'a [Entry], target: &FragmentIndex) -> Vec<&'a Entry> {
    entries
        .iter()
        .filter(|e| e.frag.start < target.start && e.frag.day_type == target.day_type)
        .collect()
}

fn periodic<'a>(entries: &'a [Entry], target: &FragmentIndex) -> Vec<&'a Entry> {
    let sod = seconds_of_day(target);
    precedents(entries, target)
        .into_iter()
        .filter(|e| seconds_of_day(&e.frag) == sod && e.frag.local_date() < target.local_date())
        .collect()
}

fn average_chain(chain: &[&Entry], want: usize, what: &str, c: usize) -> Result<(DMatrix<f64>, usize, usize)> {
    let take = chain.len().min(want + 1);
    let tail = &chain[chain.len() - take..];
    let pairs = take.saturating_sub(1);
    if pairs == 0 {
        return Err(Error::InsufficientHistory(format!(
            "no {what} transition pair available"
        )));
    }
    let mut sum = DMatrix::zeros(c, c);
    let mut degenerate = 0;
    for w in tail.windows(2) {
        let (a, deg) = solve_transition(&w[0].row, &w[1].row);
        degenerate += deg as usize;
        sum += a;
    }
    Ok((sum / pairs as f64, pairs, degenerate))
}

fn period_of(target: &FragmentIndex) -> usize {
    (86_400 / target.duration_secs.max(1)) as usize
}

fn build_from_entries(entries: &[Entry], target: &FragmentIndex, p: usize, q: usize, c: usize) -> Result<TransitionModel> {
    let (a_p, p_eff, dp) = average_chain(&precedents(entries, target), p, "precedent", c)?;
    let (a_q, q_eff, dq) = average_chain(&periodic(entries, target), q, "periodic", c)?;
    Ok(TransitionModel {
        a_p,
        a_q,
        p: p_eff,
        q: q_eff,
        period: period_of(target),
        degenerate: dp + dq,
    })
}

fn entries_of(history: &CoefficientMatrix) -> Vec<Entry> {
    let mut e: Vec<Entry> = history
        .fragments
        .iter()
        .enumerate()
        .map(|(i, f)| Entry {
            frag: f.clone(),
            row: history.row(i),
        })
        .collect();
    e.sort_by_key(|x| x.frag.start);
    e
}

/// Transitions for forecasting `target` from the coefficient history.
pub fn build_transition_model(
    history: &CoefficientMatrix,
    target: &FragmentIndex,
    p: usize,
    q: usize,
) -> Result<TransitionModel> {
    if p == 0 || q == 0 {
        return Err(Error::Config("p and q must be >= 1".into()));
    }
    let model = build_from_entries(&entries_of(history), target, p, q, history.s.ncols())?;
    warn_short(&model, p, q);
    Ok(model)
}

fn warn_short(model: &TransitionModel, p: usize, q: usize) {
    if model.p < p || model.q < q {
        warn!(
            "history shrank the transition chains to p={} (of {p}) and q={} (of {q})",
            model.p, model.q
        );
    }
}

fn row_times(s: &[f64], a: &DMatrix<f64>) -> DVector<f64> {
    a.tr_mul(&DVector::from_column_slice(s))
}

/// `0.5 (s_prev a_p + s_prev_day a_q)`
pub fn predict_row(model: &TransitionModel, s_prev: &[f64], s_prev_day: &[f64]) -> Vec<f64> {
    let v = (row_times(s_prev, &model.a_p) + row_times(s_prev_day, &model.a_q)) * 0.5;
    v.iter().copied().collect()
}

/// `sum_c s_c B^c` clamped at zero.
pub fn reconstruct(basis: &BasisSet, s: &[f64]) -> DMatrix<f64> {
    basis.combine(s).map(|v| v.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub fragments: Vec<FragmentIndex>,
    /// One predicted coefficient row per fragment.
    pub rows: DMatrix<f64>,
    pub matrices: Vec<DMatrix<f64>>,
    /// `inflow[k][i]`: predicted arrivals at region `i` in fragment `k`.
    pub inflow: Vec<Vec<f64>>,
    pub outflow: Vec<Vec<f64>>,
    pub degenerate_transitions: usize,
}

impl Forecast {
    pub fn horizon(&self) -> usize {
        self.fragments.len().saturating_sub(1)
    }

    pub fn to_tensor(&self) -> Result<FlowTensor> {
        let m = self.matrices.first().map_or(0, |f| f.nrows());
        FlowTensor::new(self.fragments.clone(), self.matrices.clone(), m)
    }

    pub fn csv_path(bin: &Path) -> PathBuf {
        bin.with_extension("csv")
    }

    /// Matrices in tensor layout next to `bin`, plus a per-region CSV.
    pub fn save(&self, bin: &Path) -> Result<()> {
        self.to_tensor()?.save(bin, None)?;
        let f = std::fs::File::create(Self::csv_path(bin))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["fragment_start", "region", "inflow", "outflow"])?;
        for (k, frag) in self.fragments.iter().enumerate() {
            let start = frag.start.to_rfc3339_opts(SecondsFormat::Secs, true);
            for i in 0..self.inflow[k].len() {
                wr.write_record([
                    start.clone(),
                    i.to_string(),
                    self.inflow[k][i].to_string(),
                    self.outflow[k][i].to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Rolls the forecast over `targets` (`h + 1` fragments in time order).
/// Each predicted row joins the history before the next step.
pub fn predict_horizon(
    history: &CoefficientMatrix,
    targets: &[FragmentIndex],
    basis: &BasisSet,
    params: &ForecastParams,
) -> Result<Forecast> {
    params.validate()?;
    let c = history.s.ncols();
    if c != basis.c() {
        return Err(Error::Dimension(format!(
            "coefficients have {c} columns but there are {} bases",
            basis.c()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Config("no target fragments".into()));
    }
    if targets.windows(2).any(|w| w[0].start >= w[1].start) {
        return Err(Error::Data("target fragments must be strictly increasing".into()));
    }
    let mut entries = entries_of(history);
    if let (Some(last), Some(first)) = (entries.last(), targets.first()) {
        if first.start <= last.frag.start {
            warn!("forecast starts inside the coefficient history; later rows are ignored");
            entries.retain(|e| e.frag.start < first.start);
        }
    }

    let fixed = match params.mode {
        TransitionMode::Fixed => Some(build_from_entries(&entries, &targets[0], params.p, params.q, c)?),
        TransitionMode::PerStep => None,
    };
    let mut rows = DMatrix::zeros(targets.len(), c);
    let mut degenerate = fixed.as_ref().map_or(0, |m| m.degenerate);
    let mut shortest: Option<TransitionModel> = None;
    for (k, target) in targets.iter().enumerate() {
        let owned;
        let model = match &fixed {
            Some(m) => m,
            None => {
                owned = build_from_entries(&entries, target, params.p, params.q, c)?;
                degenerate += owned.degenerate;
                if shortest.as_ref().is_none_or(|m| owned.p + owned.q < m.p + m.q) {
                    shortest = Some(owned.clone());
                }
                &owned
            }
        };
        let prev = precedents(&entries, target);
        let day = periodic(&entries, target);
        let (Some(prev), Some(day)) = (prev.last(), day.last()) else {
            return Err(Error::InsufficientHistory(format!(
                "no reference rows for target starting {}",
                target.start
            )));
        };
        let row = predict_row(model, &prev.row, &day.row);
        rows.row_mut(k).copy_from_slice(&row);
        entries.push(Entry {
            frag: target.clone(),
            row,
        });
    }

    if let Some(m) = fixed.as_ref().or(shortest.as_ref()) {
        warn_short(m, params.p, params.q);
    }
    let matrices: Vec<DMatrix<f64>> = (0..targets.len())
        .map(|k| reconstruct(basis, rows.row(k).clone_owned().as_slice()))
        .collect();
    let m = basis.m();
    let mut inflow = Vec::with_capacity(targets.len());
    let mut outflow = Vec::with_capacity(targets.len());
    for f in &matrices {
        let mut fin = vec![0.0; m];
        let mut fout = vec![0.0; m];
        for i in 0..m {
            (fout[i], fin[i]) = in_out_flow(f, i)?;
        }
        inflow.push(fin);
        outflow.push(fout);
    }
    Ok(Forecast {
        fragments: targets.to_vec(),
        rows,
        matrices,
        inflow,
        outflow,
        degenerate_transitions: degenerate,
    })
}

/// The `h + 1` fragments from `from` on that pass the day-type filter.
pub fn horizon_targets(
    spec: &crate::flow::FragmentSpec,
    from: DateTime<Utc>,
    h: usize,
) -> Vec<FragmentIndex> {
    let step = chrono::Duration::seconds(spec.duration_secs);
    let mut t = spec.align(from);
    let mut out = Vec::with_capacity(h + 1);
    // a filter can only skip whole days, so a year of fragments is plenty
    let limit = (h + 1) + 366 * (86_400 / spec.duration_secs.max(1)) as usize;
    for _ in 0..limit {
        if out.len() == h + 1 {
            break;
        }
        let f = spec.fragment_at(out.len(), t);
        if spec.day_type.is_none_or(|d| d == f.day_type) {
            out.push(f);
        }
        t += step;
    }
    out
}
