//! End-to-end stages shared by the CLI and the tests.

use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{FitMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{compare, ha_baseline, MetricReport};
use crate::flow::{build_tensor, Calendar, DiscardReport, FlowTensor, FragmentIndex, TripRecord};
use crate::forecast::{horizon_targets, predict_horizon, Forecast};
use crate::geo::{dbscan, GeoPoint, RegionMap};
use crate::matrix_io;
use crate::pattern::{distance_histograms, extract_patterns, BasisSet, PatternResult};
use crate::recon::{fit_alternating, fit_coefficients, CoefficientMatrix, ObjectiveParams, PgState};

/// Regions from all pickup and dropoff points.
pub fn run_partition(trips: &[TripRecord], cfg: &PipelineConfig) -> Result<RegionMap> {
    let points: Vec<GeoPoint> = trips.iter().flat_map(|t| [t.pickup, t.dropoff]).collect();
    let regions = dbscan(&points, &cfg.partition)?;
    if regions.is_empty() {
        return Err(Error::EmptyRegionMap);
    }
    info!("{} regions from {} endpoints", regions.len(), points.len());
    RegionMap::new(regions, cfg.assign_radius())
}

pub fn run_build(
    trips: &[TripRecord],
    map: &RegionMap,
    calendar: Calendar,
    cfg: &PipelineConfig,
) -> Result<(FlowTensor, DiscardReport)> {
    let (tensor, rep) = build_tensor(trips, map, &cfg.tensor.spec(calendar))?;
    info!(
        "{} fragments, kept {} trips ({} unassigned, {} outside window)",
        tensor.len(),
        rep.kept,
        rep.unassigned,
        rep.outside_window
    );
    Ok((tensor, rep))
}

/// The fragments used for learning: those before `train_end`, or all of them.
pub fn training_part(tensor: &FlowTensor, cfg: &PipelineConfig) -> FlowTensor {
    match cfg.tensor.train_end {
        Some(t) => tensor.split_at(t).0,
        None => tensor.clone(),
    }
}

pub fn run_patterns(train: &FlowTensor, cfg: &PipelineConfig) -> Result<PatternResult> {
    let res = extract_patterns(train, &cfg.patterns)?;
    if !res.coeffs.converged {
        log::warn!("self-expression did not converge; bases come from the best iterate");
    }
    Ok(res)
}

/// Bases plus per-basis distance histograms when a region map is at hand.
pub fn save_bases(basis: &BasisSet, path: &Path, map: Option<&RegionMap>, cfg: &PipelineConfig) -> Result<()> {
    let hist = match map {
        Some(m) => Some(distance_histograms(basis, m, cfg.eval.histogram_bin_m)?),
        None => None,
    };
    basis.save(path, hist.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub mode: FitMode,
    pub fingerprint: String,
    pub c: usize,
    pub m: usize,
    pub labels: Vec<usize>,
    pub mass: Vec<f64>,
    pub fragments: Vec<FragmentIndex>,
    pub objective: ObjectiveParams,
    pub pg: PgState,
    /// Objective after every alternation (joint mode only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternation_trace: Vec<f64>,
}

/// Bases, coefficients and fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub basis: BasisSet,
    pub coeffs: CoefficientMatrix,
    pub meta: ModelMeta,
}

impl FittedModel {
    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    /// Base container followed by the coefficient block, plus a JSON sidecar.
    pub fn save(&self, bin: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(bin)?);
        matrix_io::write_matrices(&mut w, &self.basis.bases)?;
        matrix_io::write_coefficients(&mut w, &self.coeffs.s)?;
        std::io::Write::flush(&mut w)?;
        let f = BufWriter::new(std::fs::File::create(Self::sidecar_path(bin))?);
        serde_json::to_writer_pretty(f, &self.meta)?;
        Ok(())
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(bin)?);
        let (_, bases) = matrix_io::read_matrices(&mut r)?;
        let s = matrix_io::read_coefficients(&mut r)?;
        let meta: ModelMeta = serde_json::from_reader(BufReader::new(std::fs::File::open(Self::sidecar_path(bin))?))?;
        if meta.c != bases.len() || s.ncols() != bases.len() {
            return Err(Error::Data(format!(
                "model holds {} bases and {} coefficient columns, sidecar says {}",
                bases.len(),
                s.ncols(),
                meta.c
            )));
        }
        Ok(FittedModel {
            basis: BasisSet {
                bases,
                labels: meta.labels.clone(),
                mass: meta.mass.clone(),
            },
            coeffs: CoefficientMatrix::new(s, meta.fragments.clone())?,
            meta,
        })
    }
}

/// Coefficients for given bases, or bases and coefficients together.
pub fn run_fit(train: &FlowTensor, basis: Option<&BasisSet>, cfg: &PipelineConfig) -> Result<FittedModel> {
    let (basis, coeffs, pg, alternation_trace) = match cfg.mode {
        FitMode::Ibfp => {
            let basis = basis.ok_or_else(|| Error::Config("this fit mode needs base matrices".into()))?;
            let (coeffs, state) = fit_coefficients(train, basis, &cfg.objective, &cfg.pg)?;
            (basis.clone(), coeffs, state, Vec::new())
        }
        FitMode::Rbfp => {
            let r = fit_alternating(train, &cfg.objective, cfg.patterns.c, &cfg.alt_options(), cfg.rbfp.seed)?;
            (r.basis, r.coeffs, r.state, r.objective_trace)
        }
    };
    if !pg.converged {
        log::warn!("coefficient fit did not converge in {} sweeps", pg.iterations);
    }
    let meta = ModelMeta {
        mode: cfg.mode,
        fingerprint: cfg.fingerprint(),
        c: basis.c(),
        m: basis.m(),
        labels: basis.labels.clone(),
        mass: basis.mass.clone(),
        fragments: coeffs.fragments.clone(),
        objective: cfg.objective,
        pg,
        alternation_trace,
    };
    Ok(FittedModel { basis, coeffs, meta })
}

/// Forecast of `h + 1` fragments from `from` (default: the end of the model's history).
pub fn run_predict(
    model: &FittedModel,
    cfg: &PipelineConfig,
    calendar: Calendar,
    from: Option<DateTime<Utc>>,
    h: Option<usize>,
) -> Result<Forecast> {
    let spec = cfg.tensor.spec(calendar);
    let from = match from.or(cfg.tensor.train_end) {
        Some(t) => t,
        None => model
            .coeffs
            .fragments
            .iter()
            .map(|f| f.end())
            .max()
            .ok_or_else(|| Error::InsufficientHistory("model has no fragments".into()))?,
    };
    let h = h.unwrap_or(cfg.forecast.h);
    let targets = horizon_targets(&spec, from, h);
    predict_horizon(&model.coeffs, &targets, &model.basis, &cfg.forecast)
}

/// Reports for the forecast and the historical average, both against `truth`.
/// The average only sees truth fragments before the forecast (and before `train_end`).
pub fn run_eval(
    forecast: &FlowTensor,
    truth: &FlowTensor,
    cfg: &PipelineConfig,
    model_name: &str,
) -> Result<Vec<MetricReport>> {
    let first = forecast
        .fragments
        .iter()
        .map(|f| f.start)
        .min()
        .ok_or_else(|| Error::Data("empty forecast".into()))?;
    let cutoff = cfg.tensor.train_end.map_or(first, |t| t.min(first));
    let train = truth.split_at(cutoff).0;
    let (ha, _) = ha_baseline(&train, &forecast.fragments)?;
    let ha = FlowTensor::new(forecast.fragments.clone(), ha, forecast.m)?;
    compare(
        &[(model_name.to_string(), forecast.clone()), ("ha".to_string(), ha)],
        truth,
        &cfg.fingerprint(),
        cfg.eval.nonzero_only,
    )
}
