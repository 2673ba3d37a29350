//! Trip ingestion and the hourly flow tensor.
//!
//! `F^n[i][j]` counts trips picked up in region `i` and dropped off in region
//! `j` whose pickup time falls in fragment `n`. Rows are departures, columns
//! are arrivals.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, SecondsFormat, Timelike, Utc, Weekday};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, RegionMap};
use crate::matrix_io;
use crate::par;

pub const DEFAULT_FRAGMENT_SECS: i64 = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayType {
    Workday,
    Holiday,
}

impl std::str::FromStr for DayType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "workday" | "weekday" => Ok(DayType::Workday),
            "holiday" | "weekend" => Ok(DayType::Holiday),
            other => Err(Error::Data(format!("unknown day type {other:?}"))),
        }
    }
}

impl std::fmt::Display for DayType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DayType::Workday => "workday",
            DayType::Holiday => "holiday",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub bike_id: String,
    pub pickup: GeoPoint,
    pub pickup_time: DateTime<Utc>,
    pub dropoff: GeoPoint,
    pub dropoff_time: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripRow {
    bike_id: String,
    pickup_lon: f64,
    pickup_lat: f64,
    pickup_time: String,
    dropoff_lon: f64,
    dropoff_lat: f64,
    dropoff_time: String,
}

fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::Data(format!("bad timestamp {s:?}: {e}")))
}

fn format_time(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Reads trips from CSV with header
/// `bike_id,pickup_lon,pickup_lat,pickup_time,dropoff_lon,dropoff_lat,dropoff_time`.
pub fn read_trips<R: Read>(r: R) -> Result<Vec<TripRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize::<TripRow>() {
        let row = row?;
        out.push(TripRecord {
            pickup: GeoPoint::new(row.pickup_lon, row.pickup_lat)?,
            pickup_time: parse_time(&row.pickup_time)?,
            dropoff: GeoPoint::new(row.dropoff_lon, row.dropoff_lat)?,
            dropoff_time: parse_time(&row.dropoff_time)?,
            bike_id: row.bike_id,
        });
    }
    Ok(out)
}

pub fn write_trips<W: Write>(w: W, trips: &[TripRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for t in trips {
        wtr.serialize(TripRow {
            bike_id: t.bike_id.clone(),
            pickup_lon: t.pickup.lon,
            pickup_lat: t.pickup.lat,
            pickup_time: format_time(&t.pickup_time),
            dropoff_lon: t.dropoff.lon,
            dropoff_lat: t.dropoff.lat,
            dropoff_time: format_time(&t.dropoff_time),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_trips(path: &Path) -> Result<Vec<TripRecord>> {
    read_trips(std::fs::File::open(path)?)
}

/// Day-type calendar. Dates not listed fall back to Mon-Fri workday,
/// Sat/Sun holiday.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calendar {
    days: BTreeMap<NaiveDate, DayType>,
}

impl Calendar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, date: NaiveDate, day_type: DayType) {
        self.days.insert(date, day_type);
    }

    pub fn day_type(&self, date: NaiveDate) -> DayType {
        self.days.get(&date).copied().unwrap_or(match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::Holiday,
            _ => DayType::Workday,
        })
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// Reads CSV `date,day_type` with ISO dates.
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut cal = Calendar::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Data(format!("calendar row needs 2 fields: {rec:?}")));
            }
            let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
                .map_err(|e| Error::Data(format!("bad calendar date {:?}: {e}", &rec[0])))?;
            cal.insert(date, rec[1].parse()?);
        }
        Ok(cal)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "day_type"])?;
        for (d, t) in &self.days {
            wtr.write_record([d.format("%Y-%m-%d").to_string(), t.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// One time fragment of the tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentIndex {
    pub n: usize,
    pub start: DateTime<Utc>,
    pub duration_secs: i64,
    pub day_type: DayType,
    /// Offset of local time from UTC, used for hour-of-day and weekday.
    #[serde(default)]
    pub utc_offset_secs: i32,
}

impl FragmentIndex {
    pub fn local_start(&self) -> NaiveDateTime {
        (self.start + Duration::seconds(self.utc_offset_secs as i64)).naive_utc()
    }

    pub fn hour(&self) -> u32 {
        self.local_start().hour()
    }

    pub fn weekday(&self) -> Weekday {
        self.local_start().weekday()
    }

    pub fn local_date(&self) -> NaiveDate {
        self.local_start().date()
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + Duration::seconds(self.duration_secs)
    }

    /// Key shared by fragments of "the same time interval": hour, weekday, day type.
    pub fn period_key(&self) -> (u32, u32, DayType) {
        (self.hour(), self.weekday().num_days_from_monday(), self.day_type)
    }
}

/// How trips are binned into fragments.
#[derive(Debug, Clone)]
pub struct FragmentSpec {
    pub duration_secs: i64,
    pub utc_offset_secs: i32,
    pub calendar: Calendar,
    /// Half-open `[start, end)` window; derived from the trips when `None`.
    pub window: Option<(DateTime<Utc>, DateTime<Utc>)>,
    /// Keep only fragments of this day type.
    pub day_type: Option<DayType>,
}

impl Default for FragmentSpec {
    fn default() -> Self {
        FragmentSpec {
            duration_secs: DEFAULT_FRAGMENT_SECS,
            utc_offset_secs: 0,
            calendar: Calendar::new(),
            window: None,
            day_type: None,
        }
    }
}

impl FragmentSpec {
    /// Start of the fragment containing `t`.
    pub fn align(&self, t: DateTime<Utc>) -> DateTime<Utc> {
        let off = self.utc_offset_secs as i64;
        let local = t.timestamp() + off;
        let aligned = local.div_euclid(self.duration_secs) * self.duration_secs - off;
        DateTime::from_timestamp(aligned, 0).expect("aligned timestamp in range")
    }

    pub fn fragment_at(&self, n: usize, start: DateTime<Utc>) -> FragmentIndex {
        let mut f = FragmentIndex {
            n,
            start,
            duration_secs: self.duration_secs,
            day_type: DayType::Workday,
            utc_offset_secs: self.utc_offset_secs,
        };
        f.day_type = self.calendar.day_type(f.local_date());
        f
    }

    /// All fragments in `[start, end)` that pass the day-type filter.
    pub fn fragments(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> Vec<FragmentIndex> {
        let mut out = Vec::new();
        let mut t = self.align(start);
        while t < end {
            let f = self.fragment_at(out.len(), t);
            if self.day_type.is_none_or(|d| d == f.day_type) {
                out.push(f);
            }
            t += Duration::seconds(self.duration_secs);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardReport {
    pub kept: usize,
    /// Trips with at least one endpoint outside every region.
    pub unassigned: usize,
    pub outside_window: usize,
    /// Trips inside the window whose fragment was excluded by the day-type filter.
    pub filtered_day_type: usize,
    /// Trips with dropoff before pickup.
    pub invalid_time: usize,
}

impl DiscardReport {
    fn merge(&mut self, o: &DiscardReport) {
        self.kept += o.kept;
        self.unassigned += o.unassigned;
        self.outside_window += o.outside_window;
        self.filtered_day_type += o.filtered_day_type;
        self.invalid_time += o.invalid_time;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    pub fragments: Vec<FragmentIndex>,
    pub matrices: Vec<DMatrix<f64>>,
    pub m: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    m: usize,
    fragments: Vec<FragmentIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    discards: Option<DiscardReport>,
}

impl FlowTensor {
    pub fn new(fragments: Vec<FragmentIndex>, matrices: Vec<DMatrix<f64>>, m: usize) -> Result<Self> {
        let t = FlowTensor { fragments, matrices, m };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fragments.len() != self.matrices.len() {
            return Err(Error::Dimension(format!(
                "{} fragments but {} matrices",
                self.fragments.len(),
                self.matrices.len()
            )));
        }
        for (k, f) in self.matrices.iter().enumerate() {
            if f.nrows() != self.m || f.ncols() != self.m {
                return Err(Error::Dimension(format!("matrix {k} is not {0}x{0}", self.m)));
            }
            if f.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Data(format!("matrix {k} has negative or non-finite entries")));
            }
        }
        for w in self.fragments.windows(2) {
            if w[1].start <= w[0].start {
                return Err(Error::Data("fragment starts must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.matrices.iter().map(|f| f.sum()).sum()
    }

    /// Sub-tensor of fragments satisfying `keep`, renumbered from 0.
    pub fn filter(&self, mut keep: impl FnMut(&FragmentIndex) -> bool) -> FlowTensor {
        let mut fragments = Vec::new();
        let mut matrices = Vec::new();
        for (f, m) in self.fragments.iter().zip(&self.matrices) {
            if keep(f) {
                let mut f = f.clone();
                f.n = fragments.len();
                fragments.push(f);
                matrices.push(m.clone());
            }
        }
        FlowTensor {
            fragments,
            matrices,
            m: self.m,
        }
    }

    /// Splits into fragments before `t` and fragments at or after `t`.
    pub fn split_at(&self, t: DateTime<Utc>) -> (FlowTensor, FlowTensor) {
        (self.filter(|f| f.start < t), self.filter(|f| f.start >= t))
    }

    /// Sidecar metadata path for a binary tensor path.
    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    pub fn save(&self, bin: &Path, discards: Option<&DiscardReport>) -> Result<()> {
        matrix_io::save_matrices(bin, &self.matrices)?;
        let meta = TensorMeta {
            m: self.m,
            fragments: self.fragments.clone(),
            discards: discards.cloned(),
        };
        let f = std::io::BufWriter::new(std::fs::File::create(Self::sidecar_path(bin))?);
        serde_json::to_writer_pretty(f, &meta)?;
        Ok(())
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let (m, matrices) = matrix_io::load_matrices(bin)?;
        let f = std::io::BufReader::new(std::fs::File::open(Self::sidecar_path(bin))?);
        let meta: TensorMeta = serde_json::from_reader(f)?;
        if !matrices.is_empty() && meta.m != m {
            return Err(Error::Data(format!("sidecar m={} but container m={m}", meta.m)));
        }
        FlowTensor::new(meta.fragments, matrices, meta.m)
    }
}

const INGEST_CHUNK: usize = 4096;

/// Bins trips into a flow tensor.
///
/// Trips are binned by pickup time only. Self-loops are kept. Trips with an
/// unassignable endpoint, outside the window, or in a filtered-out fragment
/// are counted in the returned [`DiscardReport`].
pub fn build_tensor(
    trips: &[TripRecord],
    map: &RegionMap,
    spec: &FragmentSpec,
) -> Result<(FlowTensor, DiscardReport)> {
    if map.is_empty() {
        return Err(Error::EmptyRegionMap);
    }
    if spec.duration_secs <= 0 {
        return Err(Error::Config("fragment duration must be > 0".into()));
    }
    let m = map.len();
    let (start, end) = match spec.window {
        Some(w) => w,
        None => match (
            trips.iter().map(|t| t.pickup_time).min(),
            trips.iter().map(|t| t.pickup_time).max(),
        ) {
            (Some(lo), Some(hi)) => (spec.align(lo), spec.align(hi) + Duration::seconds(spec.duration_secs)),
            _ => {
                return Ok((
                    FlowTensor::new(Vec::new(), Vec::new(), m)?,
                    DiscardReport::default(),
                ))
            }
        },
    };
    let fragments = spec.fragments(start, end);
    let index: HashMap<i64, usize> = fragments
        .iter()
        .map(|f| (f.start.timestamp(), f.n))
        .collect();

    let n_chunks = trips.len().div_ceil(INGEST_CHUNK);
    let partials = par::map_range(n_chunks, |c| {
        let lo = c * INGEST_CHUNK;
        let hi = (lo + INGEST_CHUNK).min(trips.len());
        let mut counts: HashMap<(usize, usize, usize), u64> = HashMap::new();
        let mut rep = DiscardReport::default();
        for t in &trips[lo..hi] {
            if t.dropoff_time < t.pickup_time {
                rep.invalid_time += 1;
                continue;
            }
            if t.pickup_time < start || t.pickup_time >= end {
                rep.outside_window += 1;
                continue;
            }
            let Some(&n) = index.get(&spec.align(t.pickup_time).timestamp()) else {
                rep.filtered_day_type += 1;
                continue;
            };
            match (map.assign(t.pickup), map.assign(t.dropoff)) {
                (Some(i), Some(j)) => {
                    *counts.entry((n, i, j)).or_default() += 1;
                    rep.kept += 1;
                }
                _ => rep.unassigned += 1,
            }
        }
        (counts, rep)
    });

    let mut matrices = vec![DMatrix::<f64>::zeros(m, m); fragments.len()];
    let mut report = DiscardReport::default();
    for (counts, rep) in partials {
        report.merge(&rep);
        for ((n, i, j), c) in counts {
            matrices[n][(i, j)] += c as f64;
        }
    }
    Ok((FlowTensor::new(fragments, matrices, m)?, report))
}

/// `(outflow, inflow)` of region `i`: row sum and column sum.
pub fn in_out_flow(f: &DMatrix<f64>, i: usize) -> Result<(f64, f64)> {
    if i >= f.nrows() || i >= f.ncols() {
        return Err(Error::Dimension(format!(
            "region {i} out of range for {}x{} matrix",
            f.nrows(),
            f.ncols()
        )));
    }
    Ok((f.row(i).sum(), f.column(i).sum()))
}

/// Periodicity graph: `W[i][j] = 1` iff `i != j` and the fragments share
/// hour-of-day, weekday and day type.
pub fn periodicity_weights(fragments: &[FragmentIndex]) -> DMatrix<f64> {
    let n = fragments.len();
    let keys: Vec<_> = fragments.iter().map(FragmentIndex::period_key).collect();
    DMatrix::from_fn(n, n, |i, j| if i != j && keys[i] == keys[j] { 1.0 } else { 0.0 })
}

/// Combinatorial Laplacian `D - W` with `D_ii = sum_j W_ij`.
pub fn laplacian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = -w.clone();
    for i in 0..w.nrows() {
        l[(i, i)] += w.row(i).sum();
    }
    l
}
