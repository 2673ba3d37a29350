//! Reproducible synthetic trip data with a known generating model.
//!
//! Regions sit on a square grid. Each of `bases` planted patterns is a
//! nonnegative rank-one origin/destination matrix plus a small uniform floor,
//! normalised to unit mass. Pattern intensities follow a smooth daily profile
//! (different on workdays and holidays); the hourly flow between two regions
//! is Poisson with mean `sum_k S*_tk B*_k`, and every trip is placed with a
//! Gaussian scatter around its regions' centroids.

use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{write_trips, Calendar, DayType, FragmentIndex, FragmentSpec, TripRecord};
use crate::geo::{GeoPoint, Projection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub regions: usize,
    pub bases: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub center: [f64; 2],
    pub spacing_m: f64,
    pub scatter_m: f64,
    /// Expected workday trips per day.
    pub trips_per_day: f64,
    /// Holiday volume relative to a workday.
    pub holiday_scale: f64,
    /// Log-normal sigma of a per-day, per-pattern volume factor.
    pub day_jitter: f64,
    /// Concentration of the daily intensity profile.
    pub peak_sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            regions: 20,
            bases: 4,
            days: 14,
            start_date: NaiveDate::from_ymd_opt(2024, 3, 6).expect("valid date"),
            center: [121.47, 31.23],
            spacing_m: 600.0,
            scatter_m: 15.0,
            trips_per_day: 12_000.0,
            holiday_scale: 0.7,
            day_jitter: 0.05,
            peak_sharpness: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions < 2 || self.bases == 0 || self.days == 0 {
            return Err(Error::Config("synthetic data needs >= 2 regions, >= 1 basis, >= 1 day".into()));
        }
        let pos = [self.spacing_m, self.scatter_m, self.trips_per_day, self.holiday_scale, self.peak_sharpness];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.day_jitter >= 0.0) {
            return Err(Error::Config("synthetic scales must be finite and positive".into()));
        }
        if self.spacing_m < 10.0 * self.scatter_m {
            return Err(Error::Config("region spacing must be at least 10x the scatter".into()));
        }
        GeoPoint::new(self.center[0], self.center[1])?;
        Ok(())
    }
}

/// Ground truth of a synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    /// `[lon, lat]` per region.
    pub centroids: Vec<[f64; 2]>,
    /// Row-major `M x M` per planted pattern.
    pub bases: Vec<Vec<f64>>,
    pub fragments: Vec<FragmentIndex>,
    /// `N x K` planted coefficients, one row per fragment.
    pub coefficients: Vec<Vec<f64>>,
    /// Dominant planted pattern per fragment.
    pub labels: Vec<usize>,
    /// Sampled counts per fragment (row-major `M x M`).
    pub counts: Vec<Vec<f64>>,
}

impl SynthTruth {
    pub fn base_matrices(&self) -> Vec<DMatrix<f64>> {
        let m = self.config.regions;
        self.bases.iter().map(|b| DMatrix::from_row_slice(m, m, b)).collect()
    }

    pub fn mean_matrix(&self, n: usize) -> DMatrix<f64> {
        let m = self.config.regions;
        let mut out = DMatrix::zeros(m, m);
        for (b, &s) in self.base_matrices().iter().zip(&self.coefficients[n]) {
            out += b * s;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub trips: Vec<TripRecord>,
    pub calendar: Calendar,
    pub truth: SynthTruth,
}

impl SynthData {
    /// `trips.csv`, `calendar.csv` and `truth.json` in `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_trips(std::io::BufWriter::new(std::fs::File::create(dir.join("trips.csv"))?), &self.trips)?;
        self.calendar
            .write(std::io::BufWriter::new(std::fs::File::create(dir.join("calendar.csv"))?))?;
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join("truth.json"))?);
        serde_json::to_writer(f, &self.truth)?;
        Ok(())
    }
}

fn grid_centroids(cfg: &SynthConfig) -> Vec<[f64; 2]> {
    let cols = (cfg.regions as f64).sqrt().ceil() as usize;
    let rows = cfg.regions.div_ceil(cols);
    let proj = Projection::new(cfg.center[0], cfg.center[1]);
    let (ox, oy) = (
        (cols - 1) as f64 * cfg.spacing_m / 2.0,
        (rows - 1) as f64 * cfg.spacing_m / 2.0,
    );
    (0..cfg.regions)
        .map(|r| {
            let xy = [
                (r % cols) as f64 * cfg.spacing_m - ox,
                (r / cols) as f64 * cfg.spacing_m - oy,
            ];
            let p = proj.unproject(xy);
            [p.lon, p.lat]
        })
        .collect()
}

fn planted_bases(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
    let m = cfg.regions;
    let g = Gamma::new(0.5, 1.0).expect("valid gamma");
    (0..cfg.bases)
        .map(|_| {
            let o: Vec<f64> = (0..m).map(|_| g.sample(rng)).collect();
            let d: Vec<f64> = (0..m).map(|_| g.sample(rng)).collect();
            let mut b = DMatrix::from_fn(m, m, |i, j| o[i] * d[j]);
            let floor = 0.02 * b.sum() / (m * m) as f64;
            b.apply(|v| *v += floor);
            let total = b.sum();
            b / total
        })
        .collect()
}

/// Daily intensity of pattern `k` at `hour`, peaks spread over the day.
fn profile(cfg: &SynthConfig, k: usize, hour: u32, day_type: DayType) -> f64 {
    const WORK_PEAKS: [f64; 6] = [8.0, 18.0, 13.0, 21.0, 10.5, 16.0];
    let (peak, kappa) = match day_type {
        DayType::Workday => (WORK_PEAKS[k % WORK_PEAKS.len()], cfg.peak_sharpness),
        DayType::Holiday => (WORK_PEAKS[k % WORK_PEAKS.len()] + 2.0, 0.6 * cfg.peak_sharpness),
    };
    let phase = 2.0 * std::f64::consts::PI * (hour as f64 + 0.5 - peak) / 24.0;
    (kappa * (phase.cos() - 1.0)).exp()
}

fn profile_total(cfg: &SynthConfig, k: usize, day_type: DayType) -> f64 {
    (0..24).map(|h| profile(cfg, k, h, day_type)).sum()
}

/// Offset by a 2-D Gaussian of standard deviation `sd` metres.
fn scatter(proj: &Projection, c: [f64; 2], sd: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    let normal = Normal::new(0.0, sd).expect("valid normal");
    let xy = proj.project(GeoPoint { lon: c[0], lat: c[1] });
    proj.unproject([xy[0] + normal.sample(rng), xy[1] + normal.sample(rng)])
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.regions;
    let k = cfg.bases;
    let centroids = grid_centroids(cfg);
    let bases = planted_bases(cfg, &mut rng);

    let mut calendar = Calendar::new();
    for d in 0..cfg.days {
        let date = cfg.start_date + Duration::days(d as i64);
        let dt = calendar.day_type(date);
        calendar.insert(date, dt);
    }
    let spec = FragmentSpec {
        calendar: calendar.clone(),
        ..Default::default()
    };
    let t0: DateTime<Utc> = cfg.start_date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    let fragments = spec.fragments(t0, t0 + Duration::days(cfg.days as i64));

    let jitter = LogNormal::new(0.0, cfg.day_jitter.max(1e-12)).expect("valid lognormal");
    let day_factor: Vec<Vec<f64>> = (0..cfg.days)
        .map(|_| {
            (0..k)
                .map(|_| if cfg.day_jitter > 0.0 { jitter.sample(&mut rng) } else { 1.0 })
                .collect()
        })
        .collect();
    let per_pattern = cfg.trips_per_day / k as f64;
    let coefficients: Vec<Vec<f64>> = fragments
        .iter()
        .map(|f| {
            let day = (f.local_date() - cfg.start_date).num_days() as usize;
            let scale = match f.day_type {
                DayType::Workday => 1.0,
                DayType::Holiday => cfg.holiday_scale,
            };
            (0..k)
                .map(|c| {
                    per_pattern * scale * day_factor[day][c] * profile(cfg, c, f.hour(), f.day_type)
                        / profile_total(cfg, c, f.day_type)
                })
                .collect()
        })
        .collect();
    let labels = coefficients
        .iter()
        .map(|row| (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b }))
        .collect();

    let proj = Projection::new(cfg.center[0], cfg.center[1]);
    let mut trips = Vec::new();
    let mut counts = Vec::with_capacity(fragments.len());
    for (n, f) in fragments.iter().enumerate() {
        let mut cnt = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mean: f64 = (0..k).map(|c| coefficients[n][c] * bases[c][(i, j)]).sum();
                let draws = if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
                } else {
                    0
                };
                cnt[i * m + j] = draws as f64;
                for _ in 0..draws {
                    let pickup_time = f.start + Duration::seconds(rng.random_range(0..f.duration_secs));
                    let pickup = scatter(&proj, centroids[i], cfg.scatter_m, &mut rng);
                    let dropoff = scatter(&proj, centroids[j], cfg.scatter_m, &mut rng);
                    let ride = proj.distance(pickup, dropoff) / 4.0 + rng.random_range(60.0..300.0);
                    trips.push(TripRecord {
                        bike_id: format!("b{}", trips.len()),
                        pickup,
                        pickup_time,
                        dropoff,
                        dropoff_time: pickup_time + Duration::seconds(ride as i64),
                    });
                }
            }
        }
        counts.push(cnt);
    }

    let truth = SynthTruth {
        config: cfg.clone(),
        centroids,
        bases: bases
            .iter()
            .map(|b| (0..m).flat_map(|i| (0..m).map(move |j| b[(i, j)])).collect())
            .collect(),
        fragments,
        coefficients,
        labels,
        counts,
    };
    Ok(SynthData { trips, calendar, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            regions: 6,
            days: 2,
            trips_per_day: 600.0,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.trips, b.trips);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn bases_have_unit_mass() {
        let d = generate(&small()).unwrap();
        for b in d.truth.base_matrices() {
            assert!((b.sum() - 1.0).abs() < 1e-12);
            assert!(b.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn rejects_tight_spacing() {
        let cfg = SynthConfig {
            spacing_m: 100.0,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
