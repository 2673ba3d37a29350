//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, TimeZone, Utc};
use flowcast::flow::{FlowTensor, FragmentIndex, FragmentSpec, TripRecord};
use flowcast::flow::{laplacian, periodicity_weights};
use flowcast::geo::{GeoPoint, PartitionParams, Projection, Region, RegionMap};
use flowcast::pattern::BasisSet;
use flowcast::recon::{LossMode, ObjectiveParams, Problem};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LON0: f64 = 121.47;
pub const LAT0: f64 = 31.23;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn utc(y: i32, mo: u32, d: u32, h: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, mo, d, h, 0, 0).unwrap()
}

/// Points clustered around a few random centres plus uniform background.
pub fn random_points(seed: u64, n: usize) -> Vec<GeoPoint> {
    let mut r = rng(seed);
    let proj = Projection::new(LON0, LAT0);
    let n_blobs = r.random_range(1..=5);
    let centres: Vec<[f64; 2]> = (0..n_blobs)
        .map(|_| [r.random_range(-800.0..800.0), r.random_range(-800.0..800.0)])
        .collect();
    (0..n)
        .map(|_| {
            let xy = if r.random_bool(0.8) {
                let c = centres[r.random_range(0..n_blobs)];
                let sd = r.random_range(10.0..60.0);
                [c[0] + sd * gauss(&mut r), c[1] + sd * gauss(&mut r)]
            } else {
                [r.random_range(-1000.0..1000.0), r.random_range(-1000.0..1000.0)]
            };
            proj.unproject(xy)
        })
        .collect()
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the fixtures free of extra distributions
    let u1: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// O(n^2) DBSCAN: every pairwise distance, clusters grown by breadth-first
/// search over core points, border points to the nearest core with ties to
/// the cluster holding the smallest core index.
pub fn brute_dbscan(points: &[GeoPoint], params: &PartitionParams) -> Vec<Option<usize>> {
    let n = points.len();
    if n == 0 {
        return vec![];
    }
    let proj = Projection::at_mean(points);
    let xy: Vec<[f64; 2]> = points.iter().map(|&p| proj.project(p)).collect();
    let eps2 = params.epsilon_m * params.epsilon_m;
    let d2 = |i: usize, j: usize| (xy[i][0] - xy[j][0]).powi(2) + (xy[i][1] - xy[j][1]).powi(2);
    let nbrs: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| d2(i, j) <= eps2).collect()).collect();
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= params.min_pts).collect();
    let mut label = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || label[s].is_some() {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([s]);
        label[s] = Some(next);
        while let Some(u) = queue.pop_front() {
            for &v in &nbrs[u] {
                if core[v] && label[v].is_none() {
                    label[v] = Some(next);
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    let mut out = label.clone();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &j in &nbrs[i] {
            if core[j] {
                let cand = (d2(i, j), label[j].unwrap());
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        out[i] = best.map(|b| b.1);
    }
    out
}

/// Partition as a set of member-index sets, noise left out.
pub fn as_sets(labels: &[Option<usize>]) -> BTreeSet<BTreeSet<usize>> {
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(*l).or_default().insert(i);
        }
    }
    groups.into_values().collect()
}

/// `m` regions 500 m apart on a line.
pub fn line_map(m: usize, radius: f64) -> RegionMap {
    let proj = Projection::new(LON0, LAT0);
    let regions = (0..m)
        .map(|k| Region {
            id: k,
            centroid: proj.unproject([500.0 * k as f64, 0.0]),
            member_count: 1,
            members: vec![],
        })
        .collect();
    RegionMap::new(regions, radius).unwrap()
}

pub fn trip(map: &RegionMap, i: usize, j: usize, at: DateTime<Utc>) -> TripRecord {
    TripRecord {
        bike_id: format!("b{i}-{j}"),
        pickup: map.regions[i].centroid,
        pickup_time: at,
        dropoff: map.regions[j].centroid,
        dropoff_time: at + Duration::minutes(10),
    }
}

/// Consecutive hourly fragments from `start`, day types from the default calendar.
pub fn hourly(start: DateTime<Utc>, n: usize) -> Vec<FragmentIndex> {
    let spec = FragmentSpec::default();
    (0..n).map(|k| spec.fragment_at(k, start + Duration::hours(k as i64))).collect()
}

pub fn tensor(start: DateTime<Utc>, mats: Vec<DMatrix<f64>>) -> FlowTensor {
    let m = mats[0].nrows();
    FlowTensor::new(hourly(start, mats.len()), mats, m).unwrap()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

/// Entry-wise relative error with the scale floored at `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `k` nonnegative subspaces of dimension `dim` on disjoint entry supports,
/// `per` matrices each, shuffled. Noise is uniform with Frobenius norm about
/// `noise` times the signal norm.
pub fn planted_subspaces(
    seed: u64,
    k: usize,
    per: usize,
    m: usize,
    dim: usize,
    noise: f64,
) -> (FlowTensor, Vec<usize>) {
    let mut r = rng(seed);
    let d = m * m;
    let mut cells: Vec<usize> = (0..d).collect();
    cells.shuffle(&mut r);
    let block = d / k;
    let spans: Vec<Vec<DMatrix<f64>>> = (0..k)
        .map(|g| {
            (0..dim)
                .map(|_| {
                    let mut v = DMatrix::zeros(m, m);
                    for &c in &cells[g * block..(g + 1) * block] {
                        v[(c % m, c / m)] = r.random_range(0.0..1.0);
                    }
                    v
                })
                .collect()
        })
        .collect();
    let mut items: Vec<(usize, DMatrix<f64>)> = Vec::new();
    for (g, span) in spans.iter().enumerate() {
        for _ in 0..per {
            let mut x = DMatrix::zeros(m, m);
            for v in span {
                x += v * r.random_range(0.2..1.0) * 10.0;
            }
            let scale = noise * x.norm() * (3.0 / d as f64).sqrt();
            x.iter_mut().for_each(|e| *e += r.random_range(0.0..1.0) * scale);
            items.push((g, x));
        }
    }
    items.shuffle(&mut r);
    let (labels, mats): (Vec<usize>, Vec<_>) = items.into_iter().unzip();
    (tensor(utc(2024, 3, 4, 0), mats), labels)
}

/// Objective with negligible priors and no penalties.
pub fn flat() -> ObjectiveParams {
    ObjectiveParams {
        lambda: 0.0,
        gamma: 0.0,
        sigma: 1e8,
        eta: 1.0,
        theta: 1e-9,
        ..ObjectiveParams::default()
    }
}

pub fn basis_set(bases: Vec<DMatrix<f64>>) -> BasisSet {
    let mass = bases.iter().map(|b| b.sum()).collect();
    BasisSet {
        bases,
        labels: vec![],
        mass,
    }
}

/// Strictly positive bases and coefficients, with the exact Poisson means.
pub fn planted(seed: u64, n: usize, m: usize, c: usize, scale: f64) -> (BasisSet, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let mut r = rng(seed);
    let bases: Vec<_> = (0..c).map(|_| random_matrix(&mut r, m, m, 0.05, 1.0)).collect();
    let s = random_matrix(&mut r, n, c, 0.5, 2.0) * scale;
    let means = (0..n)
        .map(|i| {
            let mut f = DMatrix::zeros(m, m);
            for (k, b) in bases.iter().enumerate() {
                f += b * s[(i, k)];
            }
            f
        })
        .collect();
    (basis_set(bases), s, means)
}

/// Random instance for derivative checks: N <= 6, M <= 5, C <= 3, with a graph term.
pub fn fd_instance(seed: u64, loss: LossMode) -> (Problem, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let (n, m, c) = (r.random_range(2..7), r.random_range(2..6), r.random_range(1..4));
    let x = DMatrix::from_fn(m * m, n, |_, _| if r.random_bool(0.25) { 0.0 } else { r.random_range(0..12) as f64 });
    let frags = hourly(utc(2024, 3, 4, 0), n);
    let mut w = periodicity_weights(&frags);
    for i in 0..n {
        for j in 0..i {
            if r.random_bool(0.4) {
                w[(i, j)] = 1.0;
                w[(j, i)] = 1.0;
            }
        }
    }
    let lap = laplacian(&w);
    let params = ObjectiveParams {
        gamma: 0.7,
        sigma: 1.3,
        eta: 2.5,
        theta: 0.8,
        loss,
        ..ObjectiveParams::default()
    };
    let p = Problem::from_data(x, &params, Some(&lap)).unwrap();
    let b = random_matrix(&mut r, m * m, c, 0.2, 2.0);
    let s = random_matrix(&mut r, n, c, 0.3, 2.0);
    (p, b, s)
}
