//! Density-based region partition of trip endpoints.
//!
//! Points are projected to a local equirectangular plane (meters) centred on
//! the dataset's mean coordinate, then clustered with DBSCAN. Clusters become
//! regions, noise is dropped, and arbitrary coordinates are mapped back to a
//! region by nearest centroid within an assignment radius.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        let p = GeoPoint { lon, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lon.is_finite() && self.lat.is_finite())
            || !(-180.0..=180.0).contains(&self.lon)
            || !(-90.0..=90.0).contains(&self.lat)
        {
            return Err(Error::Data(format!(
                "coordinate out of range: ({}, {})",
                self.lon, self.lat
            )));
        }
        Ok(())
    }
}

/// Equirectangular projection to meters around a reference point.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    lon0: f64,
    lat0: f64,
    cos_lat0: f64,
}

impl Projection {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        Projection {
            lon0,
            lat0,
            cos_lat0: lat0.to_radians().cos(),
        }
    }

    /// Projection centred on the arithmetic mean of `points`.
    pub fn at_mean(points: &[GeoPoint]) -> Self {
        if points.is_empty() {
            return Projection::new(0.0, 0.0);
        }
        let n = points.len() as f64;
        let lon0 = points.iter().map(|p| p.lon).sum::<f64>() / n;
        let lat0 = points.iter().map(|p| p.lat).sum::<f64>() / n;
        Projection::new(lon0, lat0)
    }

    pub fn project(&self, p: GeoPoint) -> [f64; 2] {
        [
            EARTH_RADIUS_M * (p.lon - self.lon0).to_radians() * self.cos_lat0,
            EARTH_RADIUS_M * (p.lat - self.lat0).to_radians(),
        ]
    }

    /// Inverse of [`Projection::project`].
    pub fn unproject(&self, xy: [f64; 2]) -> GeoPoint {
        GeoPoint {
            lon: self.lon0 + (xy[0] / (EARTH_RADIUS_M * self.cos_lat0)).to_degrees(),
            lat: self.lat0 + (xy[1] / EARTH_RADIUS_M).to_degrees(),
        }
    }

    pub fn distance(&self, a: GeoPoint, b: GeoPoint) -> f64 {
        let (pa, pb) = (self.project(a), self.project(b));
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionParams {
    /// Neighborhood radius in meters.
    pub epsilon_m: f64,
    /// Minimum neighborhood size (self included) for a core point.
    pub min_pts: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            epsilon_m: 70.0,
            min_pts: 30,
        }
    }
}

impl PartitionParams {
    /// A stricter core-point threshold at the default radius.
    pub fn best_accuracy() -> Self {
        PartitionParams {
            epsilon_m: 70.0,
            min_pts: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_m.is_finite() && self.epsilon_m > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon_m
            )));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    pub centroid: GeoPoint,
    pub member_count: usize,
    /// Member points; empty when loaded from a document without members.
    pub members: Vec<GeoPoint>,
}

/// DBSCAN output: regions plus the per-point region label (`None` = noise).
#[derive(Debug, Clone)]
pub struct Partition {
    pub regions: Vec<Region>,
    pub labels: Vec<Option<usize>>,
}

/// Uniform grid with cell side `epsilon / sqrt(2)`, so any two points sharing
/// a cell are neighbours and every neighbour lies within two cells.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

/// Cell offsets that can hold a point within `epsilon`; the `(2, 2)` corners cannot.
const OFFSETS: [(i64, i64); 21] = {
    let mut out = [(0i64, 0i64); 21];
    let mut k = 0;
    let mut dx = -2;
    while dx <= 2 {
        let mut dy = -2;
        while dy <= 2 {
            if !(dx * dx == 4 && dy * dy == 4) {
                out[k] = (dx, dy);
                k += 1;
            }
            dy += 1;
        }
        dx += 1;
    }
    out
};

impl Grid {
    fn new(xy: &[[f64; 2]], epsilon: f64) -> Self {
        let cell = epsilon / std::f64::consts::SQRT_2;
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in xy.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Grid { cell, cells }
    }

    fn key(p: &[f64; 2], cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    fn neighbours(&self, (cx, cy): (i64, i64)) -> impl Iterator<Item = &Vec<usize>> + '_ {
        OFFSETS
            .iter()
            .filter_map(move |&(dx, dy)| self.cells.get(&(cx + dx, cy + dy)))
    }

    /// Calls `f(j, squared_distance)` for every point within `sqrt(r2)` of `p`.
    fn for_each_within(&self, xy: &[[f64; 2]], p: &[f64; 2], r2: f64, mut f: impl FnMut(usize, f64)) {
        for bucket in self.neighbours(Self::key(p, self.cell)) {
            for &j in bucket {
                let d2 = sq_dist(p, &xy[j]);
                if d2 <= r2 {
                    f(j, d2);
                }
            }
        }
    }

    /// Number of points within `sqrt(r2)` of `p`, counting stops at `cap`.
    fn count_within(&self, xy: &[[f64; 2]], p: &[f64; 2], r2: f64, cap: usize) -> usize {
        let key = Self::key(p, self.cell);
        let own = self.cells[&key].len();
        if own >= cap {
            return own;
        }
        let mut c = 0;
        for bucket in self.neighbours(key) {
            for &j in bucket {
                if sq_dist(p, &xy[j]) <= r2 {
                    c += 1;
                    if c >= cap {
                        return c;
                    }
                }
            }
        }
        c
    }
}

#[inline]
fn sq_dist(p: &[f64; 2], q: &[f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (a, b) = (find(parent, a), find(parent, b));
    if a != b {
        parent[a.max(b)] = a.min(b);
    }
}

/// DBSCAN over geographic points.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `epsilon_m`. Clusters are the connected components of the core-core
/// neighborhood graph. A border point joins the cluster of its nearest core
/// point, ties going to the cluster whose smallest core index is lower, which
/// makes the partition independent of input order. Region ids are assigned by
/// descending member count, ties by smallest member index.
pub fn dbscan_partition(points: &[GeoPoint], params: &PartitionParams) -> Result<Partition> {
    params.validate()?;
    for p in points {
        p.validate()?;
    }
    let n = points.len();
    if n == 0 {
        return Ok(Partition {
            regions: Vec::new(),
            labels: Vec::new(),
        });
    }
    let proj = Projection::at_mean(points);
    let xy: Vec<[f64; 2]> = points.iter().map(|&p| proj.project(p)).collect();
    let eps2 = params.epsilon_m * params.epsilon_m;
    let grid = Grid::new(&xy, params.epsilon_m);

    let is_core: Vec<bool> = par::map_range(n, |i| grid.count_within(&xy, &xy[i], eps2, params.min_pts) >= params.min_pts);

    // Cores sharing a cell are connected outright; two cells are joined when
    // any pair of their cores is within epsilon.
    let mut keys: Vec<(i64, i64)> = grid.cells.keys().copied().collect();
    keys.sort_unstable();
    let cores: HashMap<(i64, i64), Vec<usize>> = keys
        .iter()
        .filter_map(|k| {
            let c: Vec<usize> = grid.cells[k].iter().copied().filter(|&i| is_core[i]).collect();
            (!c.is_empty()).then_some((*k, c))
        })
        .collect();
    let core_keys: Vec<(i64, i64)> = keys.iter().copied().filter(|k| cores.contains_key(k)).collect();
    let links = par::map_slice(&core_keys, |&(cx, cy)| {
        let mine = &cores[&(cx, cy)];
        OFFSETS
            .iter()
            .map(|&(dx, dy)| (cx + dx, cy + dy))
            .filter(|&k| k > (cx, cy))
            .filter_map(|k| cores.get(&k).map(|theirs| (k, theirs)))
            .filter(|(_, theirs)| {
                mine.iter()
                    .any(|&a| theirs.iter().any(|&b| sq_dist(&xy[a], &xy[b]) <= eps2))
            })
            .map(|(k, _)| k)
            .collect::<Vec<_>>()
    });
    let mut parent: Vec<usize> = (0..n).collect();
    for (k, linked) in core_keys.iter().zip(&links) {
        let mine = &cores[k];
        for &i in &mine[1..] {
            union(&mut parent, mine[0], i);
        }
        for other in linked {
            union(&mut parent, mine[0], cores[other][0]);
        }
    }

    // provisional cluster ids ordered by smallest core index
    let mut cluster_of_root: HashMap<usize, usize> = HashMap::new();
    let mut provisional = vec![usize::MAX; n];
    for i in 0..n {
        if is_core[i] {
            let root = find(&mut parent, i);
            let next = cluster_of_root.len();
            provisional[i] = *cluster_of_root.entry(root).or_insert(next);
        }
    }

    let border = par::map_range(n, |i| {
        if is_core[i] {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        grid.for_each_within(&xy, &xy[i], eps2, |j, d2| {
            if is_core[j] {
                let cand = (d2, provisional[j]);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        });
        best.map(|(_, c)| c)
    });
    for (i, b) in border.into_iter().enumerate() {
        if let Some(c) = b {
            provisional[i] = c;
        }
    }

    let n_clusters = cluster_of_root.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &c) in provisional.iter().enumerate() {
        if c != usize::MAX {
            members[c].push(i);
        }
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(members[c].len()), members[c][0]));

    let mut labels = vec![None; n];
    let regions = order
        .iter()
        .enumerate()
        .map(|(id, &c)| {
            let pts: Vec<GeoPoint> = members[c].iter().map(|&i| points[i]).collect();
            for &i in &members[c] {
                labels[i] = Some(id);
            }
            Region {
                id,
                centroid: centroid(&pts),
                member_count: pts.len(),
                members: pts,
            }
        })
        .collect();
    Ok(Partition { regions, labels })
}

/// DBSCAN returning only the regions.
pub fn dbscan(points: &[GeoPoint], params: &PartitionParams) -> Result<Vec<Region>> {
    Ok(dbscan_partition(points, params)?.regions)
}

fn centroid(points: &[GeoPoint]) -> GeoPoint {
    let n = points.len() as f64;
    GeoPoint {
        lon: points.iter().map(|p| p.lon).sum::<f64>() / n,
        lat: points.iter().map(|p| p.lat).sum::<f64>() / n,
    }
}

/// Regions plus the nearest-centroid assignment rule.
#[derive(Debug, Clone)]
pub struct RegionMap {
    pub regions: Vec<Region>,
    pub assign_radius: f64,
    proj: Projection,
    centroids_xy: Vec<[f64; 2]>,
}

impl RegionMap {
    pub fn new(regions: Vec<Region>, assign_radius: f64) -> Result<Self> {
        if !(assign_radius.is_finite() && assign_radius > 0.0) {
            return Err(Error::Config(format!(
                "assign_radius must be finite and > 0, got {assign_radius}"
            )));
        }
        for (k, r) in regions.iter().enumerate() {
            if r.id != k {
                return Err(Error::Data(format!(
                    "region ids must be contiguous from 0; found {} at position {k}",
                    r.id
                )));
            }
        }
        let centroids: Vec<GeoPoint> = regions.iter().map(|r| r.centroid).collect();
        let proj = Projection::at_mean(&centroids);
        let centroids_xy = centroids.iter().map(|&c| proj.project(c)).collect();
        Ok(RegionMap {
            regions,
            assign_radius,
            proj,
            centroids_xy,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn projection(&self) -> &Projection {
        &self.proj
    }

    /// Id of the nearest centroid within `assign_radius`, ties to the lower id.
    pub fn assign(&self, p: GeoPoint) -> Option<usize> {
        let q = self.proj.project(p);
        let r2 = self.assign_radius * self.assign_radius;
        let mut best: Option<(f64, usize)> = None;
        for (id, c) in self.centroids_xy.iter().enumerate() {
            let d2 = (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2);
            if d2 <= r2 && best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, id));
            }
        }
        best.map(|(_, id)| id)
    }

    pub fn assign_all(&self, points: &[GeoPoint]) -> Vec<Option<usize>> {
        par::map_slice(points, |&p| self.assign(p))
    }

    /// Centroid-to-centroid distance in meters.
    pub fn centroid_distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.centroids_xy[a], self.centroids_xy[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    pub fn to_document(&self, include_members: bool) -> RegionMapDoc {
        RegionMapDoc {
            assign_radius: self.assign_radius,
            regions: self
                .regions
                .iter()
                .map(|r| RegionDoc {
                    id: r.id,
                    centroid: [r.centroid.lon, r.centroid.lat],
                    member_count: r.member_count,
                    members: include_members
                        .then(|| r.members.iter().map(|p| [p.lon, p.lat]).collect()),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: RegionMapDoc) -> Result<Self> {
        let regions = doc
            .regions
            .into_iter()
            .map(|r| {
                let members = r
                    .members
                    .unwrap_or_default()
                    .into_iter()
                    .map(|[lon, lat]| GeoPoint::new(lon, lat))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Region {
                    id: r.id,
                    centroid: GeoPoint::new(r.centroid[0], r.centroid[1])?,
                    member_count: r.member_count,
                    members,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        RegionMap::new(regions, doc.assign_radius)
    }

    pub fn save(&self, path: &Path, include_members: bool) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, &self.to_document(include_members))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        RegionMap::from_document(serde_json::from_reader(f)?)
    }
}

/// Nearest-centroid lookup against a map; `None` when nothing is within radius.
pub fn assign_region(p: GeoPoint, map: &RegionMap) -> Option<usize> {
    map.assign(p)
}

/// JSON form of a [`RegionMap`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMapDoc {
    pub assign_radius: f64,
    pub regions: Vec<RegionDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDoc {
    pub id: usize,
    pub centroid: [f64; 2],
    pub member_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<[f64; 2]>>,
}
