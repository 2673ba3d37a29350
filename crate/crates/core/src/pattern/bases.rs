use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowTensor;
use crate::geo::RegionMap;
use crate::matrix_io;

/// Base matrices ordered by descending total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub bases: Vec<DMatrix<f64>>,
    /// Basis index per training fragment.
    pub labels: Vec<usize>,
    pub mass: Vec<f64>,
}

impl BasisSet {
    pub fn c(&self) -> usize {
        self.bases.len()
    }

    pub fn m(&self) -> usize {
        self.bases.first().map_or(0, |b| b.nrows())
    }

    /// `sum_c s_c B^c`
    pub fn combine(&self, s: &[f64]) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for (b, &w) in self.bases.iter().zip(s) {
            out += b * w;
        }
        out
    }

    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    pub fn save(&self, bin: &Path, histograms: Option<&DistanceHistograms>) -> Result<()> {
        matrix_io::save_matrices(bin, &self.bases)?;
        let meta = BasisMeta {
            c: self.c(),
            m: self.m(),
            labels: self.labels.clone(),
            mass: self.mass.clone(),
            distance_histogram: histograms.cloned(),
        };
        let f = std::io::BufWriter::new(std::fs::File::create(Self::sidecar_path(bin))?);
        serde_json::to_writer_pretty(f, &meta)?;
        Ok(())
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let (_, bases) = matrix_io::load_matrices(bin)?;
        let f = std::io::BufReader::new(std::fs::File::open(Self::sidecar_path(bin))?);
        let meta: BasisMeta = serde_json::from_reader(f)?;
        if meta.c != bases.len() {
            return Err(Error::Data(format!(
                "basis sidecar says c={} but container holds {}",
                meta.c,
                bases.len()
            )));
        }
        Ok(BasisSet {
            bases,
            labels: meta.labels,
            mass: meta.mass,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisMeta {
    pub c: usize,
    pub m: usize,
    pub labels: Vec<usize>,
    pub mass: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_histogram: Option<DistanceHistograms>,
}

/// Flow-weighted histogram of origin-destination centroid distances per basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistograms {
    pub bin_width_m: f64,
    /// `bins[c][k]` = mass of basis `c` on pairs with distance in bin `k`.
    pub bins: Vec<Vec<f64>>,
}

pub fn distance_histograms(basis: &BasisSet, map: &RegionMap, bin_width_m: f64) -> Result<DistanceHistograms> {
    let m = basis.m();
    if map.len() != m {
        return Err(Error::Dimension(format!(
            "basis has {m} regions but map has {}",
            map.len()
        )));
    }
    if !(bin_width_m > 0.0) {
        return Err(Error::Config("histogram bin width must be > 0".into()));
    }
    let mut max_d: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            max_d = max_d.max(map.centroid_distance(i, j));
        }
    }
    let n_bins = (max_d / bin_width_m).floor() as usize + 1;
    let bins = basis
        .bases
        .iter()
        .map(|b| {
            let mut h = vec![0.0; n_bins];
            for i in 0..m {
                for j in 0..m {
                    h[(map.centroid_distance(i, j) / bin_width_m).floor() as usize] += b[(i, j)];
                }
            }
            h
        })
        .collect();
    Ok(DistanceHistograms { bin_width_m, bins })
}

/// Entry-wise mean of each cluster, floored at zero, ordered by descending mass.
///
/// Labels are renumbered so that label `k` refers to `bases[k]`.
pub fn construct_bases(tensor: &FlowTensor, labels: &[usize], c: usize) -> Result<BasisSet> {
    if labels.len() != tensor.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} fragments",
            labels.len(),
            tensor.len()
        )));
    }
    let m = tensor.m;
    let mut sums = vec![DMatrix::<f64>::zeros(m, m); c];
    let mut counts = vec![0usize; c];
    for (f, &l) in tensor.matrices.iter().zip(labels) {
        if l >= c {
            return Err(Error::Data(format!("label {l} out of range for c={c}")));
        }
        sums[l] += f;
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("cluster {k} is empty")));
    }
    let means: Vec<DMatrix<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (s / n as f64).map(|v| v.max(0.0)))
        .collect();
    let mass: Vec<f64> = means.iter().map(|b| b.sum()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut rank = vec![0; c];
    for (r, &k) in order.iter().enumerate() {
        rank[k] = r;
    }
    Ok(BasisSet {
        bases: order.iter().map(|&k| means[k].clone()).collect(),
        labels: labels.iter().map(|&l| rank[l]).collect(),
        mass: order.iter().map(|&k| mass[k]).collect(),
    })
}
