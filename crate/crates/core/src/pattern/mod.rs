//! Interpretable base matrices from subspace clustering of flow matrices.
//!
//! The pipeline is: sparse self-expression ([`ssc`]), a symmetric similarity
//! graph and its normalized Laplacian, k-means on the bottom eigenvectors
//! ([`spectral`]), and one nonnegative mean matrix per cluster ([`bases`]).

pub mod bases;
pub mod spectral;
pub mod ssc;

use serde::{Deserialize, Serialize};

pub use bases::{construct_bases, distance_histograms, BasisSet, DistanceHistograms};
pub use spectral::{build_similarity, kmeans, spectral_cluster, KMeansParams, SimilarityGraph};
pub use ssc::{solve_self_expressive, AdmmParams, SelfExpressCoeffs};

use crate::error::{Error, Result};
use crate::flow::FlowTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternParams {
    /// Number of base matrices.
    pub c: usize,
    /// Explicit self-expression weight; derived from the data when `None`.
    pub tau: Option<f64>,
    pub admm: AdmmParams,
    pub kmeans: KMeansParams,
}

impl Default for PatternParams {
    fn default() -> Self {
        PatternParams {
            c: 9,
            tau: None,
            admm: AdmmParams::default(),
            kmeans: KMeansParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatternResult {
    pub coeffs: SelfExpressCoeffs,
    pub graph: SimilarityGraph,
    pub basis: BasisSet,
}

/// Full extraction: self-expression, similarity graph, spectral clustering, bases.
pub fn extract_patterns(tensor: &FlowTensor, params: &PatternParams) -> Result<PatternResult> {
    if params.c == 0 || params.c > tensor.len() {
        return Err(Error::Config(format!(
            "c must be in 1..={}, got {}",
            tensor.len(),
            params.c
        )));
    }
    let coeffs = solve_self_expressive(tensor, params.tau, &params.admm)?;
    let graph = build_similarity(&coeffs);
    let labels = spectral_cluster(&graph, params.c, &params.kmeans)?;
    let basis = construct_bases(tensor, &labels, params.c)?;
    Ok(PatternResult {
        coeffs,
        graph,
        basis,
    })
}
