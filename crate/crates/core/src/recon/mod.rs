//! Graph-regularized sparse reconstruction coefficients.
//!
//! Each fragment `F^i` is modelled as Poisson with means `sum_c S_ic B^c`,
//! a Gaussian prior on `S` and a Gamma prior on `B`. The coefficients minimise
//!
//! ```text
//! NLL(S, B) + gamma tr(S^T L S) + lambda |S|_1
//! ```
//!
//! by proximal gradient over coefficient rows. A plain least-squares loss is
//! available as [`LossMode::Frobenius`].

mod alternating;
mod objective;
mod pg;

use serde::{Deserialize, Serialize};

pub use alternating::{fit_alternating, AltOptions, AltResult};
pub use objective::{
    basis_matrix, coefficient_gradient, graph_penalty, negative_log_likelihood, unflatten_bases, Problem,
};
pub use pg::{fit_coefficients, fit_problem, nnls_init, prox_l1, PgOptions, PgState};

use crate::error::{Error, Result};
use crate::flow::FragmentIndex;

/// Floor on base entries and on Poisson means inside `ln`.
pub const EPS_POS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Poisson,
    Frobenius,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" | "nll" => Ok(LossMode::Poisson),
            "frobenius" | "l2" => Ok(LossMode::Frobenius),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveParams {
    pub lambda: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub eta: f64,
    pub theta: f64,
    /// Count zero cells in the Poisson term too.
    pub indicator_all: bool,
    pub loss: LossMode,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            lambda: 0.4,
            gamma: 1e-5,
            sigma: 1.0,
            eta: 2.0,
            theta: 1.0,
            indicator_all: false,
            loss: LossMode::Poisson,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.gamma, self.sigma, self.eta, self.theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("objective parameters must be finite".into()));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("lambda and gamma must be >= 0".into()));
        }
        if self.sigma <= 0.0 || self.eta <= 0.0 || self.theta <= 0.0 {
            return Err(Error::Config("sigma, eta and theta must be > 0".into()));
        }
        Ok(())
    }
}

/// Coefficient rows, one per fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    /// `N x C`
    pub s: nalgebra::DMatrix<f64>,
    pub fragments: Vec<FragmentIndex>,
}

impl CoefficientMatrix {
    pub fn new(s: nalgebra::DMatrix<f64>, fragments: Vec<FragmentIndex>) -> Result<Self> {
        if s.nrows() != fragments.len() {
            return Err(Error::Dimension(format!(
                "{} coefficient rows for {} fragments",
                s.nrows(),
                fragments.len()
            )));
        }
        if let Some(k) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "coefficient ({}, {})",
                k % s.nrows(),
                k / s.nrows()
            )));
        }
        Ok(CoefficientMatrix { s, fragments })
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.s.row(i).iter().copied().collect()
    }
}
