//! Sparse self-expression of flow matrices.
//!
//! Each flattened matrix `x_n` is written as a sparse combination of the
//! others by solving
//!
//! ```text
//! min ||C||_1 + tau/2 ||X - X C||_F^2   s.t. diag(C) = 0
//! ```
//!
//! with ADMM on the split `Z = C`: a ridge-type solve for `Z`, soft
//! thresholding for `C`, and a scaled dual update. The penalty is adapted by
//! residual balancing; the ridge system is diagonalised once so re-penalising
//! costs a single `k^3` product.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowTensor;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmParams {
    pub max_iter: usize,
    /// Stop when both `max|Z - C|` and `max|C - C_prev|` fall below this.
    pub tol: f64,
    /// Data-fit weight scale: `tau = alpha / mean|G_offdiag|`, `G = X^T X`.
    pub alpha: f64,
    /// Scale every flattened matrix to unit Frobenius norm first.
    pub normalize: bool,
}

impl Default for AdmmParams {
    fn default() -> Self {
        AdmmParams {
            max_iter: 2000,
            tol: 1e-5,
            alpha: 10.0,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfExpressCoeffs {
    /// `N x N`, column `n` expresses fragment `n`.
    pub csc: DMatrix<f64>,
    pub tau: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    /// Largest `||X c_n - x_n|| / ||x_n||` over nonzero columns.
    pub max_relative_residual: f64,
}

/// Flattens each flow matrix into a column of a `M^2 x N` matrix.
pub fn data_matrix(tensor: &FlowTensor) -> DMatrix<f64> {
    let d = tensor.m * tensor.m;
    let mut x = DMatrix::zeros(d, tensor.len());
    for (n, f) in tensor.matrices.iter().enumerate() {
        x.column_mut(n).copy_from_slice(f.as_slice());
    }
    x
}

/// `alpha / mean |G_ij|` over off-diagonal entries of the Gram matrix.
pub fn default_tau(gram: &DMatrix<f64>, alpha: f64) -> f64 {
    let k = gram.nrows();
    let mut sum = 0.0;
    for j in 0..k {
        for i in 0..k {
            if i != j {
                sum += gram[(i, j)].abs();
            }
        }
    }
    let mean_off = if k > 1 { sum / (k * (k - 1)) as f64 } else { 0.0 };
    let scale = if mean_off > 0.0 {
        mean_off
    } else {
        gram.diagonal().mean().max(f64::MIN_POSITIVE)
    };
    alpha / scale
}

pub fn solve_self_expressive(
    tensor: &FlowTensor,
    tau: Option<f64>,
    params: &AdmmParams,
) -> Result<SelfExpressCoeffs> {
    solve_self_expressive_columns(&data_matrix(tensor), tau, params)
}

/// Self-expression over the columns of `x`. Zero columns get zero
/// coefficients and are never used to express others.
pub fn solve_self_expressive_columns(
    x: &DMatrix<f64>,
    tau: Option<f64>,
    params: &AdmmParams,
) -> Result<SelfExpressCoeffs> {
    let n = x.ncols();
    if n < 2 {
        return Err(Error::Data(format!("self-expression needs N >= 2, got {n}")));
    }
    if !(params.tol > 0.0 && params.alpha > 0.0 && params.max_iter > 0) {
        return Err(Error::Config("ADMM tol, alpha and max_iter must be positive".into()));
    }
    let active: Vec<usize> = (0..n).filter(|&j| x.column(j).norm() > 0.0).collect();
    let k = active.len();
    let mut xa = DMatrix::zeros(x.nrows(), k);
    for (a, &j) in active.iter().enumerate() {
        let col = x.column(j);
        if params.normalize {
            xa.column_mut(a).copy_from(&(col / col.norm()));
        } else {
            xa.column_mut(a).copy_from(&col);
        }
    }
    let gram = xa.transpose() * &xa;
    let tau = match tau {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return Err(Error::Config(format!("tau must be finite and > 0, got {t}"))),
        None => default_tau(&gram, params.alpha),
    };

    let mut out = SelfExpressCoeffs {
        csc: DMatrix::zeros(n, n),
        tau,
        iterations: 0,
        primal_residual: 0.0,
        dual_residual: 0.0,
        converged: true,
        max_relative_residual: 0.0,
    };
    if k < 2 {
        out.max_relative_residual = if k == 1 { 1.0 } else { 0.0 };
        return Ok(out);
    }

    let eig = SymmetricEigen::new(gram.clone());
    let q = eig.eigenvectors;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let inverse = |rho: f64| {
        let mut qs = q.clone();
        for (j, mut col) in qs.column_iter_mut().enumerate() {
            col /= tau * lam[j] + rho;
        }
        &qs * q.transpose()
    };
    let tau_gram = &gram * tau;

    let mut rho = tau * gram.diagonal().mean();
    let mut p = inverse(rho);
    let mut p_rhs = &p * &tau_gram;
    let mut c = DMatrix::<f64>::zeros(k, k);
    let mut u = DMatrix::<f64>::zeros(k, k);
    let mut best = (f64::INFINITY, c.clone(), 0usize, 0.0, 0.0);
    let mut converged = false;
    let mut iters = 0;
    let (mut last_primal, mut last_dual) = (f64::INFINITY, f64::INFINITY);
    let block = k.div_ceil(par::current_num_threads().max(1)).max(16);

    for it in 1..=params.max_iter {
        iters = it;
        let rhs = &c - &u;
        let z = &p_rhs + block_product(&p, &rhs, block) * rho;
        let c_prev = std::mem::replace(&mut c, z.clone() + &u);
        let thr = 1.0 / rho;
        c.apply(|v| *v = soft(*v, thr));
        for i in 0..k {
            c[(i, i)] = 0.0;
        }
        u += &z - &c;

        let primal = (&z - &c).amax();
        let dual = (&c - &c_prev).amax();
        (last_primal, last_dual) = (primal, dual);
        let score = primal.max(dual);
        if score < best.0 {
            best = (score, c.clone(), it, primal, dual);
        }
        if primal <= params.tol && dual <= params.tol {
            converged = true;
            break;
        }
        // residual balancing
        if it % 10 == 0 {
            let scaled_dual = rho * dual;
            let factor = if primal > 10.0 * scaled_dual {
                2.0
            } else if scaled_dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                u /= factor;
                p = inverse(rho);
                p_rhs = &p * &tau_gram;
            }
        }
    }

    let (c, primal, dual) = if converged {
        (c, last_primal, last_dual)
    } else {
        warn!(
            "self-expression ADMM hit {} iterations (residual {:.3e}); returning best iterate",
            params.max_iter, best.0
        );
        iters = best.2;
        (best.1, best.3, best.4)
    };
    let recon = &xa * &c;
    let mut worst: f64 = 0.0;
    for a in 0..k {
        let num = (recon.column(a) - xa.column(a)).norm();
        worst = worst.max(num / xa.column(a).norm());
    }
    for (a, &ja) in active.iter().enumerate() {
        for (b, &jb) in active.iter().enumerate() {
            out.csc[(ja, jb)] = c[(a, b)];
        }
    }
    out.iterations = iters;
    out.primal_residual = primal;
    out.dual_residual = dual;
    out.converged = converged;
    out.max_relative_residual = worst;
    Ok(out)
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `a * b`, column blocks of `b` computed in parallel.
fn block_product(a: &DMatrix<f64>, b: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let k = b.ncols();
    if k <= block {
        return a * b;
    }
    let n_blocks = k.div_ceil(block);
    let parts = par::map_range(n_blocks, |bi| {
        let lo = bi * block;
        let w = block.min(k - lo);
        a * b.columns(lo, w)
    });
    let mut out = DMatrix::zeros(a.nrows(), k);
    for (bi, part) in parts.into_iter().enumerate() {
        out.columns_mut(bi * block, part.ncols()).copy_from(&part);
    }
    out
}
