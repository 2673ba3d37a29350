//! Objective terms and their gradients.
//!
//! Flow matrices and bases are handled in flattened form: each fragment is a
//! column of a `D x N` data matrix (`D = M^2`) and the bases are the columns of
//! a `D x C` matrix, so fragment `i` has Poisson means `mu_i = B s_i`.

use nalgebra::{DMatrix, DVector};

use super::{LossMode, ObjectiveParams, EPS_POS};
use crate::error::{Error, Result};
use crate::flow::FlowTensor;
use crate::pattern::BasisSet;
use crate::pattern::ssc::data_matrix;

/// Flattened bases as columns, floored at `EPS_POS`.
pub fn basis_matrix(basis: &BasisSet) -> DMatrix<f64> {
    let d = basis.m() * basis.m();
    let mut b = DMatrix::zeros(d, basis.c());
    for (c, bc) in basis.bases.iter().enumerate() {
        for (k, &v) in bc.as_slice().iter().enumerate() {
            b[(k, c)] = v.max(EPS_POS);
        }
    }
    b
}

pub fn unflatten_bases(b: &DMatrix<f64>, m: usize) -> Vec<DMatrix<f64>> {
    b.column_iter()
        .map(|col| DMatrix::from_column_slice(m, m, col.as_slice()))
        .collect()
}

/// Sparse rows of a Laplacian: `(diagonal, [(j, L_ij) for j != i])`.
#[derive(Debug, Clone)]
pub(crate) struct SparseLaplacian {
    pub diag: Vec<f64>,
    pub off: Vec<Vec<(usize, f64)>>,
}

impl SparseLaplacian {
    pub fn from_dense(l: &DMatrix<f64>) -> Self {
        let n = l.nrows();
        let mut off = vec![Vec::new(); n];
        for (i, row) in off.iter_mut().enumerate() {
            for j in 0..n {
                if j != i && l[(i, j)] != 0.0 {
                    row.push((j, l[(i, j)]));
                }
            }
        }
        SparseLaplacian {
            diag: (0..n).map(|i| l[(i, i)]).collect(),
            off,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.diag.iter().all(|&d| d == 0.0) && self.off.iter().all(Vec::is_empty)
    }
}

/// Data and weights of one reconstruction problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub(crate) x: DMatrix<f64>,
    pub(crate) params: ObjectiveParams,
    pub(crate) lap: Option<SparseLaplacian>,
}

impl Problem {
    pub fn new(tensor: &FlowTensor, params: &ObjectiveParams, lap: Option<&DMatrix<f64>>) -> Result<Self> {
        Self::from_data(data_matrix(tensor), params, lap)
    }

    /// `x` holds one flattened fragment per column.
    pub fn from_data(x: DMatrix<f64>, params: &ObjectiveParams, lap: Option<&DMatrix<f64>>) -> Result<Self> {
        params.validate()?;
        let n = x.ncols();
        if let Some(l) = lap {
            if l.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "Laplacian is {}x{} but there are {n} fragments",
                    l.nrows(),
                    l.ncols()
                )));
            }
        }
        let lap = lap.map(SparseLaplacian::from_dense).filter(|l| !l.is_zero());
        Ok(Problem {
            x,
            params: *params,
            lap,
        })
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn params(&self) -> &ObjectiveParams {
        &self.params
    }

    pub(crate) fn has_graph(&self) -> bool {
        self.lap.is_some() && self.params.gamma > 0.0
    }

    fn check_shapes(&self, b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<()> {
        if b.nrows() != self.d() || s.nrows() != self.n() || s.ncols() != b.ncols() {
            return Err(Error::Dimension(format!(
                "bases {}x{}, coefficients {}x{}, data {}x{}",
                b.nrows(),
                b.ncols(),
                s.nrows(),
                s.ncols(),
                self.d(),
                self.n()
            )));
        }
        Ok(())
    }

    #[inline]
    fn counts(&self, i: usize, k: usize) -> bool {
        self.params.indicator_all || self.x[(k, i)] > 0.0
    }

    /// Data term of fragment `i` plus its share of the Gaussian prior on `S`.
    pub fn row_loss(&self, i: usize, b: &DMatrix<f64>, s: &DVector<f64>) -> f64 {
        let mu = b * s;
        let x = self.x.column(i);
        match self.params.loss {
            LossMode::Poisson => {
                let mut acc = 0.0;
                for k in 0..mu.len() {
                    if self.counts(i, k) {
                        let m = mu[k].max(EPS_POS);
                        acc += m - x[k] * m.ln();
                    }
                }
                acc + s.norm_squared() / (2.0 * self.params.sigma * self.params.sigma)
            }
            LossMode::Frobenius => 0.5 * (mu - x).norm_squared(),
        }
    }

    /// Gradient of [`Problem::row_loss`] with respect to `s`.
    pub fn row_grad(&self, i: usize, b: &DMatrix<f64>, s: &DVector<f64>) -> DVector<f64> {
        let mu = b * s;
        let x = self.x.column(i);
        let mut r = DVector::zeros(mu.len());
        match self.params.loss {
            LossMode::Poisson => {
                for k in 0..mu.len() {
                    // the clamp is flat below EPS_POS
                    if self.counts(i, k) && mu[k] > EPS_POS {
                        r[k] = 1.0 - x[k] / mu[k];
                    }
                }
                b.tr_mul(&r) + s / (self.params.sigma * self.params.sigma)
            }
            LossMode::Frobenius => {
                r = mu - x;
                b.tr_mul(&r)
            }
        }
    }

    /// `gamma * (L_ii |s_i|^2 + 2 s_i . sum_{j != i} L_ij s_j)`: every part of
    /// `gamma tr(S^T L S)` that depends on row `i`.
    pub(crate) fn graph_row(&self, i: usize, s_i: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
        let Some(lap) = self.lap.as_ref().filter(|_| self.params.gamma > 0.0) else {
            return 0.0;
        };
        let mut cross = 0.0;
        for &(j, w) in &lap.off[i] {
            cross += w * s.row(j).transpose().dot(s_i);
        }
        self.params.gamma * (lap.diag[i] * s_i.norm_squared() + 2.0 * cross)
    }

    pub(crate) fn graph_row_grad(&self, i: usize, s_i: &DVector<f64>, s: &DMatrix<f64>) -> DVector<f64> {
        let Some(lap) = self.lap.as_ref().filter(|_| self.params.gamma > 0.0) else {
            return DVector::zeros(s_i.len());
        };
        let mut g = s_i * lap.diag[i];
        for &(j, w) in &lap.off[i] {
            g += s.row(j).transpose() * w;
        }
        g * (2.0 * self.params.gamma)
    }

    /// `gamma tr(S^T L S)`
    pub fn graph_term(&self, s: &DMatrix<f64>) -> f64 {
        let Some(lap) = self.lap.as_ref().filter(|_| self.params.gamma > 0.0) else {
            return 0.0;
        };
        let mut acc = 0.0;
        for i in 0..s.nrows() {
            let si = s.row(i);
            acc += lap.diag[i] * si.norm_squared();
            for &(j, w) in &lap.off[i] {
                acc += w * si.dot(&s.row(j));
            }
        }
        self.params.gamma * acc
    }

    /// `-sum((eta - 1) ln B - theta B)`; zero in Frobenius mode.
    pub fn basis_prior(&self, b: &DMatrix<f64>) -> f64 {
        match self.params.loss {
            LossMode::Poisson => {
                let (eta, theta) = (self.params.eta, self.params.theta);
                b.iter()
                    .map(|&v| {
                        let v = v.max(EPS_POS);
                        theta * v - (eta - 1.0) * v.ln()
                    })
                    .sum()
            }
            LossMode::Frobenius => 0.0,
        }
    }

    /// Sum of row losses (data term plus Gaussian prior).
    pub fn data_term(&self, b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<f64> {
        self.check_shapes(b, s)?;
        let mut total = 0.0;
        for i in 0..self.n() {
            let v = self.row_loss(i, b, &s.row(i).transpose());
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss of fragment {i} is {v}")));
            }
            total += v;
        }
        Ok(total)
    }

    /// Smooth part: data term, `S` prior, `B` prior and graph penalty.
    pub fn smooth(&self, b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<f64> {
        Ok(self.data_term(b, s)? + self.basis_prior(b) + self.graph_term(s))
    }

    /// Smooth part plus `lambda |S|_1`.
    pub fn composite(&self, b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<f64> {
        Ok(self.smooth(b, s)? + self.params.lambda * s.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// Gradient of [`Problem::smooth`] with respect to `S` (`N x C`).
    pub fn grad_s(&self, b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shapes(b, s)?;
        let mut g = DMatrix::zeros(s.nrows(), s.ncols());
        for i in 0..self.n() {
            let si = s.row(i).transpose();
            let gi = self.row_grad(i, b, &si) + self.graph_row_grad(i, &si, s);
            g.row_mut(i).copy_from(&gi.transpose());
        }
        finite_or_err(&g, "coefficient gradient")?;
        Ok(g)
    }

    /// Gradient of [`Problem::smooth`] with respect to the flattened bases (`D x C`).
    pub fn grad_b(&self, b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shapes(b, s)?;
        let mu = b * s.transpose();
        let mut r = DMatrix::zeros(self.d(), self.n());
        match self.params.loss {
            LossMode::Poisson => {
                for i in 0..self.n() {
                    for k in 0..self.d() {
                        if self.counts(i, k) && mu[(k, i)] > EPS_POS {
                            r[(k, i)] = 1.0 - self.x[(k, i)] / mu[(k, i)];
                        }
                    }
                }
            }
            LossMode::Frobenius => r = mu - &self.x,
        }
        let mut g = r * s;
        if self.params.loss == LossMode::Poisson {
            let (eta, theta) = (self.params.eta, self.params.theta);
            for (gv, &bv) in g.iter_mut().zip(b.iter()) {
                // the prior clamp is flat below EPS_POS as well
                if bv > EPS_POS {
                    *gv += theta - (eta - 1.0) / bv;
                }
            }
        }
        finite_or_err(&g, "basis gradient")?;
        Ok(g)
    }
}

fn finite_or_err(g: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(k) = g.iter().position(|v| !v.is_finite()) {
        let (i, c) = (k % g.nrows(), k / g.nrows());
        return Err(Error::NonFinite(format!("{what} entry ({i}, {c}) is {}", g[(i, c)])));
    }
    Ok(())
}

/// `tr(S^T L S)`
pub fn graph_penalty(s: &DMatrix<f64>, lap: &DMatrix<f64>) -> Result<f64> {
    let n = s.nrows();
    if lap.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Laplacian is {}x{} for {n} coefficient rows",
            lap.nrows(),
            lap.ncols()
        )));
    }
    Ok((s.transpose() * lap * s).trace())
}

fn s_matrix(tensor: &FlowTensor, basis: &BasisSet, s: &DMatrix<f64>) -> Result<()> {
    if tensor.m != basis.m() || s.nrows() != tensor.len() || s.ncols() != basis.c() {
        return Err(Error::Dimension(format!(
            "tensor N={} M={}, bases C={} M={}, S {}x{}",
            tensor.len(),
            tensor.m,
            basis.c(),
            basis.m(),
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

/// Poisson negative log-likelihood with Gaussian prior on `S` and Gamma prior on `B`.
pub fn negative_log_likelihood(
    tensor: &FlowTensor,
    basis: &BasisSet,
    s: &DMatrix<f64>,
    params: &ObjectiveParams,
) -> Result<f64> {
    s_matrix(tensor, basis, s)?;
    let params = ObjectiveParams {
        loss: LossMode::Poisson,
        ..*params
    };
    let p = Problem::new(tensor, &params, None)?;
    let b = basis_matrix(basis);
    Ok(p.data_term(&b, s)? + p.basis_prior(&b))
}

/// Gradient of `NLL(S) + gamma tr(S^T L S)` with respect to `S`.
pub fn coefficient_gradient(
    tensor: &FlowTensor,
    basis: &BasisSet,
    s: &DMatrix<f64>,
    params: &ObjectiveParams,
    lap: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    s_matrix(tensor, basis, s)?;
    let p = Problem::new(tensor, params, lap)?;
    p.grad_s(&basis_matrix(basis), s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ObjectiveParams {
        ObjectiveParams {
            gamma: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn graph_penalty_two_nodes() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let l = crate::flow::laplacian(&w);
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 2.0]);
        let d = (s.row(0) - s.row(1)).norm_squared();
        assert!((graph_penalty(&s, &l).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn graph_row_pieces_add_up() {
        let w = DMatrix::from_fn(4, 4, |i, j| if i != j { (i + j) as f64 * 0.25 } else { 0.0 });
        let l = crate::flow::laplacian(&w);
        let x = DMatrix::from_element(2, 4, 1.0);
        let p = Problem::from_data(x, &params(), Some(&l)).unwrap();
        let s = DMatrix::from_fn(4, 2, |i, j| (i as f64 * 0.7 - j as f64).sin());
        let full = p.graph_term(&s);
        assert!((full - 0.3 * graph_penalty(&s, &l).unwrap()).abs() < 1e-12);
        // changing one row changes the total by exactly the row-local difference
        let mut s2 = s.clone();
        s2[(2, 0)] += 0.4;
        s2[(2, 1)] -= 1.1;
        let before = p.graph_row(2, &s.row(2).transpose(), &s);
        let after = p.graph_row(2, &s2.row(2).transpose(), &s2);
        assert!((p.graph_term(&s2) - full - (after - before)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_add_no_gradient() {
        let l = DMatrix::zeros(3, 3);
        let x = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let p = Problem::from_data(x, &params(), Some(&l)).unwrap();
        let s = DMatrix::from_element(3, 2, 0.5);
        assert!(p.lap.is_none());
        assert_eq!(p.graph_row_grad(0, &s.row(0).transpose(), &s), DVector::zeros(2));
    }

    #[test]
    fn bad_laplacian_shape() {
        let x = DMatrix::from_element(4, 3, 1.0);
        assert!(Problem::from_data(x, &params(), Some(&DMatrix::zeros(2, 2))).is_err());
    }
}
