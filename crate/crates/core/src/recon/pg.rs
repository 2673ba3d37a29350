use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::objective::{basis_matrix, Problem};
use super::{CoefficientMatrix, ObjectiveParams};
use crate::error::{Error, Result};
use crate::flow::{laplacian, periodicity_weights, FlowTensor};
use crate::par;
use crate::pattern::BasisSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgOptions {
    pub max_sweeps: usize,
    /// Relative change of the composite objective between sweeps.
    pub tol: f64,
    /// Proximal steps per row and sweep.
    pub inner_iters: usize,
    pub max_backtracks: usize,
    pub initial_lipschitz: f64,
    /// Allowed objective increase per accepted step before the fit is aborted.
    pub increase_tol: f64,
}

impl Default for PgOptions {
    fn default() -> Self {
        PgOptions {
            max_sweeps: 500,
            tol: 1e-6,
            inner_iters: 10,
            max_backtracks: 60,
            initial_lipschitz: 1.0,
            increase_tol: 1e-10,
        }
    }
}

impl PgOptions {
    fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 || self.inner_iters == 0 || self.max_backtracks == 0 {
            return Err(Error::Config("PG iteration limits must be positive".into()));
        }
        if !(self.tol >= 0.0 && self.initial_lipschitz > 0.0 && self.increase_tol >= 0.0) {
            return Err(Error::Config("PG tolerances must be >= 0 and L_pg > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgState {
    /// Final step constant per coefficient row.
    pub lipschitz: Vec<f64>,
    /// Completed sweeps.
    pub iterations: usize,
    /// Composite objective at the start and after every sweep.
    pub objective_trace: Vec<f64>,
    pub accepted_steps: usize,
    /// Largest objective change over accepted row steps (<= 0 when monotone).
    pub max_step_increase: f64,
    pub converged: bool,
}

impl PgState {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

/// Entry-wise soft thresholding.
pub fn prox_l1(z: &[f64], threshold: f64) -> Vec<f64> {
    z.iter().map(|&v| soft(v, threshold)).collect()
}

#[inline]
fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Nonnegative least squares of every fragment onto the bases, by projected gradient.
pub fn nnls_init(problem: &Problem, b: &DMatrix<f64>) -> DMatrix<f64> {
    let c = b.ncols();
    let gram = b.tr_mul(b);
    let step = SymmetricEigen::new(gram.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &v| a.max(v));
    let mut s = DMatrix::zeros(problem.n(), c);
    if step <= 0.0 {
        return s;
    }
    let rows = par::map_range(problem.n(), |i| {
        let rhs = b.tr_mul(&problem.x.column(i));
        let mut v = DVector::<f64>::zeros(c);
        for _ in 0..5000 {
            let g = &gram * &v - &rhs;
            let next = (&v - g / step).map(|x| x.max(0.0));
            let moved = (&next - &v).amax();
            v = next;
            if moved <= 1e-13 * (1.0 + v.amax()) {
                break;
            }
        }
        v
    });
    for (i, r) in rows.into_iter().enumerate() {
        s.row_mut(i).copy_from(&r.transpose());
    }
    s
}

struct RowOutcome {
    s: DVector<f64>,
    lipschitz: f64,
    accepted: usize,
    max_increase: f64,
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Proximal steps on row `i` with the other rows of `s_all` held fixed.
fn solve_row(
    p: &Problem,
    i: usize,
    b: &DMatrix<f64>,
    s_all: &DMatrix<f64>,
    opts: &PgOptions,
    mut lip: f64,
) -> RowOutcome {
    let lambda = p.params.lambda;
    let smooth = |v: &DVector<f64>| p.row_loss(i, b, v) + p.graph_row(i, v, s_all);
    let mut s = s_all.row(i).transpose();
    let mut f0 = smooth(&s);
    let mut out = RowOutcome {
        s: s.clone(),
        lipschitz: lip,
        accepted: 0,
        max_increase: f64::NEG_INFINITY,
    };
    for _ in 0..opts.inner_iters {
        let g = p.row_loss_grad_full(i, b, &s, s_all);
        let mut step = None;
        for _ in 0..opts.max_backtracks {
            let z = &s - &g / lip;
            let cand = z.map(|v| soft(v, lambda / lip));
            let d = &cand - &s;
            let f1 = smooth(&cand);
            if f1.is_finite() && f1 <= f0 + g.dot(&d) + 0.5 * lip * d.norm_squared() {
                step = Some((cand, f1, d));
                break;
            }
            lip *= 2.0;
        }
        let Some((cand, f1, d)) = step else { break };
        let before = f0 + lambda * l1(&s);
        let after = f1 + lambda * l1(&cand);
        if after > before {
            // only reachable through rounding; keep the current iterate
            break;
        }
        out.max_increase = out.max_increase.max(after - before);
        out.accepted += 1;
        let small = d.amax() <= 1e-12 * (1.0 + cand.amax());
        s = cand;
        f0 = f1;
        if small {
            break;
        }
        lip = (lip * 0.5).max(1e-12);
    }
    out.s = s;
    out.lipschitz = lip;
    out
}

impl Problem {
    fn row_loss_grad_full(&self, i: usize, b: &DMatrix<f64>, s: &DVector<f64>, s_all: &DMatrix<f64>) -> DVector<f64> {
        self.row_grad(i, b, s) + self.graph_row_grad(i, s, s_all)
    }
}

/// Proximal-gradient fit of `S` for fixed flattened bases, starting from `s0`.
pub fn fit_problem(
    p: &Problem,
    b: &DMatrix<f64>,
    s0: DMatrix<f64>,
    opts: &PgOptions,
) -> Result<(DMatrix<f64>, PgState)> {
    opts.validate()?;
    let n = p.n();
    let mut s = s0;
    let mut state = PgState {
        lipschitz: vec![opts.initial_lipschitz; n],
        iterations: 0,
        objective_trace: vec![p.composite(b, &s)?],
        accepted_steps: 0,
        max_step_increase: f64::NEG_INFINITY,
        converged: false,
    };
    for sweep in 1..=opts.max_sweeps {
        let mut accepted = 0;
        if p.has_graph() {
            for i in 0..n {
                let r = solve_row(p, i, b, &s, opts, state.lipschitz[i]);
                s.row_mut(i).copy_from(&r.s.transpose());
                state.lipschitz[i] = r.lipschitz;
                accepted += r.accepted;
                state.max_step_increase = state.max_step_increase.max(r.max_increase);
            }
        } else {
            let snapshot = &s;
            let lips = &state.lipschitz;
            let rows = par::map_range(n, |i| solve_row(p, i, b, snapshot, opts, lips[i]));
            let mut next = s.clone();
            for (i, r) in rows.into_iter().enumerate() {
                next.row_mut(i).copy_from(&r.s.transpose());
                state.lipschitz[i] = r.lipschitz;
                accepted += r.accepted;
                state.max_step_increase = state.max_step_increase.max(r.max_increase);
            }
            s = next;
        }
        state.iterations = sweep;
        state.accepted_steps += accepted;
        let prev = *state.objective_trace.last().expect("trace starts non-empty");
        let cur = p.composite(b, &s)?;
        state.objective_trace.push(cur);
        let slack = opts.increase_tol * accepted.max(1) as f64 + 4.0 * f64::EPSILON * prev.abs();
        if cur > prev + slack {
            return Err(Error::Convergence(format!(
                "composite objective rose from {prev:.12e} to {cur:.12e} in sweep {sweep}"
            )));
        }
        if accepted == 0 || (prev - cur).abs() <= opts.tol * prev.abs().max(1.0) {
            state.converged = true;
            break;
        }
    }
    if !state.converged {
        warn!(
            "coefficient fit stopped after {} sweeps without reaching tolerance {:e}",
            state.iterations, opts.tol
        );
    }
    Ok((s, state))
}

/// Fits `S` for the given bases, graph term over periodicity neighbours.
pub fn fit_coefficients(
    tensor: &FlowTensor,
    basis: &BasisSet,
    params: &ObjectiveParams,
    opts: &PgOptions,
) -> Result<(CoefficientMatrix, PgState)> {
    if tensor.m != basis.m() {
        return Err(Error::Dimension(format!(
            "tensor M={} but bases M={}",
            tensor.m,
            basis.m()
        )));
    }
    let lap = (params.gamma > 0.0).then(|| laplacian(&periodicity_weights(&tensor.fragments)));
    let p = Problem::new(tensor, params, lap.as_ref())?;
    let b = basis_matrix(basis);
    let s0 = nnls_init(&p, &b);
    let (s, state) = fit_problem(&p, &b, s0, opts)?;
    Ok((CoefficientMatrix::new(s, tensor.fragments.clone())?, state))
}
