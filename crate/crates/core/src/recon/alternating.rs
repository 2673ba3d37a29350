//! Joint learning of bases and coefficients by alternating minimisation.

use log::warn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::objective::{unflatten_bases, Problem};
use super::pg::{fit_problem, nnls_init, PgOptions, PgState};
use super::{CoefficientMatrix, ObjectiveParams, EPS_POS};
use crate::error::{Error, Result};
use crate::flow::{laplacian, periodicity_weights, FlowTensor};
use crate::pattern::BasisSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AltOptions {
    pub pg: PgOptions,
    pub max_alternations: usize,
    pub tol: f64,
    /// Projected-gradient steps on the bases per alternation.
    pub basis_iters: usize,
}

impl Default for AltOptions {
    fn default() -> Self {
        AltOptions {
            pg: PgOptions::default(),
            max_alternations: 100,
            tol: 1e-5,
            basis_iters: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AltResult {
    pub basis: BasisSet,
    pub coeffs: CoefficientMatrix,
    /// State of the last coefficient fit.
    pub state: PgState,
    /// Composite objective after every alternation.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

/// Projected gradient on the bases with `S` fixed. Returns the new bases and the step constant.
pub(crate) fn update_bases(
    p: &Problem,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    iters: usize,
    mut lip: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let value = |bm: &DMatrix<f64>| -> Result<f64> { Ok(p.data_term(bm, s)? + p.basis_prior(bm)) };
    let mut b = b.clone();
    let mut f0 = value(&b)?;
    for _ in 0..iters {
        let g = p.grad_b(&b, s)?;
        let mut step = None;
        for _ in 0..60 {
            let cand = (&b - &g / lip).map(|v| v.max(EPS_POS));
            let d = &cand - &b;
            let f1 = value(&cand)?;
            if f1 <= f0 + g.dot(&d) + 0.5 * lip * d.norm_squared() {
                step = Some((cand, f1, d));
                break;
            }
            lip *= 2.0;
        }
        let Some((cand, f1, d)) = step else { break };
        if f1 > f0 {
            break;
        }
        let small = d.amax() <= 1e-12 * (1.0 + cand.amax());
        b = cand;
        f0 = f1;
        if small {
            break;
        }
        lip = (lip * 0.5).max(1e-12);
    }
    Ok((b, lip))
}

/// Learns `c` bases and their coefficients from random Gamma-distributed bases.
pub fn fit_alternating(
    tensor: &FlowTensor,
    params: &ObjectiveParams,
    c: usize,
    opts: &AltOptions,
    seed: u64,
) -> Result<AltResult> {
    if c == 0 || opts.max_alternations == 0 {
        return Err(Error::Config("need at least one basis and one alternation".into()));
    }
    if tensor.is_empty() {
        return Err(Error::Data("empty tensor".into()));
    }
    let lap = (params.gamma > 0.0).then(|| laplacian(&periodicity_weights(&tensor.fragments)));
    let p = Problem::new(tensor, params, lap.as_ref())?;
    let d = p.d();

    let gamma = Gamma::new(params.eta, 1.0 / params.theta)
        .map_err(|e| Error::Config(format!("Gamma prior: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = DMatrix::from_fn(d, c, |_, _| 0.0);
    for v in b.iter_mut() {
        *v = gamma.sample(&mut rng).max(EPS_POS);
    }

    let mut s = nnls_init(&p, &b);
    let mut trace = vec![p.composite(&b, &s)?];
    let mut lip_b = 1.0;
    let mut state = None;
    let mut converged = false;
    for round in 1..=opts.max_alternations {
        let (s_new, st) = fit_problem(&p, &b, s, &opts.pg)?;
        s = s_new;
        state = Some(st);
        let (b_new, l) = update_bases(&p, &b, &s, opts.basis_iters, lip_b)?;
        b = b_new;
        lip_b = l;
        let cur = p.composite(&b, &s)?;
        let prev = *trace.last().expect("non-empty");
        trace.push(cur);
        if (prev - cur).abs() <= opts.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
        if round == opts.max_alternations {
            warn!("alternating fit stopped after {round} rounds");
        }
    }

    // order bases by mass like the clustering path does
    let mass: Vec<f64> = b.column_iter().map(|col| col.sum()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| mass[y].total_cmp(&mass[x]).then(x.cmp(&y)));
    let b_sorted = DMatrix::from_fn(d, c, |k, j| b[(k, order[j])]);
    let s_sorted = DMatrix::from_fn(s.nrows(), c, |i, j| s[(i, order[j])]);
    let labels = (0..s_sorted.nrows())
        .map(|i| {
            let row = s_sorted.row(i);
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let basis = BasisSet {
        bases: unflatten_bases(&b_sorted, tensor.m),
        labels,
        mass: order.iter().map(|&j| mass[j]).collect(),
    };
    Ok(AltResult {
        basis,
        coeffs: CoefficientMatrix::new(s_sorted, tensor.fragments.clone())?,
        state: state.expect("at least one alternation"),
        objective_trace: trace,
        converged,
    })
}
