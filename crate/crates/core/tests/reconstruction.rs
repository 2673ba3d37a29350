mod common;

use common::*;
use flowcast::flow::laplacian;
use flowcast::recon::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

fn naive_nll(mats: &[DMatrix<f64>], bases: &[DMatrix<f64>], s: &DMatrix<f64>, p: &ObjectiveParams) -> f64 {
    let m = mats[0].nrows();
    let mut total = 0.0;
    for (i, f) in mats.iter().enumerate() {
        for j in 0..m {
            for l in 0..m {
                if f[(j, l)] <= 0.0 && !p.indicator_all {
                    continue;
                }
                let mut mu = 0.0;
                for (c, b) in bases.iter().enumerate() {
                    mu += s[(i, c)] * b[(j, l)].max(EPS_POS);
                }
                let mu = mu.max(EPS_POS);
                total -= f[(j, l)] * mu.ln() - mu;
            }
        }
    }
    for v in s.iter() {
        total += v * v / (2.0 * p.sigma * p.sigma);
    }
    for b in bases {
        for v in b.iter() {
            let v = v.max(EPS_POS);
            total -= (p.eta - 1.0) * v.ln() - p.theta * v;
        }
    }
    total
}

#[test]
fn nll_matches_triple_loop() {
    let mut r = rng(40);
    for trial in 0..20 {
        let (n, m, c) = (r.random_range(1..7), r.random_range(1..6), r.random_range(1..4));
        let mats: Vec<_> = (0..n)
            .map(|_| DMatrix::from_fn(m, m, |_, _| if r.random_bool(0.3) { 0.0 } else { r.random_range(0..9) as f64 }))
            .collect();
        let mut bases: Vec<_> = (0..c).map(|_| random_matrix(&mut r, m, m, 0.0, 2.0)).collect();
        bases[0][(0, 0)] = 0.0;
        let s = random_matrix(&mut r, n, c, -0.5, 2.0);
        let params = ObjectiveParams {
            sigma: r.random_range(0.5..3.0),
            eta: r.random_range(1.0..4.0),
            theta: r.random_range(0.1..2.0),
            indicator_all: trial % 4 == 0,
            ..ObjectiveParams::default()
        };
        let t = tensor(utc(2024, 3, 4, 0), mats.clone());
        let got = negative_log_likelihood(&t, &basis_set(bases.clone()), &s, &params).unwrap();
        let want = naive_nll(&mats, &bases, &s, &params);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn zero_data_leaves_only_the_basis_prior() {
    let b = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 2.0, 3.0]);
    let params = ObjectiveParams::default();
    let t = tensor(utc(2024, 3, 4, 0), vec![DMatrix::zeros(2, 2); 3]);
    let got = negative_log_likelihood(&t, &basis_set(vec![b.clone()]), &DMatrix::zeros(3, 1), &params).unwrap();
    let want: f64 = b.iter().map(|v| -((params.eta - 1.0) * v.ln() - params.theta * v)).sum();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn single_cell_hand_value() {
    let params = ObjectiveParams {
        sigma: 1e12,
        eta: 1.0,
        theta: 1.0,
        ..ObjectiveParams::default()
    };
    let t = tensor(utc(2024, 3, 4, 0), vec![DMatrix::from_element(1, 1, 1.0)]);
    let b = basis_set(vec![DMatrix::from_element(1, 1, 1.0)]);
    let got = negative_log_likelihood(&t, &b, &DMatrix::from_element(1, 1, 1.0), &params).unwrap();
    assert!((got - 2.0).abs() < 1e-12);
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-6;
    for seed in 0..12 {
        let loss = if seed % 3 == 2 { LossMode::Frobenius } else { LossMode::Poisson };
        let (p, b, s) = fd_instance(seed, loss);
        let gs = p.grad_s(&b, &s).unwrap();
        for k in 0..s.len() {
            let (mut up, mut dn) = (s.clone(), s.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (p.smooth(&b, &up).unwrap() - p.smooth(&b, &dn).unwrap()) / (2.0 * h);
            assert!(rel_err(gs[k], fd, 1e-3) <= 1e-4, "seed {seed} dS[{k}]: {} vs {fd}", gs[k]);
        }
        let gb = p.grad_b(&b, &s).unwrap();
        for k in 0..b.len() {
            let (mut up, mut dn) = (b.clone(), b.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (p.smooth(&up, &s).unwrap() - p.smooth(&dn, &s).unwrap()) / (2.0 * h);
            assert!(rel_err(gb[k], fd, 1e-3) <= 1e-4, "seed {seed} dB[{k}]: {} vs {fd}", gb[k]);
        }
    }
}

#[test]
fn graph_contribution_is_twice_gamma_ls() {
    let mut r = rng(41);
    let mats: Vec<_> = (0..6).map(|_| random_matrix(&mut r, 3, 3, 0.0, 5.0).map(f64::round)).collect();
    let t = tensor(utc(2024, 3, 4, 0), mats);
    let b = basis_set(vec![random_matrix(&mut r, 3, 3, 0.1, 1.0), random_matrix(&mut r, 3, 3, 0.1, 1.0)]);
    let s = random_matrix(&mut r, 6, 2, 0.2, 1.0);
    let w = DMatrix::from_fn(6, 6, |i, j| if i != j && (i + j) % 2 == 0 { 1.0 } else { 0.0 });
    let lap = laplacian(&w);
    let params = ObjectiveParams {
        gamma: 0.3,
        ..ObjectiveParams::default()
    };
    let with = coefficient_gradient(&t, &b, &s, &params, Some(&lap)).unwrap();
    let without = coefficient_gradient(&t, &b, &s, &params, None).unwrap();
    assert!((with - without - &lap * &s * 0.6).amax() < 1e-12);
    let zero = coefficient_gradient(&t, &b, &s, &params, Some(&DMatrix::zeros(6, 6))).unwrap();
    assert_eq!(zero, coefficient_gradient(&t, &b, &s, &params, None).unwrap());
}

#[test]
fn gradient_vanishes_at_scalar_minimizer() {
    let params = ObjectiveParams {
        gamma: 0.0,
        sigma: 2.0,
        ..ObjectiveParams::default()
    };
    let (f, bv) = (5.0, 0.7);
    let t = tensor(utc(2024, 3, 4, 0), vec![DMatrix::from_element(1, 1, f)]);
    let basis = basis_set(vec![DMatrix::from_element(1, 1, bv)]);
    let obj = |s: f64| negative_log_likelihood(&t, &basis, &DMatrix::from_element(1, 1, s), &params).unwrap();
    // golden-section search
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (1e-3, 100.0);
    while hi - lo > 1e-13 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if obj(a) < obj(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let s_star = 0.5 * (lo + hi);
    let grad = coefficient_gradient(&t, &basis, &DMatrix::from_element(1, 1, s_star), &params, None).unwrap();
    assert!(grad[(0, 0)].abs() < 1e-6, "gradient {}", grad[(0, 0)]);
}

#[test]
fn prox_matches_grid_search() {
    let mut r = rng(42);
    for _ in 0..1000 {
        let z = r.random_range(-8.0..8.0);
        let l = r.random_range(0.5..5.0);
        let lam = r.random_range(0.0..5.0);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=200_000 {
            let s = -10.0 + k as f64 * 1e-4;
            let v = 0.5 * l * (s - z) * (s - z) + lam * s.abs();
            if v < best.0 {
                best = (v, s);
            }
        }
        let got = prox_l1(&[z], lam / l)[0];
        assert!((got - best.1).abs() <= 1e-3, "z={z} L={l} lambda={lam}: {got} vs {}", best.1);
    }
    let t = 0.3;
    assert_eq!(prox_l1(&[0.0, 2.0 * t], t), vec![0.0, t]);
}

#[test]
fn graph_penalty_equals_pairwise_sum() {
    let mut r = rng(43);
    for _ in 0..100 {
        let n = r.random_range(1..15);
        let c = r.random_range(1..5);
        let s = random_matrix(&mut r, n, c, -2.0, 2.0);
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let v = if r.random_bool(0.5) { r.random_range(0.0..2.0) } else { 0.0 };
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        let lap = laplacian(&w);
        let mut pair = 0.0;
        for i in 0..n {
            for j in 0..n {
                pair += 0.5 * (s.row(i) - s.row(j)).norm_squared() * w[(i, j)];
            }
        }
        let tr = graph_penalty(&s, &lap).unwrap();
        assert!((tr - pair).abs() <= 1e-9 * pair.abs().max(1.0));
        assert!(SymmetricEigen::new(lap).eigenvalues.min() >= -1e-9);
    }
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, -2.0]);
    let lap = laplacian(&DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]));
    assert!((graph_penalty(&s, &lap).unwrap() - 25.0).abs() < 1e-12);
    let eq = DMatrix::from_row_slice(3, 1, &[2.0, 2.0, 2.0]);
    assert_eq!(graph_penalty(&eq, &laplacian(&DMatrix::from_element(3, 3, 1.0))).unwrap(), 0.0);
    assert!(graph_penalty(&eq, &DMatrix::zeros(2, 2)).is_err());
}

fn strict() -> PgOptions {
    PgOptions {
        max_sweeps: 20_000,
        tol: 1e-15,
        ..PgOptions::default()
    }
}

#[test]
fn noiseless_planted_coefficients_recovered() {
    for seed in 0..5 {
        let (basis, s_true, means) = planted(100 + seed, 12, 4, 3, 10.0);
        let t = tensor(utc(2024, 3, 4, 0), means);
        let (coef, state) = fit_coefficients(&t, &basis, &flat(), &strict()).unwrap();
        let err = (&coef.s - &s_true).amax();
        assert!(err <= 1e-3, "seed {seed}: max error {err} after {} sweeps", state.iterations);
    }
}

#[test]
fn recovery_from_perturbed_start() {
    let (basis, s_true, means) = planted(7, 10, 4, 2, 5.0);
    let t = tensor(utc(2024, 3, 4, 0), means);
    let p = Problem::new(&t, &flat(), None).unwrap();
    let b = basis_matrix(&basis);
    let mut r = rng(8);
    let s0 = s_true.map(|v| v * r.random_range(0.3..2.0));
    let (s, _) = fit_problem(&p, &b, s0, &strict()).unwrap();
    assert!((&s - &s_true).amax() <= 1e-3);
}

#[test]
fn poisson_planted_mean_error_within_bound() {
    let trials = 50;
    let mut total = 0.0;
    for trial in 0..trials {
        let (basis, s_true, means) = planted(1000 + trial, 10, 5, 3, 20.0);
        let mut r = rng(5000 + trial);
        let mats: Vec<_> = means
            .iter()
            .map(|mu| mu.map(|v| Poisson::new(v).unwrap().sample(&mut r)))
            .collect();
        let t = tensor(utc(2024, 3, 4, 0), mats);
        let (coef, _) = fit_coefficients(&t, &basis, &flat(), &PgOptions::default()).unwrap();
        total += (&coef.s - &s_true).norm() / s_true.norm();
    }
    let mean = total / trials as f64;
    assert!(mean <= 0.15, "mean relative error {mean}");
}

#[test]
fn huge_lambda_zeroes_coefficients() {
    let (basis, _, means) = planted(9, 6, 3, 2, 4.0);
    let t = tensor(utc(2024, 3, 4, 0), means);
    let mut params = ObjectiveParams {
        gamma: 0.0,
        loss: LossMode::Frobenius,
        ..ObjectiveParams::default()
    };
    let zero = DMatrix::zeros(t.len(), 2);
    let g0 = coefficient_gradient(&t, &basis, &zero, &params, None).unwrap();
    params.lambda = 10.0 * g0.amax();
    let (coef, _) = fit_coefficients(&t, &basis, &params, &PgOptions::default()).unwrap();
    assert_eq!(coef.s, zero);
}

#[test]
fn full_fits_never_increase_the_objective() {
    for seed in 0..10 {
        let mut r = rng(300 + seed);
        let (basis, _, means) = planted(200 + seed, 24, 4, 3, 3.0);
        let mats: Vec<_> = means
            .iter()
            .map(|mu| mu.map(|v| Poisson::new(v).unwrap().sample(&mut r)))
            .collect();
        let t = tensor(utc(2024, 3, 4, 0), mats);
        let params = ObjectiveParams {
            gamma: if seed % 2 == 0 { 0.05 } else { 0.0 },
            ..ObjectiveParams::default()
        };
        let (_, state) = fit_coefficients(&t, &basis, &params, &PgOptions::default()).unwrap();
        assert!(state.max_step_increase <= 1e-10, "seed {seed}: {}", state.max_step_increase);
        for w in state.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn alternating_rank_one() {
    let mut r = rng(50);
    let b = random_matrix(&mut r, 4, 4, 0.2, 1.0);
    let mats: Vec<_> = (0..10).map(|_| &b * r.random_range(2.0..20.0)).collect();
    let t = tensor(utc(2024, 3, 4, 0), mats.clone());
    let opts = AltOptions {
        tol: 1e-10,
        max_alternations: 400,
        ..AltOptions::default()
    };
    // theta = 1 keeps the Gamma initialisation at the data's scale; with a flat
    // prior on S the rescaling (S a, B / a) makes the B prior free
    let params = ObjectiveParams { theta: 1.0, ..flat() };
    let res = fit_alternating(&t, &params, 1, &opts, 3).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, f) in mats.iter().enumerate() {
        num += (f - &res.basis.bases[0] * res.coeffs.s[(i, 0)]).norm_squared();
        den += f.norm_squared();
    }
    let err = (num / den).sqrt();
    assert!(err <= 1e-2, "relative reconstruction error {err}");
}

#[test]
fn zero_tensor_drives_bases_to_prior_mode() {
    let t = tensor(utc(2024, 3, 4, 0), vec![DMatrix::zeros(3, 3); 4]);
    let params = ObjectiveParams {
        eta: 3.0,
        theta: 2.0,
        gamma: 0.0,
        ..ObjectiveParams::default()
    };
    let opts = AltOptions {
        basis_iters: 500,
        ..AltOptions::default()
    };
    let res = fit_alternating(&t, &params, 2, &opts, 1).unwrap();
    for b in &res.basis.bases {
        assert!(b.iter().all(|&v| (v - 1.0).abs() < 1e-3), "{b}");
    }
}

#[test]
fn alternating_planted_three_bases() {
    let (basis, s_true, means) = planted(60, 30, 4, 3, 30.0);
    let mut r = rng(61);
    let mats: Vec<_> = means
        .iter()
        .map(|mu| mu.map(|v| Poisson::new(v).unwrap().sample(&mut r)))
        .collect();
    let t = tensor(utc(2024, 3, 4, 0), mats.clone());
    let params = ObjectiveParams {
        lambda: 0.0,
        gamma: 0.0,
        ..ObjectiveParams::default()
    };
    let res = fit_alternating(&t, &params, 3, &AltOptions::default(), 5).unwrap();
    let p = Problem::new(&t, &params, None).unwrap();
    let at_truth = p.composite(&basis_matrix(&basis), &s_true).unwrap();
    let fitted = *res.objective_trace.last().unwrap();

    let frob = |get: &dyn Fn(usize) -> DMatrix<f64>| {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, f) in mats.iter().enumerate() {
            num += (f - get(i)).norm_squared();
            den += f.norm_squared();
        }
        (num / den).sqrt()
    };
    let floor = frob(&|i| means[i].clone());
    let err = frob(&|i| res.basis.combine(res.coeffs.s.row(i).transpose().as_slice()));
    assert!(
        fitted <= at_truth + 1e-3 || err <= floor,
        "objective {fitted} vs planted {at_truth}; error {err} vs floor {floor}"
    );
    for w in res.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn prox_is_non_expansive(
        a in prop::collection::vec(-10.0f64..10.0, 1..8),
        shift in prop::collection::vec(-3.0f64..3.0, 8),
        t in 0.0f64..4.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, d)| x + d).collect();
        let pa = DVector::from_vec(prox_l1(&a, t));
        let pb = DVector::from_vec(prox_l1(&b, t));
        let d = DVector::from_vec(a.clone()) - DVector::from_vec(b);
        prop_assert!((pa - pb).norm() <= d.norm() + 1e-12);
    }

    #[test]
    fn trace_form_matches_pairs(n in 1usize..10, seed in 0u64..1000) {
        let mut r = rng(seed);
        let s = random_matrix(&mut r, n, 2, -1.0, 1.0);
        let w = DMatrix::from_fn(n, n, |i, j| if i != j && (i * 7 + j * 7 + seed as usize) % 3 == 0 { 1.0f64 } else { 0.0 });
        let w = DMatrix::from_fn(n, n, |i, j| w[(i, j)].max(w[(j, i)]));
        let mut pair = 0.0;
        for i in 0..n {
            for j in 0..n {
                pair += 0.5 * (s.row(i) - s.row(j)).norm_squared() * w[(i, j)];
            }
        }
        prop_assert!((graph_penalty(&s, &laplacian(&w)).unwrap() - pair).abs() <= 1e-9);
    }
}
