use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use default_risk::covariate::{
    assemble_theta, em_step, fit_em, kalman_filter_smoother, simulate_future, var_residuals, CovariateError,
    CovariateModelFit, CovariateParams, EmOptions, Kappa, SimulationStart, Simulator,
};
use default_risk::data::{difference_order3, FirmPanel, Grid, ObservationWindow, StateLayout, YearMonth};

const KAPPA: [f64; 5] = [0.63766, 0.63551, 0.89208, 0.63546, -0.00714];

fn small_params(m: usize, q: usize, rng: &mut ChaCha8Rng) -> CovariateParams {
    let a = if q == 1 {
        DMatrix::from_element(1, 1, rng.random_range(-0.8..0.8))
    } else {
        DMatrix::from_fn(q, q, |r, c| if r == c { 0.5 } else { 0.2 } * rng.random_range(-1.0..1.0))
    };
    let l = DMatrix::from_fn(q, q, |r, c| if r >= c { rng.random_range(0.2..0.8) } else { 0.0 });
    CovariateParams {
        mu: DVector::zeros(m),
        kappa: Kappa::default(),
        lambda: DMatrix::from_fn(m, q, |_, _| rng.random_range(-1.5..1.5)),
        a,
        p: DVector::from_fn(m, |_, _| rng.random_range(0.1..0.6)),
        q_cov: &l * l.transpose(),
    }
}

/// Covariance of the stacked factors `(f_1, ..., f_T)` when `f_0 = 0`.
fn factor_covariance(params: &CovariateParams, periods: usize) -> Vec<Vec<DMatrix<f64>>> {
    let q = params.q();
    let mut var = Vec::with_capacity(periods);
    let mut prev = DMatrix::<f64>::zeros(q, q);
    for _ in 0..periods {
        prev = &params.a * &prev * params.a.transpose() + &params.q_cov;
        var.push(prev.clone());
    }
    let mut cov = vec![vec![DMatrix::zeros(q, q); periods]; periods];
    for s in 0..periods {
        let mut c = var[s].clone();
        for t in s..periods {
            cov[t][s] = c.clone();
            cov[s][t] = c.transpose();
            c = &params.a * c;
        }
    }
    cov
}

/// Log density of the observed cells and smoothed factor means from the
/// stacked joint Gaussian.
fn joint_oracle(innov: &Grid, params: &CovariateParams) -> (f64, Vec<DVector<f64>>) {
    let periods = innov.cols();
    let fc = factor_covariance(params, periods);
    let cells: Vec<(usize, usize)> = (0..periods)
        .flat_map(|t| (0..innov.rows()).map(move |j| (j, t)))
        .filter(|&(j, t)| innov.is_observed(j, t))
        .collect();
    let k = cells.len();
    let lam = |j: usize| params.lambda.row(j).clone_owned();
    let sigma = DMatrix::from_fn(k, k, |a, b| {
        let (ja, ta) = cells[a];
        let (jb, tb) = cells[b];
        let mut v = (lam(ja) * &fc[ta][tb] * lam(jb).transpose())[(0, 0)];
        if a == b {
            v += params.p[ja];
        }
        v
    });
    let y = DVector::from_iterator(k, cells.iter().map(|&(j, t)| innov.raw(j, t)));
    let chol = sigma.clone().cholesky().expect("oracle covariance is SPD");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(&y);
    let ll = -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + y.dot(&alpha));
    let means = (0..periods)
        .map(|t| {
            let cross = DMatrix::from_fn(params.q(), k, |r, b| {
                let (jb, tb) = cells[b];
                (&fc[t][tb] * lam(jb).transpose())[(r, 0)]
            });
            cross * &alpha
        })
        .collect();
    (ll, means)
}

#[test]
fn kalman_matches_joint_gaussian_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..12 {
        let q = 1 + case % 2;
        let m = 3;
        let periods = 5;
        let params = small_params(m, q, &mut rng);
        let mut innov = Grid::missing(m, periods);
        for j in 0..m {
            for t in 0..periods {
                if rng.random::<f64>() > 0.25 {
                    innov.set(j, t, rng.random_range(-2.0..2.0));
                }
            }
        }
        // one fully missing period exercises the prediction-only branch
        for j in 0..m {
            innov.clear(j, 2);
        }
        let (path, ll) = kalman_filter_smoother(&innov, &params).unwrap();
        let (want, means) = joint_oracle(&innov, &params);
        assert!((ll - want).abs() < 1e-8, "case {case}: {ll} vs {want}");
        for t in 0..periods {
            for r in 0..q {
                assert!((path.smoothed_means[t][r] - means[t][r]).abs() < 1e-8, "case {case}, t {t}");
            }
        }
    }
}

fn full_template(n: usize, months: usize, rng: &mut ChaCha8Rng) -> FirmPanel {
    let mut d = Grid::missing(n, months);
    let mut v = Grid::missing(n, months);
    for i in 0..n {
        let (d0, v0) = (rng.random_range(1.0..5.0), rng.random_range(-0.5..0.5));
        for t in 0..months {
            d.set(i, t, d0);
            v.set(i, t, v0);
        }
    }
    FirmPanel::new(
        (0..n).map(|i| format!("F{i}")).collect(),
        YearMonth::new(2000, 1).unwrap().range(months),
        d,
        v,
        vec![4.0; months],
        vec![0.05; months],
        vec![ObservationWindow { first: 0, last: months - 1 }; n],
    )
    .unwrap()
}

fn truth(n: usize, loading: f64, rng: &mut ChaCha8Rng) -> CovariateParams {
    let layout = StateLayout::new(n);
    let m = layout.m();
    CovariateParams {
        mu: DVector::from_fn(m, |j, _| if j % 2 == 0 { 0.01 } else { -0.02 }),
        kappa: Kappa::from_array(KAPPA),
        lambda: DMatrix::from_fn(m, 2, |_, c| loading * rng.random_range(0.5..1.5) * if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) }),
        a: DMatrix::from_row_slice(2, 2, &[0.3734, 0.2144, -0.0599, 0.4803]),
        p: DVector::from_fn(m, |_, _| rng.random_range(0.05..0.15_f64).powi(2)),
        q_cov: DMatrix::identity(2, 2) * 0.8,
    }
}

fn max_principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let smallest = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smallest.acos().to_degrees()
}

#[test]
fn em_trace_is_monotone_on_random_fits() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for fit_no in 0..20 {
        let n = rng.random_range(2..6);
        let params = truth(n, 0.1, &mut rng);
        let template = full_template(n, 60, &mut rng);
        let diffs = difference_order3(&template).unwrap();
        let (_, sim) = Simulator::new(&params).unwrap().historical(&template, &diffs, &mut rng).unwrap();
        let opts = EmOptions {
            max_iter: 200,
            accept_unconverged: true,
            ..EmOptions::default()
        };
        let fit = fit_em(&sim, &opts).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "fit {fit_no}: {} -> {}", w[0], w[1]);
        }
        // raw EM steps from an arbitrary start, without the refinement pass
        let innov = var_residuals(&sim, &fit.params.mu, &fit.params.kappa).unwrap();
        let mut p = CovariateParams {
            lambda: fit.params.lambda.map(|v| v * 0.5 + 0.01),
            ..fit.params.clone()
        };
        let mut last = f64::NEG_INFINITY;
        for _ in 0..10 {
            let (next, ll) = em_step(&innov, &p).unwrap();
            assert!(ll >= last - 1e-8, "fit {fit_no}: step {last} -> {ll}");
            last = ll;
            p = next;
        }
    }
}

fn simulate_full(params: &CovariateParams, n: usize, months: usize, rng: &mut ChaCha8Rng) -> default_risk::data::DifferencedPanel {
    let template = full_template(n, months, rng);
    let diffs = difference_order3(&template).unwrap();
    Simulator::new(params).unwrap().historical(&template, &diffs, rng).unwrap().1
}

#[test]
fn recovers_mean_reversion_with_serially_independent_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 20;
    let mut params = truth(n, 0.25, &mut rng);
    params.a.fill(0.0);
    let sim = simulate_full(&params, n, 203, &mut rng);
    let fit = fit_em(&sim, &EmOptions::default()).unwrap();
    let k = fit.params.kappa;
    assert!((k.d / KAPPA[0] - 1.0).abs() < 0.10, "kappa_D {}", k.d);
    assert!((k.v / KAPPA[1] - 1.0).abs() < 0.10, "kappa_V {}", k.v);
    assert!((k.r - KAPPA[2]).abs() < 0.2, "kappa_r {}", k.r);
    assert!((k.s - KAPPA[3]).abs() < 0.2, "kappa_S {}", k.s);
}

#[test]
fn recovers_loading_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let n = 20;
    let params = truth(n, 0.25, &mut rng);
    let sim = simulate_full(&params, n, 203, &mut rng);
    let fit = fit_em(&sim, &EmOptions::default()).unwrap();
    assert!(fit.converged);
    let angle = max_principal_angle_deg(&params.lambda, &fit.params.lambda);
    assert!(angle <= 15.0, "loading subspace angle {angle}");
    let ltl = fit.params.lambda.transpose() * &fit.params.lambda;
    assert!(ltl[(0, 1)].abs() < 1e-8 * ltl[(0, 0)]);
    assert!(ltl[(0, 0)] >= ltl[(1, 1)]);
}

#[test]
fn em_step_from_truth_does_not_lose_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 6;
    let params = truth(n, 0.2, &mut rng);
    let template = full_template(n, 120, &mut rng);
    let diffs = difference_order3(&template).unwrap();
    let (_, sim) = Simulator::new(&params).unwrap().historical(&template, &diffs, &mut rng).unwrap();
    let innov = var_residuals(&sim, &params.mu, &params.kappa).unwrap();
    let (next, ll_truth) = em_step(&innov, &params).unwrap();
    let (_, ll_next) = kalman_filter_smoother(&innov, &next).unwrap();
    assert!(ll_next >= ll_truth - 1e-8);
}

#[test]
fn q_equal_to_m_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let template = full_template(2, 30, &mut rng);
    let diffs = difference_order3(&template).unwrap();
    let opts = EmOptions {
        q: 6,
        ..EmOptions::default()
    };
    assert!(matches!(
        fit_em(&diffs, &opts),
        Err(CovariateError::DegenerateFactorModel { q: 6, m: 6 })
    ));
}

#[test]
fn noiseless_future_follows_theta_powers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3;
    let mut params = truth(n, 0.2, &mut rng);
    params.p.fill(0.0);
    params.q_cov.fill(0.0);
    let m = params.m();
    let start = SimulationStart {
        x_last: (0..m).map(|j| (j as f64 * 0.7).cos()).collect(),
        f_last: DVector::zeros(2),
    };
    let out = simulate_future(&params, &start, 6, &mut rng).unwrap();
    let theta = assemble_theta(&params.kappa, n);
    let mut dev = DVector::from_iterator(m, (0..m).map(|j| start.x_last[j] - params.mu[j]));
    for step in &out {
        dev = &theta * dev;
        for j in 0..m {
            assert!((step[j] - params.mu[j] - dev[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn future_is_deterministic_and_has_model_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 2;
    let params = truth(n, 0.3, &mut rng);
    let m = params.m();
    let start = SimulationStart {
        x_last: vec![0.1; m],
        f_last: DVector::from_vec(vec![0.5, -0.2]),
    };
    let a = simulate_future(&params, &start, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = simulate_future(&params, &start, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);

    let theta = assemble_theta(&params.kappa, n);
    let dev = DVector::from_iterator(m, (0..m).map(|j| start.x_last[j] - params.mu[j]));
    let mean = &params.mu + &theta * dev + &params.lambda * &params.a * &start.f_last;
    let cov = &params.lambda * &params.q_cov * params.lambda.transpose() + DMatrix::from_diagonal(&params.p);
    let draws = 20_000;
    let mut sum = DVector::<f64>::zeros(m);
    let mut sumsq = DVector::<f64>::zeros(m);
    let mut sim_rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..draws {
        let x = &simulate_future(&params, &start, 1, &mut sim_rng).unwrap()[0];
        for j in 0..m {
            sum[j] += x[j];
            sumsq[j] += (x[j] - mean[j]).powi(2);
        }
    }
    for j in 0..m {
        let sd = cov[(j, j)].sqrt();
        let avg = sum[j] / draws as f64;
        assert!((avg - mean[j]).abs() < 4.0 * sd / (draws as f64).sqrt(), "row {j} mean");
        let var = sumsq[j] / draws as f64;
        assert!((var / cov[(j, j)] - 1.0).abs() < 0.05, "row {j} variance {var} vs {}", cov[(j, j)]);
    }
}

#[test]
fn historical_simulation_keeps_observation_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 4;
    let months = 40;
    let mut d = Grid::missing(n, months);
    let mut v = Grid::missing(n, months);
    let windows: Vec<ObservationWindow> = (0..n)
        .map(|i| ObservationWindow {
            first: 3 * i,
            last: months - 1 - 2 * i,
        })
        .collect();
    for (i, w) in windows.iter().enumerate() {
        for t in w.first..=w.last {
            if t != w.first + 7 {
                d.set(i, t, 2.0);
            }
            v.set(i, t, 0.1);
        }
    }
    let template = FirmPanel::new(
        (0..n).map(|i| format!("F{i}")).collect(),
        YearMonth::new(2001, 6).unwrap().range(months),
        d,
        v,
        vec![3.0; months],
        vec![0.0; months],
        windows,
    )
    .unwrap();
    let params = truth(n, 0.2, &mut rng);
    let diffs = difference_order3(&template).unwrap();
    let (panel, sim_diffs) = Simulator::new(&params).unwrap().historical(&template, &diffs, &mut rng).unwrap();
    assert_eq!(panel.windows(), template.windows());
    let (a, b) = (template.stacked_levels(), panel.stacked_levels());
    for j in 0..a.rows() {
        for t in 0..months {
            assert_eq!(a.is_observed(j, t), b.is_observed(j, t), "cell ({j}, {t})");
        }
    }
    let (x, y) = (diffs.values(), sim_diffs.values());
    for j in 0..x.rows() {
        for t in 0..x.cols() {
            assert_eq!(x.is_observed(j, t), y.is_observed(j, t));
        }
    }
}

#[test]
fn residuals_match_dense_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 3;
    let params = truth(n, 0.2, &mut rng);
    let template = full_template(n, 30, &mut rng);
    let diffs = difference_order3(&template).unwrap();
    let (_, sim) = Simulator::new(&params).unwrap().historical(&template, &diffs, &mut rng).unwrap();
    let res = var_residuals(&sim, &params.mu, &params.kappa).unwrap();
    let theta = assemble_theta(&params.kappa, n);
    let x = sim.values();
    let m = params.m();
    for t in 1..x.cols() {
        let prev = DVector::from_iterator(m, (0..m).map(|j| x.raw(j, t - 1) - params.mu[j]));
        let pulled = &theta * prev;
        for j in 0..m {
            let want = x.raw(j, t) - params.mu[j] - pulled[j];
            assert!((res.raw(j, t - 1) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn fit_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 3;
    let params = truth(n, 0.2, &mut rng);
    let template = full_template(n, 50, &mut rng);
    let diffs = difference_order3(&template).unwrap();
    let (_, sim) = Simulator::new(&params).unwrap().historical(&template, &diffs, &mut rng).unwrap();
    let fit = fit_em(
        &sim,
        &EmOptions {
            accept_unconverged: true,
            ..EmOptions::default()
        },
    )
    .unwrap();
    let (back, trace, converged) = CovariateModelFit::params_from_json(&fit.to_json()).unwrap();
    assert_eq!(back, fit.params);
    assert_eq!(trace, fit.loglik_trace);
    assert_eq!(converged, fit.converged);
}
