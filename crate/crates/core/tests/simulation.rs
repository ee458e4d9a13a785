use std::sync::Arc;

use exactsde_core::catalog;
use exactsde_core::diffeo::sqrt_chart;
use exactsde_core::representation::{build_representation, CanonicalParams, Representation};
use exactsde_core::simulate::{couple_and_compare, moment_stats, simulate_exact, Scheme};
use exactsde_core::{BoxDomain, Grid, SdeModel};
use nalgebra::{DMatrix, DVector};

fn entry_rep(id: &str, grid: &Grid) -> (catalog::CatalogEntry, Representation) {
    let entry = catalog::get(id).unwrap();
    let rep = build_representation(
        entry.params.as_ref().unwrap(),
        entry.chart_dyn().unwrap(),
        &entry.start,
        entry.start_time,
        grid,
    )
    .unwrap();
    (entry, rep)
}

/// Raw moments `E G^k`, `k = 0..=8`, of `G ~ N(m, v)`.
fn gaussian_raw_moments(m: f64, v: f64) -> [f64; 9] {
    let mut out = [0.0; 9];
    out[0] = 1.0;
    out[1] = m;
    // E G^k = m E G^{k-1} + (k-1) v E G^{k-2}
    for k in 2..=8 {
        out[k] = m * out[k - 1] + (k - 1) as f64 * v * out[k - 2];
    }
    out
}

#[test]
fn gaussian_moment_recursion_matches_expansion() {
    let (m, v) = (1.3, 0.4);
    let g = gaussian_raw_moments(m, v);
    assert!((g[4] - (m.powi(4) + 6.0 * m * m * v + 3.0 * v * v)).abs() < 1e-12);
    let e8 = m.powi(8) + 28.0 * m.powi(6) * v + 210.0 * m.powi(4) * v * v + 420.0 * m * m * v.powi(3) + 105.0 * v.powi(4);
    assert!((g[8] - e8).abs() < 1e-10);
}

#[test]
fn cir_exact_sampler_matches_gaussian_square_law() {
    let grid = Grid::uniform(0.0, 1.0, 10).unwrap();
    let (_, rep) = entry_rep("cir_const", &grid);
    let n = 100_000;
    let bundle = simulate_exact(&rep, &grid, n, 20240607).unwrap();
    let stats = moment_stats(&bundle, 1.0).unwrap();

    // X = G²/4 with G = 2e^{β̄}√x + (θ̄s/β̄)(e^{β̄} − 1) + noise of variance s²(e^{2β̄} − 1)/(2β̄)
    let (x, beta, theta, s) = (1.0f64, -0.5f64, 0.0, 0.4f64);
    let e = beta.exp();
    let m = 2.0 * e * x.sqrt() + theta * s / beta * (e - 1.0);
    let v = s * s * ((2.0 * beta).exp() - 1.0) / (2.0 * beta);
    let g = gaussian_raw_moments(m, v);
    let ex: Vec<f64> = (0..=4).map(|k| g[2 * k] / 4f64.powi(k as i32)).collect();
    let mean = ex[1];
    let var = ex[2] - mean * mean;
    let mu4 = ex[4] - 4.0 * mean * ex[3] + 6.0 * mean * mean * ex[2] - 3.0 * mean.powi(4);
    let ns = stats.survivors as f64;
    let se_mean = (var / ns).sqrt();
    let se_var = ((mu4 - var * var) / ns).sqrt();
    assert!((stats.mean[0] - mean).abs() <= 3.0 * se_mean, "{} vs {mean}", stats.mean[0]);
    assert!((stats.covariance[0][0] - var).abs() <= 3.0 * se_var, "{} vs {var}", stats.covariance[0][0]);
    assert!(stats.survival_fraction > 0.999);
}

/// `∫₀ᵗ e^{Bu} e^{Bᵀu} du` as the solution of `BC + CBᵀ = e^{Bt}e^{Bᵀt} − I`.
fn lyapunov_integral(b: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let d = b.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let op = eye.kronecker(b) + b.kronecker(&eye);
    let e = (b * t).exp();
    let rhs = &e * e.transpose() - &eye;
    let vec = op.lu().solve(&DVector::from_column_slice(rhs.as_slice())).unwrap();
    DMatrix::from_column_slice(d, d, vec.as_slice())
}

#[test]
fn gbm_log_state_matches_gaussian_law() {
    let grid = Grid::uniform(0.0, 1.0, 10).unwrap();
    let (entry, rep) = entry_rep("gbm", &grid);
    let (gamma, beta, theta) = catalog::gbm_default_params();
    let n = 100_000;
    let bundle = simulate_exact(&rep, &grid, n, 99).unwrap();
    let node = grid.len() - 1;
    let logs: Vec<DVector<f64>> = (0..n)
        .filter(|&i| bundle.alive(i, node))
        .map(|i| DVector::from_iterator(2, bundle.state(i, node).iter().map(|v| v.ln())))
        .collect();
    let ns = logs.len() as f64;
    let mean = logs.iter().fold(DVector::zeros(2), |a, v| a + v) / ns;
    let cov = logs.iter().fold(DMatrix::zeros(2, 2), |a, v| a + (v - &mean) * (v - &mean).transpose()) / (ns - 1.0);

    let z0 = gamma.clone().try_inverse().unwrap() * entry.start.map(f64::ln);
    let eb = (&beta * 1.0).exp();
    let mz = &eb * z0 + beta.clone().try_inverse().unwrap() * (&eb - DMatrix::identity(2, 2)) * theta;
    let want_mean = &gamma * mz;
    let want_cov = &gamma * lyapunov_integral(&beta, 1.0) * gamma.transpose();
    for i in 0..2 {
        let se = (want_cov[(i, i)] / ns).sqrt();
        assert!((mean[i] - want_mean[i]).abs() <= 3.0 * se, "mean {i}: {} vs {}", mean[i], want_mean[i]);
        for j in 0..2 {
            let se = ((want_cov[(i, i)] * want_cov[(j, j)] + want_cov[(i, j)].powi(2)) / ns).sqrt();
            assert!((cov[(i, j)] - want_cov[(i, j)]).abs() <= 3.0 * se, "cov {i}{j}");
        }
    }
}

#[test]
fn exact_marginals_do_not_depend_on_output_grid() {
    let coarse = Grid::uniform(0.0, 2.0, 4).unwrap();
    let fine = coarse.refine(10);
    let (_, rep_c) = entry_rep("ou", &coarse);
    let (_, rep_f) = entry_rep("ou", &fine);
    let n = 20_000;
    let a = moment_stats(&simulate_exact(&rep_c, &coarse, n, 1).unwrap(), 2.0).unwrap();
    let b = moment_stats(&simulate_exact(&rep_f, &fine, n, 2).unwrap(), 2.0).unwrap();
    let se = (a.std_err[0].powi(2) + b.std_err[0].powi(2)).sqrt();
    assert!((a.mean[0] - b.mean[0]).abs() <= 3.0 * se);
    let se_var = (a.variance_std_err[0].powi(2) + b.variance_std_err[0].powi(2)).sqrt();
    assert!((a.covariance[0][0] - b.covariance[0][0]).abs() <= 3.0 * se_var);
}

#[test]
fn brownian_increments_are_uncorrelated() {
    let grid = Grid::uniform(0.0, 1.0, 8).unwrap();
    let (_, rep) = entry_rep("bm", &grid);
    let n = 20_000;
    let bundle = simulate_exact(&rep, &grid, n, 5).unwrap();
    let inc = |i: usize, k: usize| (bundle.state(i, k + 1)[0] - bundle.state(i, k)[0]) / (1.0f64 / 8.0).sqrt();
    for k in 0..6 {
        let c: f64 = (0..n).map(|i| inc(i, k) * inc(i, k + 1)).sum::<f64>() / n as f64;
        assert!(c.abs() <= 3.0 / (n as f64).sqrt(), "lag-1 correlation {c} at {k}");
    }
    let stats = moment_stats(&bundle, 1.0).unwrap();
    assert!(stats.mean[0].abs() <= 3.0 / (n as f64).sqrt());
}

#[test]
fn same_seed_gives_identical_bundles() {
    let grid = Grid::uniform(0.0, 1.0, 5).unwrap();
    let (_, rep) = entry_rep("heisenberg", &grid);
    let csv = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let bundle = pool.install(|| simulate_exact(&rep, &grid, 500, 77).unwrap());
        let mut out = Vec::new();
        bundle.write_csv(&mut out).unwrap();
        out
    };
    let one = csv(1);
    assert_eq!(one, csv(4));
    assert!(String::from_utf8(one).unwrap().starts_with("path,t,x1,x2,x3,alive\n"));
}

fn feller_violating_cir(s: f64) -> (SdeModel, Arc<exactsde_core::Diffeomorphism>) {
    let domain = BoxDomain::new(vec![0.0], vec![50.0]).unwrap();
    let model = SdeModel::builder(1, 1, 1)
        .domain(domain.clone())
        .horizon(3.0)
        .sigma(move |x, _| DMatrix::from_element(1, 1, s * x[0].sqrt()))
        .drift(move |x, _| DVector::from_element(1, s * s / 4.0 - x[0]))
        .coefficient_floor(vec![0.0])
        .build()
        .unwrap();
    (model, Arc::new(sqrt_chart(Arc::new(move |_| s), None, domain, 3.0).unwrap()))
}

#[test]
fn exit_fraction_grows_with_horizon() {
    let (_, chart) = feller_violating_cir(1.0);
    let params = CanonicalParams::constant(1, 1, 1, DMatrix::from_element(1, 1, -0.5), DVector::zeros(1));
    let grid = Grid::uniform(0.0, 2.5, 50).unwrap();
    let rep = build_representation(&params, chart, &DVector::from_element(1, 0.3), 0.0, &grid).unwrap();
    let bundle = simulate_exact(&rep, &grid, 4000, 3).unwrap();
    let early = 1.0 - bundle.survivors(10) as f64 / 4000.0;
    let late = 1.0 - bundle.survivors(50) as f64 / 4000.0;
    assert!(early > 0.0);
    assert!(late > early);
}

#[test]
fn brownian_coupling_error_is_zero() {
    let finest = Grid::uniform(0.0, 1.0, 64).unwrap();
    let (entry, rep) = entry_rep("bm", &finest);
    let out = Grid::uniform(0.0, 1.0, 4).unwrap();
    let table = couple_and_compare(&rep, &entry.model, Scheme::Euler, &finest, &out, &[1, 4, 16], 200, 9).unwrap();
    assert!(table.rows.iter().all(|r| r.error < 1e-13), "{table:?}");
}

fn scalar_gbm() -> catalog::CatalogEntry {
    catalog::gbm_with(
        DMatrix::from_element(1, 1, 0.4),
        DMatrix::zeros(1, 1),
        DVector::from_element(1, 0.25),
        BoxDomain::new(vec![1e-3], vec![1e3]).unwrap(),
        DVector::from_element(1, 1.0),
    )
    .unwrap()
}

#[test]
fn strong_orders_on_scalar_gbm() {
    let entry = scalar_gbm();
    catalog::validate_entry(&entry).unwrap();
    let finest = Grid::uniform(0.0, 1.0, 1024).unwrap();
    let rep = build_representation(entry.params.as_ref().unwrap(), entry.chart_dyn().unwrap(), &entry.start, 0.0, &finest).unwrap();
    let out = Grid::uniform(0.0, 1.0, 16).unwrap();
    let factors = [1, 2, 4, 8, 16, 32, 64];
    let euler = couple_and_compare(&rep, &entry.model, Scheme::Euler, &finest, &out, &factors, 2000, 11).unwrap();
    let milstein = couple_and_compare(&rep, &entry.model, Scheme::Milstein, &finest, &out, &factors, 2000, 11).unwrap();
    assert!((0.35..=0.65).contains(&euler.slope), "{euler:?}");
    assert!((0.85..=1.15).contains(&milstein.slope), "{milstein:?}");
}

#[test]
fn milstein_rejects_noncommutative_noise() {
    let entry = catalog::get("heisenberg_asym").unwrap();
    let grid = Grid::uniform(0.0, 1.0, 4).unwrap();
    let err = exactsde_core::simulate::milstein(&entry.model, &entry.start, &grid, &grid, 10, 1).unwrap_err();
    assert!(matches!(err, exactsde_core::Error::NonCommutative { .. }));
}
