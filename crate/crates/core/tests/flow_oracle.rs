use nalgebra::DMatrix;
use whitebench_core::data_model::{compute_f, Dataset, SplitTag};
use whitebench_core::linear_flow::{build_flow, flow_at, solve_optimum, LinearModel, Preconditioning};
use whitebench_core::loss::Loss;
use whitebench_core::random::{gaussian_matrix, rng};
use whitebench_core::whitening::{apply, fit_whitener, FitScope, RankPolicy, WhiteningConfig, WhiteningMode};

/// Right-hand side of dW/dt = −(W X − Y) Xᵀ P, with P the preconditioner.
fn rhs(w: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    -((w * x - y) * x.transpose()) * p
}

fn rk4(
    w0: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    p: &DMatrix<f64>,
    times: &[f64],
    h_max: f64,
) -> Vec<DMatrix<f64>> {
    let mut w = w0.clone();
    let mut t = 0.0;
    let mut out = Vec::new();
    for &target in times {
        while t < target {
            let h = h_max.min(target - t);
            let k1 = rhs(&w, x, y, p);
            let k2 = rhs(&(&w + &k1 * (h / 2.0)), x, y, p);
            let k3 = rhs(&(&w + &k2 * (h / 2.0)), x, y, p);
            let k4 = rhs(&(&w + &k3 * h), x, y, p);
            w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            t += h;
        }
        out.push(w.clone());
    }
    out
}

fn well_conditioned(seed: u64, d: usize, n: usize) -> DMatrix<f64> {
    let mut r = rng(seed);
    loop {
        let x = gaussian_matrix(&mut r, d, n, 1.0);
        let s = (&x * x.transpose()).symmetric_eigenvalues();
        if s.max() / s.min() < 200.0 {
            return x;
        }
    }
}

fn check_against_rk4(pre: Preconditioning) {
    for seed in 0..5 {
        let x = well_conditioned(seed, 3, 5);
        let mut r = rng(100 + seed);
        let y = gaussian_matrix(&mut r, 2, 5, 1.0);
        let w0 = gaussian_matrix(&mut r, 2, 3, 0.5);
        let ds = Dataset::new(x.clone(), SplitTag::Train).unwrap();
        let sol = build_flow(&ds, &y, &LinearModel::new(w0.clone(), Loss::SUM_MSE).unwrap(), pre).unwrap();
        let f = compute_f(&ds);
        let p = match pre {
            Preconditioning::None => DMatrix::identity(3, 3),
            Preconditioning::Newton => f.clone().try_inverse().unwrap(),
        };
        let (lo, hi) = sol.rate_range().unwrap();
        let times: Vec<f64> = (0..20)
            .map(|i| (0.01 / hi) * ((10.0 / lo) / (0.01 / hi)).powf(i as f64 / 19.0))
            .collect();
        let oracle = rk4(&w0, &x, &y, &p, &times, 0.01 / hi);
        for (t, w_ref) in times.iter().zip(&oracle) {
            let w = flow_at(&sol, *t).unwrap();
            let dev = (w.weights() - w_ref).amax();
            assert!(dev < 1e-6, "{pre:?} seed {seed} t {t}: deviation {dev}");
        }
    }
}

#[test]
fn plain_flow_matches_rk4() {
    check_against_rk4(Preconditioning::None);
}

#[test]
fn newton_flow_matches_rk4() {
    check_against_rk4(Preconditioning::Newton);
}

#[test]
fn newton_flow_equals_plain_flow_on_whitened_data() {
    let x = well_conditioned(7, 4, 9);
    let mut r = rng(8);
    let y = gaussian_matrix(&mut r, 3, 9, 1.0);
    let x_test = gaussian_matrix(&mut r, 4, 6, 1.0);
    let ds = Dataset::new(x, SplitTag::Train).unwrap();
    let cfg = WhiteningConfig::new(WhiteningMode::Pca, FitScope::TrainOnly, RankPolicy::ManualRankControl);
    let wh = fit_whitener(&ds, cfg).unwrap();
    let ds_w = apply(&wh, &ds).unwrap();
    let test = Dataset::new(x_test, SplitTag::Test).unwrap();
    let test_w = apply(&wh, &test).unwrap();

    // Matched initial outputs: W_white(0) M = W(0).
    let w0 = gaussian_matrix(&mut r, 3, 4, 0.3);
    let w0_white = &w0 * wh.matrix().clone().try_inverse().unwrap();
    let newton = build_flow(&ds, &y, &LinearModel::new(w0, Loss::SUM_MSE).unwrap(), Preconditioning::Newton).unwrap();
    let plain = build_flow(&ds_w, &y, &LinearModel::new(w0_white, Loss::SUM_MSE).unwrap(), Preconditioning::None).unwrap();
    for t in [0.0, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 50.0] {
        let a = flow_at(&newton, t).unwrap();
        let b = flow_at(&plain, t).unwrap();
        let dev_train = (a.weights() * ds.values() - b.weights() * ds_w.values()).amax();
        let dev_test = (a.weights() * test.values() - b.weights() * test_w.values()).amax();
        assert!(dev_train < 1e-8 && dev_test < 1e-8, "t {t}: {dev_train} {dev_test}");
    }
}

#[test]
fn null_modes_are_conserved() {
    let mut r = rng(11);
    let x = gaussian_matrix(&mut r, 6, 3, 1.0);
    let y = gaussian_matrix(&mut r, 2, 3, 1.0);
    let w0 = gaussian_matrix(&mut r, 2, 6, 1.0);
    let ds = Dataset::new(x, SplitTag::Train).unwrap();
    let sol = build_flow(&ds, &y, &LinearModel::new(w0.clone(), Loss::SUM_MSE).unwrap(), Preconditioning::None).unwrap();
    let v = &sol.spectrum.eigenvectors;
    for t in [0.1, 1.0, 100.0] {
        let w = flow_at(&sol, t).unwrap();
        let modes = w.weights() * v;
        let init = &w0 * v;
        for i in 3..6 {
            assert_eq!(sol.rates[i], 0.0);
            assert!((modes.column(i) - init.column(i)).amax() < 1e-14);
        }
    }
}

#[test]
fn larger_modes_converge_faster() {
    let x = well_conditioned(12, 3, 8);
    let mut r = rng(13);
    let y = gaussian_matrix(&mut r, 1, 8, 1.0);
    let ds = Dataset::new(x, SplitTag::Train).unwrap();
    let sol = build_flow(&ds, &y, &LinearModel::zeros(1, 3, Loss::SUM_MSE), Preconditioning::None).unwrap();
    for t in [0.01, 0.1, 1.0] {
        let m = sol.modes_at(t);
        let rel: Vec<f64> = (0..3)
            .map(|i| ((m[(0, i)] - sol.w_star_modes[(0, i)]) / (sol.w_init_modes[(0, i)] - sol.w_star_modes[(0, i)])).abs())
            .collect();
        assert!(rel[0] < rel[1] && rel[1] < rel[2], "{rel:?}");
    }
}

#[test]
fn optimum_predictions_are_whitening_invariant() {
    let x = well_conditioned(14, 4, 12);
    let mut r = rng(15);
    let y = gaussian_matrix(&mut r, 2, 12, 1.0);
    let x_test = gaussian_matrix(&mut r, 4, 5, 1.0);
    let ds = Dataset::new(x, SplitTag::Train).unwrap();
    let test = Dataset::new(x_test, SplitTag::Test).unwrap();
    for mode in [WhiteningMode::Pca, WhiteningMode::Zca] {
        let cfg = WhiteningConfig::new(mode, FitScope::TrainOnly, RankPolicy::jitter());
        let wh = fit_whitener(&ds, cfg).unwrap();
        let a = solve_optimum(&ds, &y, &LinearModel::zeros(2, 4, Loss::SUM_MSE)).unwrap();
        let b = solve_optimum(&apply(&wh, &ds).unwrap(), &y, &LinearModel::zeros(2, 4, Loss::SUM_MSE)).unwrap();
        let pa = a.model.weights() * test.values();
        let pb = b.model.weights() * apply(&wh, &test).unwrap().values();
        assert!((pa - pb).amax() < 1e-6);
    }
}
