use nalgebra::DMatrix;
use proptest::prelude::*;
use whitebench_core::data_model::{
    compute_f, compute_k, compute_mixed_k, eigh, estimate_input_rank, pseudoinverse, Dataset, SplitTag,
    PINV_REL_TOL, RANK_CUTOFF_RATIO,
};
use whitebench_core::info_props::{
    compress_whitened, count_information_parameters, full_whitening_null_check, orbit_equivalence_check,
    reconstruct_k, OrbitConfig, ORBIT_TOL_LINEAR, ORBIT_TOL_MLP,
};
use whitebench_core::iterative_opt::{conjugate_gradient_solve, regularized_preconditioner, OptimizerConfig};
use whitebench_core::linear_flow::{optimum_predictions, solve_optimum, LinearModel};
use whitebench_core::loss::Loss;
use whitebench_core::models::init_isotropic;
use whitebench_core::random::{gaussian_matrix, random_orthogonal, rng};
use whitebench_core::whitening::{apply, fit_whitener, FitScope, RankPolicy, WhiteningConfig, WhiteningMode};

fn data(d: usize, n: usize, seed: u64) -> Dataset {
    Dataset::new(gaussian_matrix(&mut rng(seed), d, n, 1.0), SplitTag::Train).unwrap()
}

fn sorted_nonzero(v: &[f64], top: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().copied().filter(|&x| x > 1e-9 * top).collect();
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

fn full_whiten(x: &Dataset, mode: WhiteningMode) -> Dataset {
    let cfg = WhiteningConfig::new(mode, FitScope::Full, RankPolicy::ManualRankControl);
    apply(&fit_whitener(x, cfg).unwrap(), x).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moments_are_psd_and_share_spectrum(d in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let x = data(d, n, seed);
        let fe = eigh(&compute_f(&x)).unwrap().eigenvalues;
        let ke = eigh(&compute_k(&x)).unwrap().eigenvalues;
        let top = fe.max().max(ke.max());
        prop_assert!(fe.min() >= -1e-8 * top);
        prop_assert!(ke.min() >= -1e-8 * top);
        let a = sorted_nonzero(fe.as_slice(), top);
        let b = sorted_nonzero(ke.as_slice(), top);
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-8 * p.abs());
        }
    }

    #[test]
    fn pseudoinverse_penrose(r in 1usize..9, c in 1usize..9, rank in 1usize..9, seed in any::<u64>()) {
        let mut g = rng(seed);
        let rank = rank.min(r).min(c);
        let a = gaussian_matrix(&mut g, r, rank, 1.0) * gaussian_matrix(&mut g, rank, c, 1.0);
        let p = pseudoinverse(&a, PINV_REL_TOL).unwrap();
        let tol = 1e-8 * (1.0 + a.amax()) * (1.0 + p.amax());
        prop_assert!((&a * &p * &a - &a).amax() < tol);
        prop_assert!((&p * &a * &p - &p).amax() < tol);
        let ap = &a * &p;
        let pa = &p * &a;
        prop_assert!((&ap - ap.transpose()).amax() < tol);
        prop_assert!((&pa - pa.transpose()).amax() < tol);
    }

    #[test]
    fn input_rank_of_constructed_data(d in 1usize..9, n in 1usize..12, rank in 1usize..9, seed in any::<u64>()) {
        let mut g = rng(seed);
        let rank = rank.min(d).min(n);
        let x = gaussian_matrix(&mut g, d, rank, 1.0) * gaussian_matrix(&mut g, rank, n, 1.0);
        let x = Dataset::new(x, SplitTag::Train).unwrap();
        // Random factors of this size keep every nonzero singular value far above 1e-5 relative,
        // except in rare near-degenerate draws, which we skip.
        let s = x.values().singular_values();
        let mut sv: Vec<f64> = s.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sv[rank - 1] > 1e-2 * sv[0]);
        prop_assert_eq!(estimate_input_rank(&x, RANK_CUTOFF_RATIO).unwrap(), rank);
    }

    #[test]
    fn zca_is_idempotent(d in 1usize..7, extra in 1usize..10, seed in any::<u64>()) {
        let x = data(d, d + extra, seed);
        let cfg = WhiteningConfig::new(WhiteningMode::Zca, FitScope::TrainOnly, RankPolicy::jitter());
        let once = apply(&fit_whitener(&x, cfg).unwrap(), &x).unwrap();
        let m2 = fit_whitener(&once, cfg).unwrap();
        prop_assert!((m2.matrix() - DMatrix::<f64>::identity(d, d)).amax() <= 1e-6);
    }

    #[test]
    fn full_scope_removes_cross_gram(d in 4usize..12, ntr in 1usize..6, nte in 1usize..6, seed in any::<u64>()) {
        prop_assume!(ntr + nte <= d);
        let mut g = rng(seed);
        let tr = Dataset::new(gaussian_matrix(&mut g, d, ntr, 1.0), SplitTag::Train).unwrap();
        let te = Dataset::new(gaussian_matrix(&mut g, d, nte, 1.0), SplitTag::Test).unwrap();
        let all = Dataset::concat(&[&tr, &te], "all").unwrap();
        for mode in [WhiteningMode::Pca, WhiteningMode::Zca] {
            let cfg = WhiteningConfig::new(mode, FitScope::Full, RankPolicy::ManualRankControl);
            let w = fit_whitener(&all, cfg).unwrap();
            let k = compute_k(&apply(&w, &all).unwrap());
            prop_assert!((k - DMatrix::<f64>::identity(ntr + nte, ntr + nte)).amax() <= 1e-6);
            let cross = compute_mixed_k(&apply(&w, &tr).unwrap(), &apply(&w, &te).unwrap()).unwrap();
            prop_assert!(cross.amax() <= 1e-6);
        }
    }

    #[test]
    fn whitening_is_linear(d in 1usize..6, n in 1usize..8, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut g = rng(seed);
        let fit = Dataset::new(gaussian_matrix(&mut g, d, n + d, 1.0), SplitTag::Train).unwrap();
        let x1 = gaussian_matrix(&mut g, d, n, 1.0);
        let x2 = gaussian_matrix(&mut g, d, n, 1.0);
        let cfg = WhiteningConfig::new(WhiteningMode::Pca, FitScope::TrainOnly, RankPolicy::jitter());
        let w = fit_whitener(&fit, cfg).unwrap();
        let ap = |m: DMatrix<f64>| apply(&w, &Dataset::new(m, SplitTag::Test).unwrap()).unwrap().into_values();
        let lhs = ap(&x1 * a + &x2 * b);
        let rhs = ap(x1.clone()) * a + ap(x2.clone()) * b;
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + w.matrix().amax()) * 10.0);
    }

    #[test]
    fn k_form_equals_f_form(d in 1usize..6, extra in 1usize..8, seed in any::<u64>()) {
        let mut g = rng(seed);
        let n = d + extra;
        let x = Dataset::new(gaussian_matrix(&mut g, d, n, 1.0), SplitTag::Train).unwrap();
        let xt = Dataset::new(gaussian_matrix(&mut g, d, 4, 1.0), SplitTag::Test).unwrap();
        let y = gaussian_matrix(&mut g, 2, n, 1.0);
        let w0 = LinearModel::new(gaussian_matrix(&mut g, 2, d, 0.3), Loss::SUM_MSE).unwrap();
        let f_form = solve_optimum(&x, &y, &w0).unwrap().model.weights() * xt.values();
        let k_form = optimum_predictions(&x, &y, &xt, &w0).unwrap().predictions;
        prop_assert!((f_form - k_form).amax() <= 1e-8 * (1.0 + y.amax()) * 10.0);
    }

    #[test]
    fn compression_round_trip(d in 2usize..6, extra in 1usize..7, seed in any::<u64>()) {
        let x = full_whiten(&data(d, d + extra, seed), WhiteningMode::Pca);
        let c = compress_whitened(&x).unwrap();
        prop_assert_eq!(c.stored_scalars(), extra * d);
        prop_assert!((reconstruct_k(&c).unwrap() - compute_k(&x)).amax() <= 1e-8);
    }

    #[test]
    fn whitened_count_never_exceeds_raw(d in 1usize..40, extra in 0usize..40) {
        let n = d + extra;
        let white = count_information_parameters(d, n, true).unwrap();
        let raw = count_information_parameters(d, n, false).unwrap();
        prop_assert!(white <= raw);
        prop_assert_eq!(white, (extra * d) as u64);
    }

    #[test]
    fn cg_solves_spd_systems(n in 1usize..20, seed in any::<u64>()) {
        let mut g = rng(seed);
        let a = gaussian_matrix(&mut g, n, n, 1.0);
        let spd = &a * a.transpose() + DMatrix::<f64>::identity(n, n);
        let b = gaussian_matrix(&mut g, n, 1, 1.0).column(0).into_owned();
        let sol = conjugate_gradient_solve(|v| &spd * v, &b, 1e-10, 10 * n).unwrap();
        prop_assert!((&spd * &sol.x - &b).norm() <= 1e-10);
    }

    #[test]
    fn eigen_preconditioner_matches_dense_inverse(n in 1usize..65, lambda in 0.01f64..1.0, seed in any::<u64>()) {
        let mut g = rng(seed);
        let a = gaussian_matrix(&mut g, n, n, 1.0);
        let b = &a * a.transpose() / n as f64 + DMatrix::<f64>::identity(n, n) * 0.1;
        let dense = (&b * (1.0 - lambda) + DMatrix::<f64>::identity(n, n) * lambda).try_inverse().unwrap();
        let eig = regularized_preconditioner(&b, lambda).unwrap();
        prop_assert!((eig - dense.clone()).amax() <= 1e-8 * dense.amax().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn orbit_linear(d in 2usize..7, n in 2usize..15, seed in any::<u64>()) {
        let mut g = rng(seed);
        let x = gaussian_matrix(&mut g, d, n, 1.0);
        let y = gaussian_matrix(&mut g, 3, n, 1.0);
        let xt = gaussian_matrix(&mut g, d, 4, 1.0);
        let r = random_orthogonal(&mut g, d);
        let m = LinearModel::new(gaussian_matrix(&mut g, 3, d, 0.1), Loss::SUM_MSE).unwrap();
        let cfg = OrbitConfig { opt: OptimizerConfig::with_eta(0.01), steps: 30, batch_seed: seed, tol: ORBIT_TOL_LINEAR };
        let rep = orbit_equivalence_check(&m, &x, &y, &xt, &r, &cfg).unwrap();
        prop_assert!(rep.pass, "{:?}", rep);
    }

    #[test]
    fn orbit_mlp(d in 2usize..7, n in 2usize..15, seed in any::<u64>()) {
        let mut g = rng(seed);
        let x = gaussian_matrix(&mut g, d, n, 1.0);
        let y = gaussian_matrix(&mut g, 3, n, 1.0);
        let xt = gaussian_matrix(&mut g, d, 4, 1.0);
        let r = random_orthogonal(&mut g, d);
        let m = init_isotropic(&[d, 6, 3], 0.3, seed).unwrap();
        let cfg = OrbitConfig { opt: OptimizerConfig::with_eta(0.05), steps: 20, batch_seed: seed, tol: ORBIT_TOL_MLP };
        let rep = orbit_equivalence_check(&m, &x, &y, &xt, &r, &cfg).unwrap();
        prop_assert!(rep.pass, "{:?}", rep);
    }

    #[test]
    fn null_check_for_any_seed(ntr in 1usize..10, nte in 1usize..10, k in 2usize..11, seed in any::<u64>()) {
        let rep = full_whitening_null_check(20, ntr, nte, k, seed).unwrap();
        prop_assert!(rep.pass, "{:?}", rep);
    }
}
