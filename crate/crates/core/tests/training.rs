use nalgebra::DMatrix;
use whitebench_core::data_model::{compute_k, Dataset, LabelSet, LabeledData, SplitTag};
use whitebench_core::iterative_opt::{
    newton_step, regularized_gn_direction, sgd_step, BatchSize, Differentiable, LineSearchConfig, OptimizerConfig,
};
use whitebench_core::linear_flow::LinearModel;
use whitebench_core::loss::Loss;
use whitebench_core::models::{train_to_cutoff, Activation, InitScheme, Mlp, OptimizerKind, TrainConfig};
use whitebench_core::random::{gaussian_matrix, rng};
use whitebench_core::whitening::{apply, fit_whitener, FitScope, RankPolicy, WhiteningConfig, WhiteningMode};

fn labeled(d: usize, n: usize, k: usize, seed: u64) -> LabeledData {
    let mut r = rng(seed);
    let x = gaussian_matrix(&mut r, d, n, 1.0);
    let classes: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
    LabeledData::new(
        Dataset::new(x, SplitTag::Train).unwrap(),
        LabelSet::one_hot(&classes, k).unwrap(),
    )
    .unwrap()
}

#[test]
fn single_layer_mlp_is_linear_gd() {
    let data = labeled(5, 20, 3, 1);
    let (x, y) = (data.x.values(), data.y.targets());
    let eta = 0.01;
    let mut mlp = Mlp::init(&[5, 3], InitScheme::FanIn(1.0), 2).unwrap().with_loss(Loss::MEAN_MSE);
    let mut w = mlp.first_layer().clone();
    let cfg = OptimizerConfig::with_eta(eta);
    let n = x.ncols() as f64;
    for step in 0..100 {
        sgd_step(&mut mlp, x, y, &cfg).unwrap();
        w = &w - ((&w * x - y) * x.transpose()) * (eta / n);
        let dev = (mlp.first_layer() - &w).amax();
        assert!(dev < 1e-8, "step {step}: {dev}");
    }
}

#[test]
fn first_layer_activations_follow_gram_recursion() {
    let data = labeled(6, 15, 4, 3);
    let (x, y) = (data.x.values(), data.y.targets());
    let k = compute_k(&data.x);
    let eta = 0.05;
    for act in [Activation::Relu, Activation::Tanh] {
        let mut m = Mlp::init(&[6, 8, 8, 4], InitScheme::FanIn(2.0), 4)
            .unwrap()
            .with_activation(act)
            .with_deeper_biases();
        for step in 0..30 {
            let (out, cache) = m.forward(x).unwrap();
            let grads = m.backward(&cache, &m.loss().grad(&out, y));
            let predicted = cache.first_layer() - &grads.first_layer_dz * &k * eta;
            sgd_step(&mut m, x, y, &OptimizerConfig::with_eta(eta)).unwrap();
            let z = m.first_layer() * x;
            let dev = (z - predicted).amax();
            assert!(dev < 1e-9, "{act:?} step {step}: {dev}");
        }
    }
}

#[test]
fn newton_steps_equal_whitened_gd_steps() {
    let mut r = rng(5);
    let (d, n, k) = (8, 40, 3);
    let x = Dataset::new(gaussian_matrix(&mut r, d, n, 1.0), SplitTag::Train).unwrap();
    let x_test = Dataset::new(gaussian_matrix(&mut r, d, 10, 1.0), SplitTag::Test).unwrap();
    let y = gaussian_matrix(&mut r, k, n, 1.0);
    let wh = fit_whitener(
        &x,
        WhiteningConfig::new(WhiteningMode::Pca, FitScope::TrainOnly, RankPolicy::ManualRankControl),
    )
    .unwrap();
    let (xw, xw_test) = (apply(&wh, &x).unwrap(), apply(&wh, &x_test).unwrap());
    let w0 = gaussian_matrix(&mut r, k, d, 0.1);
    let mut newton = LinearModel::new(w0.clone(), Loss::SUM_MSE).unwrap();
    let mut gd = LinearModel::new(w0 * wh.matrix().clone().try_inverse().unwrap(), Loss::SUM_MSE).unwrap();
    let cfg = OptimizerConfig::with_eta(0.3);
    for step in 0..100 {
        newton_step(&mut newton, &x, &y, &cfg).unwrap();
        sgd_step(&mut gd, xw.values(), &y, &cfg).unwrap();
        let dtr = (newton.predict(x.values()) - gd.predict(xw.values())).amax();
        let dte = (newton.predict(x_test.values()) - gd.predict(xw_test.values())).amax();
        assert!(dtr < 1e-10 && dte < 1e-10, "step {step}: {dtr} {dte}");
    }
}

#[test]
fn gn_direction_is_continuous_in_lambda() {
    let data = labeled(4, 12, 3, 6);
    let (x, y) = (data.x.values(), data.y.targets());
    let m = Mlp::init(&[4, 5, 3], InitScheme::FanIn(1.0), 7).unwrap().with_activation(Activation::Tanh);
    let grad = m.evaluate(x, y).grad;
    let dir = |lambda: f64| {
        let cfg = OptimizerConfig {
            reg_lambda: lambda,
            cg_tol: 1e-12,
            ..OptimizerConfig::default()
        };
        regularized_gn_direction(&m, x, y, &grad, &cfg).unwrap().x
    };
    assert!((dir(1.0) - &grad).amax() < 1e-8);
    for l in [0.2, 0.5, 0.9] {
        let gap = (dir(l) - dir(l + 1e-7)).amax();
        assert!(gap < 1e-4, "lambda {l}: {gap}");
    }
}

#[test]
fn line_search_never_increases_loss() {
    let data = labeled(6, 30, 3, 8);
    let mut m = Mlp::init(&[6, 10, 3], InitScheme::FanIn(2.0), 9).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::RegularizedGn,
        opt: OptimizerConfig {
            eta: 1.0,
            reg_lambda: 0.3,
            batch_size: BatchSize::Full,
            line_search: Some(LineSearchConfig::default()),
            ..OptimizerConfig::default()
        },
        max_steps: 25,
        cutoff: 2.0,
        ..TrainConfig::default()
    };
    let rec = train_to_cutoff(&mut m, &data, None, None, &cfg);
    assert!(rec.error.is_none(), "{:?}", rec.error);
    let losses = rec.losses();
    assert_eq!(losses.len(), 26);
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn identical_runs_give_identical_records() {
    let data = labeled(5, 24, 3, 10);
    let cfg = TrainConfig {
        opt: OptimizerConfig {
            batch_size: BatchSize::Mini(5),
            ..OptimizerConfig::with_eta(0.1)
        },
        max_steps: 60,
        batch_seed: 77,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Mlp::init(&[5, 7, 3], InitScheme::FanIn(2.0), 11).unwrap();
        let rec = train_to_cutoff(&mut m, &data, Some(&data), None, &cfg);
        (rec, m.params())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn zero_init_linear_predictions_are_zero() {
    let m = LinearModel::zeros(3, 4, Loss::SUM_MSE);
    assert_eq!(m.predict(&DMatrix::from_element(4, 2, 1.0)), DMatrix::zeros(3, 2));
}
