use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use whitebench_core::data_model::LabelSet;
use whitebench_core::iterative_opt::{dense_gauss_newton, Differentiable};
use whitebench_core::linear_flow::LinearModel;
use whitebench_core::loss::{Loss, OutputHead};
use whitebench_core::models::{Activation, InitScheme, Mlp};
use whitebench_core::random::{gaussian_matrix, rng, Rng};

fn fd_gradient<M: Differentiable + Clone>(model: &M, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    let p = model.params();
    let mut probe = model.clone();
    let mut q = p.clone();
    DVector::from_fn(p.len(), |i, _| {
        let h = 1e-5 * (1.0 + p[i].abs());
        q[i] = p[i] + h;
        probe.set_params(&q);
        let up = probe.loss(x, y);
        q[i] = p[i] - h;
        probe.set_params(&q);
        let down = probe.loss(x, y);
        q[i] = p[i];
        (up - down) / (2.0 * h)
    })
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

fn targets(r: &mut Rng, k: usize, n: usize, head: OutputHead) -> DMatrix<f64> {
    match head {
        OutputHead::SoftmaxXent => {
            let classes: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            LabelSet::one_hot(&classes, k).unwrap().targets().clone()
        }
        OutputHead::LinearMse => gaussian_matrix(r, k, n, 1.0),
    }
}

const LOSSES: [Loss; 4] = [
    Loss::SUM_MSE,
    Loss::MEAN_MSE,
    Loss::MEAN_XENT,
    Loss {
        head: OutputHead::SoftmaxXent,
        reduction: whitebench_core::loss::Reduction::Sum,
    },
];

#[test]
fn linear_model_gradients() {
    let mut r = rng(1);
    for cfg in 0..20 {
        let loss = LOSSES[cfg % LOSSES.len()];
        let (d, k, n) = (r.random_range(1..6), r.random_range(2..5), r.random_range(1..9));
        let x = gaussian_matrix(&mut r, d, n, 1.0);
        let y = targets(&mut r, k, n, loss.head);
        let m = LinearModel::new(gaussian_matrix(&mut r, k, d, 0.5), loss).unwrap();
        let e = rel_err(&m.evaluate(&x, &y).grad, &fd_gradient(&m, &x, &y));
        assert!(e < 1e-4, "config {cfg}: {e}");
    }
}

#[test]
fn mlp_gradients() {
    let mut r = rng(2);
    for cfg in 0..20 {
        let loss = LOSSES[cfg % LOSSES.len()];
        let act = if cfg % 3 == 0 { Activation::Relu } else { Activation::Tanh };
        let depth = r.random_range(1..4);
        let mut sizes = vec![r.random_range(2..6)];
        for _ in 1..depth {
            sizes.push(r.random_range(2..7));
        }
        sizes.push(r.random_range(2..5));
        let n = r.random_range(1..8);
        let x = gaussian_matrix(&mut r, sizes[0], n, 1.0);
        let y = targets(&mut r, *sizes.last().unwrap(), n, loss.head);
        let mut m = Mlp::init(&sizes, InitScheme::FanIn(1.0), cfg as u64)
            .unwrap()
            .with_activation(act)
            .with_loss(loss);
        if cfg % 2 == 1 {
            m = m.with_deeper_biases();
        }
        let e = rel_err(&m.evaluate(&x, &y).grad, &fd_gradient(&m, &x, &y));
        assert!(e < 1e-4, "config {cfg} {sizes:?} {act:?}: {e}");
    }
}

/// `B = Jᵀ H J` from a finite-difference Jacobian of the flattened outputs.
fn fd_gauss_newton(m: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.params();
    let f0 = m.predict(x);
    let mut probe = m.clone();
    let mut jac = DMatrix::zeros(f0.len(), p.len());
    for i in 0..p.len() {
        let h = 1e-6 * (1.0 + p[i].abs());
        let mut q = p.clone();
        q[i] += h;
        probe.set_params(&q);
        let up = probe.predict(x);
        q[i] -= 2.0 * h;
        probe.set_params(&q);
        let down = probe.predict(x);
        jac.set_column(i, &DVector::from_column_slice(((up - down) / (2.0 * h)).as_slice()));
    }
    let loss = m.loss_fn();
    let mut hj = DMatrix::zeros(f0.len(), p.len());
    for i in 0..p.len() {
        let v = DMatrix::from_column_slice(f0.nrows(), f0.ncols(), jac.column(i).as_slice());
        hj.set_column(i, &DVector::from_column_slice(loss.hessian_vp(&f0, y, &v).as_slice()));
    }
    jac.transpose() * hj
}

#[test]
fn gauss_newton_products_match_jacobian_oracle() {
    let mut r = rng(3);
    for (cfg, loss) in LOSSES.iter().enumerate() {
        let m = Mlp::init(&[3, 4, 3], InitScheme::FanIn(1.0), cfg as u64)
            .unwrap()
            .with_activation(Activation::Tanh)
            .with_loss(*loss)
            .with_deeper_biases();
        let x = gaussian_matrix(&mut r, 3, 5, 1.0);
        let y = targets(&mut r, 3, 5, loss.head);
        let dense = dense_gauss_newton(&m, &x, &y);
        let oracle = fd_gauss_newton(&m, &x, &y);
        let scale = oracle.amax().max(1.0);
        assert!((dense - oracle).amax() / scale < 1e-6, "{loss:?}");
    }
}
