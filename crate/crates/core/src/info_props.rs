//! Executable checks of what whitened data can and cannot tell a model.
//!
//! * [`compress_whitened`] / [`reconstruct_k`]: a fully whitened `d×n` dataset
//!   is determined (up to what training can see) by `(n−d)·d` numbers.
//! * [`count_information_parameters`]: scalar counts for whitened and raw data.
//! * [`orbit_equivalence_check`]: training on `RX` from `W⁰Rᵀ` reproduces
//!   training on `X` from `W⁰` exactly.
//! * [`full_whitening_null_check`]: a linear model trained on fully whitened
//!   data with `n ≤ d` predicts zero on the test set.

use nalgebra::DMatrix;

use crate::data_model::{argmax_columns, compute_f, compute_k, pseudoinverse, singular_values, Dataset, LabelSet, SplitTag, PINV_REL_TOL};
use crate::error::{shape_err, Error, Result};
use crate::iterative_opt::{sgd_step_from, BatchSize, Differentiable, OptimizerConfig};
use crate::linear_flow::{optimum_predictions, LinearModel};
use crate::loss::{accuracy, mse_per_sample};
use crate::models::{BatchSchedule, Mlp};
use crate::random::{gaussian_matrix, rng};
use crate::whitening::{apply, fit_whitener, FitScope, RankPolicy, WhiteningConfig, WhiteningMode};

/// Max deviation of `F̂` from the identity accepted by [`compress_whitened`].
pub const WHITENESS_TOL: f64 = 1e-6;
/// Max deviation of `RᵀR` from the identity accepted by [`orbit_equivalence_check`].
pub const ORTHOGONALITY_TOL: f64 = 1e-10;
/// Leading blocks with a worse condition number trigger column pivoting.
pub const MAX_BLOCK_CONDITION: f64 = 1e8;
pub const ORBIT_TOL_LINEAR: f64 = 1e-10;
pub const ORBIT_TOL_MLP: f64 = 1e-8;
pub const NULL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDataset {
    /// Columns `d+1..n` of `X̃ = Q X̂`, whose first `d` columns are the identity.
    pub payload: DMatrix<f64>,
    pub d: usize,
    pub n: usize,
    /// `permutation[j]` is the original index of compressed column `j`. Set only
    /// when the leading block had to be replaced.
    pub permutation: Option<Vec<usize>>,
    /// Condition number of the block that was inverted.
    pub condition_number: f64,
}

impl CompressedDataset {
    pub fn stored_scalars(&self) -> usize {
        self.payload.len()
    }
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let Ok(s) = singular_values(m) else {
        return f64::INFINITY;
    };
    let lo = s.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        s.max() / lo
    }
}

/// Greedy column selection (pivoted Gram-Schmidt): picks `d` columns, each
/// time the one with the largest residual after projecting out those chosen.
fn pivot_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let (d, n) = x.shape();
    let mut resid = x.clone();
    let mut chosen = Vec::with_capacity(d);
    for _ in 0..d {
        let best = (0..n)
            .filter(|j| !chosen.contains(j))
            .max_by(|&a, &b| resid.column(a).norm().total_cmp(&resid.column(b).norm()))
            .expect("n ≥ d");
        let q = resid.column(best).normalize();
        for j in 0..n {
            let c = q.dot(&resid.column(j));
            let mut col = resid.column_mut(j);
            col.axpy(-c, &q, 1.0);
        }
        chosen.push(best);
    }
    chosen
}

/// Compresses fully whitened data to the `(n−d)·d` payload of `[I | P]`.
pub fn compress_whitened(x_hat: &Dataset) -> Result<CompressedDataset> {
    let (d, n) = (x_hat.feature_dim(), x_hat.sample_count());
    if n < d {
        return Err(Error::InvalidInput(format!("compression needs n ≥ d, got d = {d}, n = {n}")));
    }
    let f = compute_f(x_hat);
    let off = (f - DMatrix::<f64>::identity(d, d)).amax();
    if off > WHITENESS_TOL {
        return Err(Error::InvalidInput(format!(
            "data is not fully whitened: max |F̂ − I| = {off:.3e}"
        )));
    }
    let x = x_hat.values();
    let mut permutation = None;
    let mut cols = x.clone();
    let mut cond = condition(&x.columns(0, d).into_owned());
    if !(cond <= MAX_BLOCK_CONDITION) {
        let lead = pivot_columns(x);
        let mut perm = lead.clone();
        perm.extend((0..n).filter(|j| !lead.contains(j)));
        cols = x.select_columns(&perm);
        cond = condition(&cols.columns(0, d).into_owned());
        if !(cond <= MAX_BLOCK_CONDITION) {
            return Err(Error::Degeneracy { d, condition: cond });
        }
        permutation = Some(perm);
    }
    let q = cols
        .columns(0, d)
        .into_owned()
        .try_inverse()
        .ok_or(Error::Degeneracy { d, condition: cond })?;
    let payload = q * cols.columns(d, n - d);
    Ok(CompressedDataset {
        payload,
        d,
        n,
        permutation,
        condition_number: cond,
    })
}

/// Recovers `K̂ = X̃⁺ X̃` in the original sample order.
pub fn reconstruct_k(c: &CompressedDataset) -> Result<DMatrix<f64>> {
    if c.payload.shape() != (c.d, c.n - c.d) {
        return Err(shape_err(
            format!("payload {}×{}", c.d, c.n - c.d),
            format!("{}×{}", c.payload.nrows(), c.payload.ncols()),
        ));
    }
    let mut xt = DMatrix::zeros(c.d, c.n);
    xt.columns_mut(0, c.d).fill_with_identity();
    xt.columns_mut(c.d, c.n - c.d).copy_from(&c.payload);
    let kt = pseudoinverse(&xt, PINV_REL_TOL)? * &xt;
    let kt = (&kt + kt.transpose()) * 0.5;
    Ok(match &c.permutation {
        None => kt,
        Some(p) => {
            let mut k = DMatrix::zeros(c.n, c.n);
            for i in 0..c.n {
                for j in 0..c.n {
                    k[(p[i], p[j])] = kt[(i, j)];
                }
            }
            k
        }
    })
}

/// Number of scalars that determine training outcomes for `d×n` data.
///
/// Raw data: `min(n·d' − (d'²−d')/2, (n²+n)/2)` with `d' = min(d, n)`, which
/// collapses to `(n²+n)/2` once `d ≥ n`. Whitened data: `(n−d)·d`.
pub fn count_information_parameters(d: usize, n: usize, whitened: bool) -> Result<u64> {
    if d == 0 || n == 0 {
        return Err(Error::Domain(format!("d and n must be ≥ 1, got d = {d}, n = {n}")));
    }
    let (d, n) = (d as u64, n as u64);
    if whitened {
        if n < d {
            return Err(Error::Domain(format!(
                "whitened data with n = {n} < d = {d} has K̂ = I and carries 0 scalars"
            )));
        }
        return Ok((n - d) * d);
    }
    let de = d.min(n);
    Ok((n * de - (de * de - de) / 2).min((n * n + n) / 2))
}

/// Models whose first layer acts on the raw input as `W x`.
pub trait FirstLayer: Differentiable + Clone {
    fn first_weights(&self) -> &DMatrix<f64>;
    fn replace_first_weights(&mut self, w: DMatrix<f64>);
    /// Parameters other than the first layer.
    fn rest_params(&self) -> Vec<f64>;
}

impl FirstLayer for LinearModel {
    fn first_weights(&self) -> &DMatrix<f64> {
        self.weights()
    }
    fn replace_first_weights(&mut self, w: DMatrix<f64>) {
        self.set_weights(w);
    }
    fn rest_params(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl FirstLayer for Mlp {
    fn first_weights(&self) -> &DMatrix<f64> {
        self.first_layer()
    }
    fn replace_first_weights(&mut self, w: DMatrix<f64>) {
        self.set_first_layer(w).expect("shape preserved by rotation");
    }
    fn rest_params(&self) -> Vec<f64> {
        self.deeper_params().as_slice().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitConfig {
    pub opt: OptimizerConfig,
    pub steps: usize,
    pub batch_seed: u64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitReport {
    /// Max over steps of `|W_a − W_b R|` and of the deeper parameters.
    pub theta_deviation: f64,
    /// Max over steps of `|W_a X − W_b (R X)|`.
    pub z_deviation: f64,
    pub loss_deviation: f64,
    /// `|f_a(X_test) − f_b(R X_test)|` after training.
    pub test_deviation: f64,
    pub tol: f64,
    pub pass: bool,
}

impl OrbitReport {
    pub fn max_deviation(&self) -> f64 {
        self.theta_deviation
            .max(self.z_deviation)
            .max(self.loss_deviation)
            .max(self.test_deviation)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Trains `model` on `(X, Y)` and a copy with first layer `W⁰Rᵀ` on `(RX, Y)`
/// under the same step sizes and batch order, and compares the trajectories.
pub fn orbit_equivalence_check<M: FirstLayer>(
    model: &M,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    r: &DMatrix<f64>,
    cfg: &OrbitConfig,
) -> Result<OrbitReport> {
    let d = x.nrows();
    if r.shape() != (d, d) {
        return Err(shape_err(format!("R: {d}×{d}"), format!("{}×{}", r.nrows(), r.ncols())));
    }
    let orth = (r.transpose() * r - DMatrix::<f64>::identity(d, d)).amax();
    if !(orth <= ORTHOGONALITY_TOL) {
        return Err(Error::InvalidInput(format!("R is not orthogonal: max |RᵀR − I| = {orth:.3e}")));
    }
    if model.first_weights().ncols() != d || x_test.nrows() != d || y.ncols() != x.ncols() {
        return Err(shape_err(format!("inputs with {d} features"), "mismatched inputs".to_string()));
    }
    cfg.opt.validate()?;

    let rx = r * x;
    let rx_test = r * x_test;
    let mut a = model.clone();
    let mut b = model.clone();
    b.replace_first_weights(model.first_weights() * r.transpose());

    let n = x.ncols();
    let mut schedule = match cfg.opt.batch_size {
        BatchSize::Mini(s) if s < n => Some(BatchSchedule::new(n, s, cfg.batch_seed)),
        _ => None,
    };
    let mut rep = OrbitReport {
        theta_deviation: 0.0,
        z_deviation: 0.0,
        loss_deviation: 0.0,
        test_deviation: 0.0,
        tol: cfg.tol,
        pass: false,
    };
    let compare = |a: &M, b: &M, rep: &mut OrbitReport| {
        let wb_r = b.first_weights() * r;
        rep.theta_deviation = rep
            .theta_deviation
            .max((a.first_weights() - wb_r).amax())
            .max(max_abs_diff(&a.rest_params(), &b.rest_params()));
        let za = a.first_weights() * x;
        let zb = b.first_weights() * &rx;
        rep.z_deviation = rep.z_deviation.max((za - zb).amax());
    };
    compare(&a, &b, &mut rep);
    for _ in 0..cfg.steps {
        let (xa, xb, yb) = match schedule.as_mut() {
            Some(s) => {
                let idx = s.next_batch();
                (x.select_columns(&idx), rx.select_columns(&idx), y.select_columns(&idx))
            }
            None => (x.clone(), rx.clone(), y.clone()),
        };
        let ea = a.evaluate(&xa, &yb);
        let eb = b.evaluate(&xb, &yb);
        rep.loss_deviation = rep.loss_deviation.max((ea.loss - eb.loss).abs());
        sgd_step_from(&mut a, &xa, &yb, &ea, &cfg.opt)?;
        sgd_step_from(&mut b, &xb, &yb, &eb, &cfg.opt)?;
        compare(&a, &b, &mut rep);
    }
    rep.loss_deviation = rep.loss_deviation.max((a.loss(x, y) - b.loss(&rx, y)).abs());
    rep.test_deviation = (a.predict(x_test) - b.predict(&rx_test)).amax();
    rep.pass = rep.max_deviation() <= cfg.tol;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullReport {
    pub max_abs_prediction: f64,
    pub test_loss: f64,
    /// Loss of the all-zero predictor on the same targets.
    pub expected_loss: f64,
    /// Error of the raw predictions (argmax over round-off noise).
    pub test_error: f64,
    /// Error after snapping predictions within tolerance to zero; ties go to
    /// class 0, so this is the fraction of test labels other than class 0.
    pub tie_break_error: f64,
    pub chance_error: f64,
    pub pass: bool,
}

/// Trains a linear model to convergence on fully whitened Gaussian data with
/// random labels and checks that every test prediction is zero.
pub fn full_whitening_null_check(d: usize, n_train: usize, n_test: usize, k: usize, seed: u64) -> Result<NullReport> {
    if n_train == 0 || n_test == 0 || k < 2 {
        return Err(Error::InvalidInput("need n_train, n_test ≥ 1 and k ≥ 2".into()));
    }
    if n_train + n_test > d {
        return Err(Error::InvalidInput(format!(
            "full whitening only removes all information when n_train + n_test ≤ d; got {} > {d}",
            n_train + n_test
        )));
    }
    let mut r = rng(seed);
    let x = gaussian_matrix(&mut r, d, n_train + n_test, 1.0);
    let classes: Vec<usize> = (0..n_train + n_test)
        .map(|_| rand::Rng::random_range(&mut r, 0..k))
        .collect();
    let train = Dataset::with_id(x.columns(0, n_train).into_owned(), SplitTag::Train, "train")?;
    let test = Dataset::with_id(x.columns(n_train, n_test).into_owned(), SplitTag::Test, "test")?;
    let y_train = LabelSet::one_hot(&classes[..n_train], k)?;
    let y_test = LabelSet::one_hot(&classes[n_train..], k)?;

    let all = Dataset::concat(&[&train, &test], "full")?;
    let cfg = WhiteningConfig::new(WhiteningMode::Pca, FitScope::Full, RankPolicy::ManualRankControl);
    let w = fit_whitener(&all, cfg)?;
    let (train_w, test_w) = (apply(&w, &train)?, apply(&w, &test)?);

    let w0 = LinearModel::zeros(k, d, crate::loss::Loss::SUM_MSE);
    let f = optimum_predictions(&train_w, y_train.targets(), &test_w, &w0)?.predictions;
    let max_abs_prediction = f.amax();
    let test_loss = mse_per_sample(&f, y_test.targets());
    let zeros = DMatrix::zeros(k, n_test);
    let expected_loss = mse_per_sample(&zeros, y_test.targets());
    let snapped = f.map(|v| if v.abs() <= NULL_TOL { 0.0 } else { v });
    let test_classes = &classes[n_train..];
    let misses = argmax_columns(&snapped)
        .iter()
        .zip(test_classes)
        .filter(|(p, c)| p != c)
        .count();
    let tie_break_error = misses as f64 / n_test as f64;
    let chance_error = test_classes.iter().filter(|&&c| c != 0).count() as f64 / n_test as f64;
    Ok(NullReport {
        max_abs_prediction,
        test_loss,
        expected_loss,
        test_error: 1.0 - accuracy(&f, y_test.targets()),
        tie_break_error,
        chance_error,
        pass: max_abs_prediction <= NULL_TOL
            && (test_loss - expected_loss).abs() <= NULL_TOL
            && tie_break_error == chance_error,
    })
}

/// `K̂` of whitened data, for comparing against [`reconstruct_k`].
pub fn whitened_gram(x_hat: &Dataset) -> DMatrix<f64> {
    compute_k(x_hat)
}
