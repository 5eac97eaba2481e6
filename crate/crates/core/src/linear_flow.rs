//! Closed-form gradient flow for linear least squares.
//!
//! With `L = ½‖W X − Y‖²` the flow `dW/dt = −∂L/∂W` decouples in the
//! eigenbasis `F_train = Σ λ_i v_i v_iᵀ`:
//!
//! ```text
//! w_i(t) = e^{−r_i t} w_i(0) + (1 − e^{−r_i t}) w*_i
//! ```
//!
//! where `w_i = W v_i` and `r_i = λ_i` for plain flow. Newton flow
//! preconditions with `F_train⁺`, which sets every non-null rate to one.
//! Null modes (`λ_i ≤ 1e-12·λ_max`) have rate zero and keep their initial
//! value, so `W_⊥(t) = W_⊥(0)`.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{
    compute_k, compute_mixed_k, eigh, pseudoinverse, Dataset, LabeledData, Spectrum, PINV_REL_TOL,
};
use crate::error::{shape_err, Error, Result};
use crate::iterative_opt::{Differentiable, GradEval};
use crate::loss::{accuracy, mse_per_sample, Loss};
use crate::models::{RunMetadata, StepMetrics, StopReason, TrainRecord};

/// Eigenvalues below this fraction of `λ_max` are null modes.
pub const FLOW_NULL_TOL: f64 = 1e-12;

/// `f(X) = W X` with `W` of shape `k × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    w: DMatrix<f64>,
    loss: Loss,
}

impl LinearModel {
    pub fn new(w: DMatrix<f64>, loss: Loss) -> Result<Self> {
        crate::data_model::check_finite(&w, "weights")?;
        Ok(Self { w, loss })
    }

    pub fn zeros(k: usize, d: usize, loss: Loss) -> Self {
        Self {
            w: DMatrix::zeros(k, d),
            loss,
        }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn set_weights(&mut self, w: DMatrix<f64>) {
        assert_eq!(w.shape(), self.w.shape());
        self.w = w;
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }
}

impl Differentiable for LinearModel {
    fn num_params(&self) -> usize {
        self.w.len()
    }

    fn params(&self) -> DVector<f64> {
        DVector::from_column_slice(self.w.as_slice())
    }

    fn set_params(&mut self, p: &DVector<f64>) {
        self.w.as_mut_slice().copy_from_slice(p.as_slice());
    }

    fn loss_fn(&self) -> Loss {
        self.loss
    }

    fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.w * x
    }

    fn evaluate(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> GradEval {
        let predictions = self.predict(x);
        let loss = self.loss.value(&predictions, y);
        let g = self.loss.grad(&predictions, y) * x.transpose();
        GradEval {
            loss,
            grad: DVector::from_column_slice(g.as_slice()),
            predictions,
        }
    }

    fn gauss_newton_vp(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let dw = DMatrix::from_column_slice(self.w.nrows(), self.w.ncols(), v.as_slice());
        let jv = dw * x;
        let f = self.predict(x);
        let hjv = self.loss.hessian_vp(&f, y, &jv);
        let out = hjv * x.transpose();
        DVector::from_column_slice(out.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct Optimum {
    pub model: LinearModel,
    /// `F_train` was singular; null-mode components were taken from `W(0)`.
    pub used_pseudoinverse: bool,
}

fn check_xy(x: &Dataset, y: &DMatrix<f64>) -> Result<()> {
    if y.ncols() != x.sample_count() {
        return Err(shape_err(format!("{} label columns", x.sample_count()), format!("{}", y.ncols())));
    }
    Ok(())
}

fn check_w0(w0: &LinearModel, x: &Dataset, y: &DMatrix<f64>) -> Result<()> {
    if w0.input_dim() != x.feature_dim() || w0.output_dim() != y.nrows() {
        return Err(shape_err(
            format!("W(0): {}×{}", y.nrows(), x.feature_dim()),
            format!("{}×{}", w0.output_dim(), w0.input_dim()),
        ));
    }
    Ok(())
}

/// Modes of `Y Xᵀ` and of `W(0)` in the eigenbasis of `F_train`.
struct ModeProblem {
    spectrum: Spectrum,
    null: Vec<bool>,
    w_init: DMatrix<f64>,
    w_star: DMatrix<f64>,
}

fn mode_problem(x: &Dataset, y: &DMatrix<f64>, w0: &LinearModel) -> Result<ModeProblem> {
    check_xy(x, y)?;
    check_w0(w0, x, y)?;
    let spectrum = eigh(&crate::data_model::compute_f(x))?;
    let top = spectrum.max_eigenvalue().max(0.0);
    let null: Vec<bool> = spectrum.eigenvalues.iter().map(|&l| !(l > FLOW_NULL_TOL * top)).collect();
    let v = &spectrum.eigenvectors;
    let w_init = w0.weights() * v;
    let b = (y * x.values().transpose()) * v;
    let mut w_star = w_init.clone();
    for i in 0..spectrum.len() {
        if !null[i] {
            w_star.set_column(i, &(b.column(i) / spectrum.eigenvalues[i]));
        }
    }
    Ok(ModeProblem {
        spectrum,
        null,
        w_init,
        w_star,
    })
}

/// Minimum-loss weights; null-space components are inherited from `W(0)`.
pub fn solve_optimum(x_train: &Dataset, y_train: &DMatrix<f64>, w0: &LinearModel) -> Result<Optimum> {
    let p = mode_problem(x_train, y_train, w0)?;
    let w = &p.w_star * p.spectrum.eigenvectors.transpose();
    Ok(Optimum {
        model: LinearModel::new(w, w0.loss)?,
        used_pseudoinverse: p.null.iter().any(|&n| n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preconditioning {
    None,
    Newton,
}

impl Preconditioning {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preconditioning::None => "gd",
            Preconditioning::Newton => "newton",
        }
    }
}

/// Closed-form solution of (preconditioned) gradient flow.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub spectrum: Spectrum,
    pub w_init_modes: DMatrix<f64>,
    pub w_star_modes: DMatrix<f64>,
    /// Per-mode convergence rate; zero in null modes.
    pub rates: DVector<f64>,
    pub precondition: Preconditioning,
    loss: Loss,
}

pub fn build_flow(
    x_train: &Dataset,
    y_train: &DMatrix<f64>,
    w0: &LinearModel,
    precondition: Preconditioning,
) -> Result<FlowSolution> {
    let p = mode_problem(x_train, y_train, w0)?;
    let rates = DVector::from_fn(p.spectrum.len(), |i, _| match (p.null[i], precondition) {
        (true, _) => 0.0,
        (false, Preconditioning::None) => p.spectrum.eigenvalues[i],
        (false, Preconditioning::Newton) => 1.0,
    });
    Ok(FlowSolution {
        spectrum: p.spectrum,
        w_init_modes: p.w_init,
        w_star_modes: p.w_star,
        rates,
        precondition,
        loss: w0.loss,
    })
}

impl FlowSolution {
    /// Weights in the eigenbasis at time `t`.
    pub fn modes_at(&self, t: f64) -> DMatrix<f64> {
        let mut m = self.w_init_modes.clone();
        for i in 0..self.rates.len() {
            let r = self.rates[i];
            if r == 0.0 {
                continue;
            }
            let decay = (-r * t).exp();
            let rise = -(-r * t).exp_m1();
            let col = self.w_init_modes.column(i) * decay + self.w_star_modes.column(i) * rise;
            m.set_column(i, &col);
        }
        m
    }

    /// Smallest and largest non-null rate.
    pub fn rate_range(&self) -> Option<(f64, f64)> {
        let pos: Vec<f64> = self.rates.iter().copied().filter(|&r| r > 0.0).collect();
        if pos.is_empty() {
            return None;
        }
        let lo = pos.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pos.iter().copied().fold(0.0, f64::max);
        Some((lo, hi))
    }

    pub fn feature_dim(&self) -> usize {
        self.spectrum.len()
    }

    /// `Vᵀ X`, the data projected on the eigenbasis.
    pub fn project(&self, x: &Dataset) -> Result<DMatrix<f64>> {
        if x.feature_dim() != self.feature_dim() {
            return Err(shape_err(format!("d = {}", self.feature_dim()), format!("d = {}", x.feature_dim())));
        }
        Ok(self.spectrum.eigenvectors.transpose() * x.values())
    }
}

/// `W(t)` assembled from the flow modes.
pub fn flow_at(sol: &FlowSolution, t: f64) -> Result<LinearModel> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("t must be finite and non-negative, got {t}")));
    }
    let w = sol.modes_at(t) * sol.spectrum.eigenvectors.transpose();
    LinearModel::new(w, sol.loss)
}

#[derive(Debug, Clone)]
pub struct KPredictions {
    pub predictions: DMatrix<f64>,
    /// `K_train` was singular and its pseudoinverse was used.
    pub used_pseudoinverse: bool,
}

/// Converged test predictions from Gram quantities only:
/// `f*(X_test) = f⁰(X_test) + (Y − f⁰(X_train)) K_train⁺ K_train×test`.
pub fn optimum_predictions(
    x_train: &Dataset,
    y_train: &DMatrix<f64>,
    x_test: &Dataset,
    w0: &LinearModel,
) -> Result<KPredictions> {
    check_xy(x_train, y_train)?;
    check_w0(w0, x_train, y_train)?;
    let k = compute_k(x_train);
    let k_tt = compute_mixed_k(x_train, x_test)?;
    let k_pinv = pseudoinverse(&k, PINV_REL_TOL)?;
    let rank = eigh(&k)?.rank(PINV_REL_TOL);
    let f0_train = w0.predict(x_train.values());
    let f0_test = w0.predict(x_test.values());
    let predictions = f0_test + (y_train - f0_train) * k_pinv * k_tt;
    Ok(KPredictions {
        predictions,
        used_pseudoinverse: rank < k.nrows(),
    })
}

/// Log-spaced time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
}

impl TimeGrid {
    /// `[1e-3/r_max, 40/r_min]` over 200 points.
    pub fn default_for(sol: &FlowSolution) -> Self {
        let (lo, hi) = sol.rate_range().unwrap_or((1.0, 1.0));
        Self {
            t_min: 1e-3 / hi,
            t_max: 40.0 / lo,
            points: 200,
        }
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        if !(self.t_min > 0.0 && self.t_max > self.t_min && self.points >= 2) {
            return Err(Error::InvalidInput(format!("invalid time grid {self:?}")));
        }
        let (a, b) = (self.t_min.ln(), self.t_max.ln());
        let last = (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| match i {
                0 => self.t_min,
                i if i == self.points - 1 => self.t_max,
                i => (a + (b - a) * i as f64 / last).exp(),
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub t_star: f64,
    pub val_loss: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_error: Option<f64>,
    /// The best grid point was an endpoint of the grid.
    pub boundary_hit: bool,
    pub record: TrainRecord,
}

struct Projected {
    coords: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Projected {
    fn new(sol: &FlowSolution, d: &LabeledData) -> Result<Self> {
        Ok(Self {
            coords: sol.project(&d.x)?,
            y: d.y.targets().clone(),
        })
    }

    fn eval(&self, modes: &DMatrix<f64>) -> (f64, f64) {
        let pred = modes * &self.coords;
        (mse_per_sample(&pred, &self.y), 1.0 - accuracy(&pred, &self.y))
    }
}

const GOLDEN_ITERS: usize = 80;
const VAL_TIE_REL: f64 = 1e-12;

/// Picks the time minimizing validation MSE on a log grid, refined by a
/// golden-section search between the grid neighbours of the best point.
pub fn early_stop(
    sol: &FlowSolution,
    train: &LabeledData,
    val: &LabeledData,
    test: Option<&LabeledData>,
    grid: TimeGrid,
) -> Result<EarlyStop> {
    let times = grid.times()?;
    let tr = Projected::new(sol, train)?;
    let va = Projected::new(sol, val)?;
    let te = test.map(|t| Projected::new(sol, t)).transpose()?;

    let mut record = TrainRecord::default();
    let mut val_losses = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let modes = sol.modes_at(t);
        let (train_loss, train_err) = tr.eval(&modes);
        let (val_loss, _) = va.eval(&modes);
        let test_eval = te.as_ref().map(|p| p.eval(&modes));
        val_losses.push(val_loss);
        record.push(StepMetrics {
            step: i,
            time: t,
            train_loss,
            train_accuracy: Some(1.0 - train_err),
            val_loss: Some(val_loss),
            test_loss: test_eval.map(|e| e.0),
            test_error: test_eval.map(|e| e.1),
        });
    }

    // Round-off plateaus after convergence resolve to the latest time.
    let v_min = val_losses.iter().copied().fold(f64::INFINITY, f64::min);
    let v_scale = val_losses.iter().copied().fold(0.0, f64::max);
    let best = val_losses
        .iter()
        .rposition(|&v| v <= v_min + VAL_TIE_REL * v_scale)
        .expect("grid has at least two points");
    let boundary_hit = best == 0 || best == times.len() - 1;

    let val_at = |t: f64| va.eval(&sol.modes_at(t)).0;
    let mut t_star = times[best];
    let mut v_star = val_losses[best];
    if !boundary_hit {
        let (t, v) = golden_section(val_at, times[best - 1], times[best + 1]);
        if v < v_star {
            t_star = t;
            v_star = v;
        }
    }

    let modes = sol.modes_at(t_star);
    let train_loss = tr.eval(&modes).0;
    let test_eval = te.as_ref().map(|p| p.eval(&modes));
    record.finish(
        if boundary_hit {
            StopReason::Boundary
        } else {
            StopReason::EarlyStop
        },
        Some(best),
    );
    Ok(EarlyStop {
        t_star,
        val_loss: v_star,
        train_loss,
        test_loss: test_eval.map(|e| e.0),
        test_error: test_eval.map(|e| e.1),
        boundary_hit,
        record: record.with_metadata(RunMetadata {
            optimizer: sol.precondition.as_str().into(),
            dataset_size: train.x.sample_count(),
            ..RunMetadata::default()
        }),
    })
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if (b - a) <= 1e-12 * b.abs() {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
