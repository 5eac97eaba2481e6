//! Discrete-time optimizers: SGD, Newton for linear least squares,
//! regularized Gauss-Newton solved with conjugate gradients, backtracking
//! line search, and the kernel-space regularized Newton update for models
//! with fixed features.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{eigh, pseudoinverse, Dataset, PINV_REL_TOL};
use crate::error::{shape_err, Error, Result};
use crate::linear_flow::LinearModel;
use crate::loss::Loss;

/// A model whose parameters can be flattened and differentiated.
pub trait Differentiable {
    fn num_params(&self) -> usize;
    fn params(&self) -> DVector<f64>;
    fn set_params(&mut self, p: &DVector<f64>);
    fn loss_fn(&self) -> Loss;
    fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    fn evaluate(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> GradEval;
    /// Gauss-Newton product `Jᵀ H_L J v` at the current parameters.
    fn gauss_newton_vp(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64>;

    fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        self.loss_fn().value(&self.predict(x), y)
    }
}

/// Loss, flattened gradient and the predictions they were computed from.
#[derive(Debug, Clone)]
pub struct GradEval {
    pub loss: f64,
    pub grad: DVector<f64>,
    pub predictions: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSize {
    Full,
    Mini(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    /// First trial step; falls back to the optimizer's `eta` when `None`.
    pub initial_step: Option<f64>,
    pub backoff: f64,
    pub sufficient_decrease: f64,
    pub max_backoffs: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            initial_step: None,
            backoff: 0.5,
            sufficient_decrease: 1e-4,
            max_backoffs: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    /// Interpolates the preconditioner `((1−λ)B + λI)⁻¹` between
    /// Gauss-Newton (0) and gradient descent (1).
    pub reg_lambda: f64,
    /// Diagonal regularizer of the kernel-space Newton step.
    pub kernel_epsilon: f64,
    pub batch_size: BatchSize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub line_search: Option<LineSearchConfig>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            reg_lambda: 1.0,
            kernel_epsilon: 0.0,
            batch_size: BatchSize::Full,
            cg_tol: 1e-5,
            cg_max_iter: 1000,
            line_search: None,
        }
    }
}

impl OptimizerConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidInput(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.reg_lambda) {
            return Err(Error::InvalidInput(format!(
                "reg_lambda must lie in [0, 1], got {}",
                self.reg_lambda
            )));
        }
        if !(self.kernel_epsilon >= 0.0) {
            return Err(Error::InvalidInput("kernel_epsilon must be non-negative".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidInput("cg_tol must be positive".into()));
        }
        if let BatchSize::Mini(0) = self.batch_size {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if let Some(ls) = &self.line_search {
            if !(ls.backoff > 0.0 && ls.backoff < 1.0) || !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 1.0) {
                return Err(Error::InvalidInput("line search constants must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub step_size: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    pub cg_iterations: Option<usize>,
    pub cg_residual: Option<f64>,
    pub used_pseudoinverse: bool,
}

fn ensure_finite_grad(g: &DVector<f64>, loss: f64) -> Result<()> {
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite loss or gradient (loss = {loss})"),
        });
    }
    Ok(())
}

fn finish_step<M: Differentiable>(
    model: &mut M,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    eval: &GradEval,
    direction: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> Result<(f64, f64)> {
    let start = model.params();
    let step = match &cfg.line_search {
        Some(ls) => {
            let mut probe = |p: &DVector<f64>| {
                model.set_params(p);
                model.loss(x, y)
            };
            let s = backtracking_line_search(&mut probe, &start, direction, &eval.grad, eval.loss, cfg.eta, ls);
            if s.is_err() {
                model.set_params(&start);
            }
            s?
        }
        None => cfg.eta,
    };
    model.set_params(&(start + direction * step));
    let after = model.loss(x, y);
    if !after.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("loss became {after} after a step of size {step:e}"),
        });
    }
    Ok((step, after))
}

/// `θ ← θ − η ∂L/∂θ` on one batch. For a dense first layer `Z = W X` the
/// gradient block is `(∂L/∂Z) Xᵀ`, so the update is exactly
/// `W ← W − η (∂L/∂Z) X_bᵀ`.
pub fn sgd_step<M: Differentiable>(
    model: &mut M,
    x_b: &DMatrix<f64>,
    y_b: &DMatrix<f64>,
    cfg: &OptimizerConfig,
) -> Result<StepResult> {
    let eval = model.evaluate(x_b, y_b);
    sgd_step_from(model, x_b, y_b, &eval, cfg)
}

/// [`sgd_step`] reusing an evaluation already computed at the current parameters.
pub fn sgd_step_from<M: Differentiable>(
    model: &mut M,
    x_b: &DMatrix<f64>,
    y_b: &DMatrix<f64>,
    eval: &GradEval,
    cfg: &OptimizerConfig,
) -> Result<StepResult> {
    ensure_finite_grad(&eval.grad, eval.loss)?;
    let direction = -&eval.grad;
    let (step, after) = finish_step(model, x_b, y_b, eval, &direction, cfg)?;
    Ok(StepResult {
        step_size: step,
        loss_before: eval.loss,
        loss_after: after,
        grad_norm: eval.grad.norm(),
        cg_iterations: None,
        cg_residual: None,
        used_pseudoinverse: false,
    })
}

/// Newton step for a linear least-squares model, `W ← W − η (∂L/∂W) H⁺` with
/// `H` the Hessian (`F_train`, scaled by the loss reduction).
pub fn newton_step(model: &mut LinearModel, x: &Dataset, y: &DMatrix<f64>, cfg: &OptimizerConfig) -> Result<StepResult> {
    if model.loss_fn().head != crate::loss::OutputHead::LinearMse {
        return Err(Error::InvalidInput("newton_step requires the MSE head".into()));
    }
    let xv = x.values();
    if xv.nrows() != model.input_dim() || y.nrows() != model.output_dim() || y.ncols() != xv.ncols() {
        return Err(shape_err(
            format!("X: {}×n, Y: {}×n", model.input_dim(), model.output_dim()),
            format!("X: {}×{}, Y: {}×{}", xv.nrows(), xv.ncols(), y.nrows(), y.ncols()),
        ));
    }
    let loss = model.loss_fn();
    let pred = model.weights() * xv;
    let before = loss.value(&pred, y);
    let g_out = loss.grad(&pred, y);
    let grad_w = &g_out * xv.transpose();
    let scale = match loss.reduction {
        crate::loss::Reduction::Sum => 1.0,
        crate::loss::Reduction::Mean => 1.0 / xv.ncols() as f64,
    };
    let hessian = crate::data_model::compute_f(x) * scale;
    let h_pinv = pseudoinverse(&hessian, PINV_REL_TOL)?;
    let rank = eigh(&hessian)?.rank(PINV_REL_TOL);
    let w = model.weights() - (&grad_w * &h_pinv) * cfg.eta;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite weights after Newton step".into(),
        });
    }
    model.set_weights(w);
    let after = model.loss(xv, y);
    Ok(StepResult {
        step_size: cfg.eta,
        loss_before: before,
        loss_after: after,
        grad_norm: grad_w.norm(),
        cg_iterations: None,
        cg_residual: None,
        used_pseudoinverse: rank < hessian.nrows(),
    })
}

/// Solves `((1−λ)B + λI) p = ∇L` matrix-free with conjugate gradients and
/// steps along `−p`.
pub fn regularized_gn_step<M: Differentiable>(
    model: &mut M,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &OptimizerConfig,
) -> Result<StepResult> {
    let eval = model.evaluate(x, y);
    regularized_gn_step_from(model, x, y, &eval, cfg)
}

pub fn regularized_gn_step_from<M: Differentiable>(
    model: &mut M,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    eval: &GradEval,
    cfg: &OptimizerConfig,
) -> Result<StepResult> {
    ensure_finite_grad(&eval.grad, eval.loss)?;
    let sol = regularized_gn_direction(model, x, y, &eval.grad, cfg)?;
    let direction = -&sol.x;
    let (step, after) = finish_step(model, x, y, eval, &direction, cfg)?;
    Ok(StepResult {
        step_size: step,
        loss_before: eval.loss,
        loss_after: after,
        grad_norm: eval.grad.norm(),
        cg_iterations: Some(sol.iterations),
        cg_residual: Some(sol.residual),
        used_pseudoinverse: false,
    })
}

/// The (un-negated) regularized Gauss-Newton direction `p`.
pub fn regularized_gn_direction<M: Differentiable>(
    model: &M,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    grad: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> Result<CgSolution> {
    cfg.validate()?;
    let lambda = cfg.reg_lambda;
    if lambda == 1.0 {
        return conjugate_gradient_solve(|v| v.clone(), grad, cfg.cg_tol, cfg.cg_max_iter);
    }
    let apply = |v: &DVector<f64>| model.gauss_newton_vp(x, y, v) * (1.0 - lambda) + v * lambda;
    conjugate_gradient_solve(apply, grad, cfg.cg_tol, cfg.cg_max_iter)
}

/// Dense `((1−λ)B + λI)⁻¹` through the eigendecomposition of `B`:
/// `Σ_i e_i e_iᵀ / ((1−λ)μ_i + λ)`. Modes whose denominator vanishes are
/// dropped (pseudoinverse).
pub fn regularized_preconditioner(b: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let s = eigh(b)?;
    let top = s.eigenvalues.iter().fold(0.0_f64, |a, &m| a.max(((1.0 - lambda) * m + lambda).abs()));
    let mut out = DMatrix::zeros(b.nrows(), b.ncols());
    for (i, &mu) in s.eigenvalues.iter().enumerate() {
        let denom = (1.0 - lambda) * mu + lambda;
        if denom.abs() > PINV_REL_TOL * top {
            let e = s.eigenvectors.column(i);
            out += (e / denom) * e.transpose();
        }
    }
    Ok(out)
}

/// Materializes the Gauss-Newton matrix of `model` column by column.
pub fn dense_gauss_newton<M: Differentiable>(model: &M, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let p = model.num_params();
    let mut b = DMatrix::zeros(p, p);
    let mut e = DVector::zeros(p);
    for j in 0..p {
        e[j] = 1.0;
        b.set_column(j, &model.gauss_newton_vp(x, y, &e));
        e[j] = 0.0;
    }
    crate::data_model::symmetrize(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Euclidean norm of the final residual `b − A x`.
    pub residual: f64,
}

/// Conjugate gradients for a symmetric positive (semi)definite operator.
/// Stops when `‖b − A x‖₂ ≤ tol`.
pub fn conjugate_gradient_solve<F>(apply_a: F, b: &DVector<f64>, tol: f64, max_iter: usize) -> Result<CgSolution>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut rr = r.norm_squared();
    if rr.sqrt() <= tol {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual: rr.sqrt(),
        });
    }
    let mut p = r.clone();
    for it in 1..=max_iter {
        let ap = apply_a(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::NotConverged {
                iterations: it,
                residual: rr.sqrt(),
            });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.norm_squared();
        if rr_new.sqrt() <= tol {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual: rr_new.sqrt(),
            });
        }
        let beta = rr_new / rr;
        p = &r + &p * beta;
        rr = rr_new;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}

/// Largest step in `{s₀, s₀ρ, s₀ρ², …}` with
/// `L(p + s·dir) ≤ L(p) + c·s·⟨∇L, dir⟩`.
pub fn backtracking_line_search<F>(
    loss_fn: &mut F,
    params: &DVector<f64>,
    direction: &DVector<f64>,
    grad: &DVector<f64>,
    loss0: f64,
    eta: f64,
    cfg: &LineSearchConfig,
) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let slope = grad.dot(direction);
    if !(slope < 0.0) {
        return Err(Error::NotDescent(slope));
    }
    let mut step = cfg.initial_step.unwrap_or(eta);
    for _ in 0..=cfg.max_backoffs {
        let trial = loss_fn(&(params + direction * step));
        if trial.is_finite() && trial <= loss0 + cfg.sufficient_decrease * step * slope {
            return Ok(step);
        }
        step *= cfg.backoff;
    }
    Err(Error::LineSearchStall {
        backoffs: cfg.max_backoffs,
        last_step: step / cfg.backoff,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelStep {
    pub f_train: DMatrix<f64>,
    pub f_test: Option<DMatrix<f64>>,
}

/// Function-space regularized Newton update for a model with fixed features:
/// `f(x) ← f(x) − η Σ_ab Θ(x, x_a) (εI + Θ)⁻¹_ab ∂L/∂f_b`.
///
/// `theta_train_test` is the `n_train × n_test` block `Θ(x_train, x_test)`.
pub fn kernel_newton_step(
    f_train: &DMatrix<f64>,
    f_test: Option<&DMatrix<f64>>,
    theta_train: &DMatrix<f64>,
    theta_train_test: Option<&DMatrix<f64>>,
    y_train: &DMatrix<f64>,
    loss: &Loss,
    cfg: &OptimizerConfig,
) -> Result<KernelStep> {
    let n = f_train.ncols();
    if theta_train.shape() != (n, n) || y_train.shape() != f_train.shape() {
        return Err(shape_err(format!("Θ: {n}×{n}"), format!("{:?}", theta_train.shape())));
    }
    let eps = cfg.kernel_epsilon;
    let a = theta_train + DMatrix::<f64>::identity(n, n) * eps;
    let s = eigh(&a)?;
    let top = s.eigenvalues.amax();
    let bottom = s.eigenvalues.min();
    if !(top > 0.0) || bottom <= 1e-12 * top {
        return Err(Error::SingularKernel);
    }
    let v = &s.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&s.eigenvalues.map(|l| 1.0 / l)) * v.transpose();
    let g = loss.grad(f_train, y_train);
    let coeff = g * inv;
    let new_train = f_train - (&coeff * theta_train) * cfg.eta;
    let new_test = match (f_test, theta_train_test) {
        (Some(ft), Some(tt)) => {
            if tt.nrows() != n || tt.ncols() != ft.ncols() {
                return Err(shape_err(format!("Θ_train×test: {n}×{}", ft.ncols()), format!("{:?}", tt.shape())));
            }
            Some(ft - (&coeff * tt) * cfg.eta)
        }
        (None, None) => None,
        _ => return Err(Error::InvalidInput("f_test and Θ_train×test must be given together".into())),
    };
    Ok(KernelStep {
        f_train: new_train,
        f_test: new_test,
    })
}
