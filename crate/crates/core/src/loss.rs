//! Output heads and their losses. Predictions and targets are `k × n`.

use nalgebra::DMatrix;

use crate::data_model::argmax_columns;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputHead {
    /// Identity output, `L = ½‖f − Y‖²`.
    LinearMse,
    /// Softmax followed by cross entropy against (soft) targets.
    SoftmaxXent,
}

impl OutputHead {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputHead::LinearMse => "linear_mse",
            OutputHead::SoftmaxXent => "softmax_xent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Loss {
    pub head: OutputHead,
    pub reduction: Reduction,
}

impl Loss {
    pub const SUM_MSE: Loss = Loss {
        head: OutputHead::LinearMse,
        reduction: Reduction::Sum,
    };
    pub const MEAN_MSE: Loss = Loss {
        head: OutputHead::LinearMse,
        reduction: Reduction::Mean,
    };
    pub const MEAN_XENT: Loss = Loss {
        head: OutputHead::SoftmaxXent,
        reduction: Reduction::Mean,
    };

    fn scale(&self, n: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }

    pub fn value(&self, f: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let s = self.scale(f.ncols());
        match self.head {
            OutputHead::LinearMse => 0.5 * (f - y).norm_squared() * s,
            OutputHead::SoftmaxXent => {
                let mut total = 0.0;
                for (fc, yc) in f.column_iter().zip(y.column_iter()) {
                    let m = fc.max();
                    let lse = m + fc.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    total += yc.iter().zip(fc.iter()).map(|(t, v)| t * (lse - v)).sum::<f64>();
                }
                total * s
            }
        }
    }

    /// `∂L/∂f`.
    pub fn grad(&self, f: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.scale(f.ncols());
        match self.head {
            OutputHead::LinearMse => (f - y) * s,
            OutputHead::SoftmaxXent => {
                let mut g = softmax(f);
                for (mut gc, yc) in g.column_iter_mut().zip(y.column_iter()) {
                    let total: f64 = yc.sum();
                    // d/df of Σ_c y_c (lse − f_c) = (Σ y) p − y
                    gc *= total;
                    gc -= &yc;
                }
                g * s
            }
        }
    }

    /// Output-space Hessian applied to `v` (`k × n`); the Gauss-Newton
    /// curvature block. For cross entropy this is `diag(p) − p pᵀ` per sample.
    pub fn hessian_vp(&self, f: &DMatrix<f64>, y: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.scale(f.ncols());
        match self.head {
            OutputHead::LinearMse => v * s,
            OutputHead::SoftmaxXent => {
                let p = softmax(f);
                let mut out = DMatrix::zeros(v.nrows(), v.ncols());
                for j in 0..v.ncols() {
                    let total: f64 = y.column(j).sum();
                    let pc = p.column(j);
                    let vc = v.column(j);
                    let pv = pc.dot(&vc);
                    for i in 0..v.nrows() {
                        out[(i, j)] = total * (pc[i] * vc[i] - pc[i] * pv) * s;
                    }
                }
                out
            }
        }
    }
}

pub fn softmax(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = f.clone();
    for mut col in p.column_iter_mut() {
        let m = col.max();
        col.apply(|v| *v = (*v - m).exp());
        let z = col.sum();
        col /= z;
    }
    p
}

/// Reporting loss: `½‖f − Y‖²` summed over outputs, averaged over samples.
pub fn mse_per_sample(f: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    Loss::MEAN_MSE.value(f, y)
}

/// Fraction of columns whose argmax (ties to lowest index) matches the target's.
pub fn accuracy(f: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let pred = argmax_columns(f);
    let truth = argmax_columns(y);
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_matrix, rng};

    fn central_diff(loss: &Loss, f: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(f.nrows(), f.ncols());
        for i in 0..f.len() {
            let h = 1e-6 * (1.0 + f[i].abs());
            let mut fp = f.clone();
            fp[i] += h;
            let mut fm = f.clone();
            fm[i] -= h;
            g[i] = (loss.value(&fp, y) - loss.value(&fm, y)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(1);
        let f = gaussian_matrix(&mut r, 4, 5, 1.0);
        let y = crate::data_model::LabelSet::one_hot(&[0, 3, 1, 2, 3], 4).unwrap();
        for loss in [Loss::SUM_MSE, Loss::MEAN_MSE, Loss::MEAN_XENT] {
            let g = loss.grad(&f, y.targets());
            let fd = central_diff(&loss, &f, y.targets());
            assert!((g - fd).amax() < 1e-7, "{loss:?}");
        }
    }

    #[test]
    fn xent_hessian_matches_gradient_differences() {
        let mut r = rng(2);
        let f = gaussian_matrix(&mut r, 3, 2, 1.0);
        let y = crate::data_model::LabelSet::one_hot(&[2, 0], 3).unwrap();
        let v = gaussian_matrix(&mut r, 3, 2, 1.0);
        let h = 1e-6;
        let fd = (Loss::MEAN_XENT.grad(&(&f + &v * h), y.targets())
            - Loss::MEAN_XENT.grad(&(&f - &v * h), y.targets()))
            / (2.0 * h);
        let hv = Loss::MEAN_XENT.hessian_vp(&f, y.targets(), &v);
        assert!((hv - fd).amax() < 1e-7);
    }

    #[test]
    fn zero_predictions_against_one_hot_cost_half() {
        let y = crate::data_model::LabelSet::one_hot(&[0, 1, 2, 9], 10).unwrap();
        assert_eq!(mse_per_sample(&DMatrix::zeros(10, 4), y.targets()), 0.5);
        assert_eq!(accuracy(&DMatrix::zeros(10, 4), y.targets()), 0.25);
    }
}
