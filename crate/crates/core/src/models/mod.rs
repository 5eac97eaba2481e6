//! Multilayer perceptron with a dense, bias-free first layer `Z = W X`.
//!
//! Layer `l` maps `a_l` to `z_l = W_l a_l (+ b_l)`; hidden layers apply the
//! activation, the last layer is the output head. Layer 0 never has a bias,
//! so the first-layer activations are exactly `Z = W_0 X`.

mod checkpoint;
mod record;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use record::{RunMetadata, StepMetrics, StopReason, TrainRecord};
pub use train::{train_to_cutoff, BatchSchedule, OptimizerKind, TrainConfig, DEFAULT_CUTOFF};

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::iterative_opt::{Differentiable, GradEval};
use crate::loss::Loss;
use crate::random::{gaussian_matrix, rng};

/// Default first-layer (and deeper-layer) init variance for MLP runs.
pub const DEFAULT_INIT_VARIANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => z.map(f64::tanh),
        }
    }

    fn derivative(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => z.map(|v| {
                let t = v.tanh();
                1.0 - t * t
            }),
        }
    }

    /// Lipschitz constant of the activation.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }
}

/// Per-layer init variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Same variance in every layer.
    Constant(f64),
    /// `gain / fan_in` in every layer.
    FanIn(f64),
}

impl InitScheme {
    fn variance(&self, fan_in: usize) -> f64 {
        match *self {
            InitScheme::Constant(v) => v,
            InitScheme::FanIn(g) => g / fan_in as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<Option<DVector<f64>>>,
    activation: Activation,
    loss: Loss,
}

/// Activations saved by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Cache {
    /// Layer inputs `a_l`; `inputs[0]` is `X`.
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activations `z_l`; `pre[0]` is the first-layer `Z = W X`.
    pub pre: Vec<DMatrix<f64>>,
}

impl Cache {
    pub fn first_layer(&self) -> &DMatrix<f64> {
        &self.pre[0]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<Option<DVector<f64>>>,
    /// `∂L/∂Z` for the first layer.
    pub first_layer_dz: DMatrix<f64>,
}

/// Samples every layer element-wise from `N(0, variance)`. Row distributions
/// of the first layer are therefore invariant under `W ↦ W R` for orthogonal `R`.
pub fn init_isotropic(layer_sizes: &[usize], variance: f64, seed: u64) -> Result<Mlp> {
    Mlp::init(layer_sizes, InitScheme::Constant(variance), seed)
}

impl Mlp {
    pub fn init(layer_sizes: &[usize], scheme: InitScheme, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut r = rng(seed);
        for w in layer_sizes.windows(2) {
            let var = scheme.variance(w[0]);
            if !(var >= 0.0 && var.is_finite()) {
                return Err(Error::InvalidInput(format!("variance must be non-negative, got {var}")));
            }
            weights.push(gaussian_matrix(&mut r, w[1], w[0], var.sqrt()));
        }
        Ok(Self {
            sizes: layer_sizes.to_vec(),
            biases: vec![None; weights.len()],
            weights,
            activation: Activation::Relu,
            loss: Loss::MEAN_MSE,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    /// Adds zero-initialized biases to every layer after the first.
    pub fn with_deeper_biases(mut self) -> Self {
        for (l, b) in self.biases.iter_mut().enumerate().skip(1) {
            *b = Some(DVector::zeros(self.sizes[l + 1]));
        }
        self
    }

    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<Option<DVector<f64>>>,
        activation: Activation,
        loss: Loss,
    ) -> Result<Self> {
        if weights.is_empty() || biases.len() != weights.len() {
            return Err(Error::InvalidInput("need one bias slot per layer".into()));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (l, w) in weights.iter().enumerate() {
            if w.ncols() != *sizes.last().unwrap() {
                return Err(shape_err(format!("layer {l} with {} inputs", sizes.last().unwrap()), format!("{}", w.ncols())));
            }
            crate::data_model::check_finite(w, "weights")?;
            sizes.push(w.nrows());
        }
        if biases[0].is_some() {
            return Err(Error::InvalidInput("the first layer has no bias".into()));
        }
        for (l, b) in biases.iter().enumerate() {
            if let Some(b) = b {
                if b.len() != sizes[l + 1] {
                    return Err(shape_err(format!("bias {l} of length {}", sizes[l + 1]), format!("{}", b.len())));
                }
            }
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            activation,
            loss,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Option<DVector<f64>>] {
        &self.biases
    }

    pub fn first_layer(&self) -> &DMatrix<f64> {
        &self.weights[0]
    }

    pub fn set_first_layer(&mut self, w: DMatrix<f64>) -> Result<()> {
        if w.shape() != self.weights[0].shape() {
            return Err(shape_err(format!("{:?}", self.weights[0].shape()), format!("{:?}", w.shape())));
        }
        self.weights[0] = w;
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Flattened parameters after the first layer (the `θ` of `g_θ(Z)`).
    pub fn deeper_params(&self) -> DVector<f64> {
        let p = self.params();
        let skip = self.weights[0].len();
        DVector::from_column_slice(&p.as_slice()[skip..])
    }

    /// Product of layer spectral norms: a Lipschitz bound of `X ↦ f(X)`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| crate::data_model::singular_values(w).map_or(f64::INFINITY, |s| s.max()))
            .product::<f64>()
            * self.activation.lipschitz().powi(self.weights.len() as i32 - 1)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
        if x.nrows() != self.input_dim() {
            return Err(shape_err(format!("d = {}", self.input_dim()), format!("d = {}", x.nrows())));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut a = x.clone();
        for l in 0..layers {
            let mut z = &self.weights[l] * &a;
            if let Some(b) = &self.biases[l] {
                for mut col in z.column_iter_mut() {
                    col += b;
                }
            }
            inputs.push(a);
            a = if l + 1 < layers { self.activation.apply(&z) } else { z.clone() };
            pre.push(z);
        }
        (a, Cache { inputs, pre })
    }

    /// Backpropagates `∂L/∂f` through the cached forward pass.
    pub fn backward(&self, cache: &Cache, loss_grad: &DMatrix<f64>) -> Gradients {
        let layers = self.weights.len();
        let mut weights = vec![DMatrix::zeros(0, 0); layers];
        let mut biases = vec![None; layers];
        let mut dz = loss_grad.clone();
        for l in (0..layers).rev() {
            weights[l] = &dz * cache.inputs[l].transpose();
            if self.biases[l].is_some() {
                biases[l] = Some(dz.column_sum());
            }
            if l == 0 {
                break;
            }
            let da = self.weights[l].transpose() * &dz;
            dz = da.component_mul(&self.activation.derivative(&cache.pre[l - 1]));
        }
        Gradients {
            weights,
            biases,
            first_layer_dz: dz,
        }
    }

    fn flatten(&self, weights: &[DMatrix<f64>], biases: &[Option<DVector<f64>>]) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in weights {
            out.extend_from_slice(w.as_slice());
        }
        for (own, b) in self.biases.iter().zip(biases) {
            if own.is_some() {
                out.extend_from_slice(b.as_ref().expect("bias gradient present").as_slice());
            }
        }
        DVector::from_vec(out)
    }

    fn unflatten(&self, p: &[f64]) -> (Vec<DMatrix<f64>>, Vec<Option<DVector<f64>>>) {
        let mut offset = 0;
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let m = DMatrix::from_column_slice(w.nrows(), w.ncols(), &p[offset..offset + w.len()]);
                offset += w.len();
                m
            })
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|b| {
                b.as_ref().map(|b| {
                    let v = DVector::from_column_slice(&p[offset..offset + b.len()]);
                    offset += b.len();
                    v
                })
            })
            .collect();
        (weights, biases)
    }

    /// Directional derivative of the outputs, `J v`.
    fn jvp(&self, cache: &Cache, v: &DVector<f64>) -> DMatrix<f64> {
        let (dw, db) = self.unflatten(v.as_slice());
        let layers = self.weights.len();
        let mut dz = &dw[0] * &cache.inputs[0];
        for l in 1..layers {
            let da = dz.component_mul(&self.activation.derivative(&cache.pre[l - 1]));
            let mut next = &dw[l] * &cache.inputs[l] + &self.weights[l] * da;
            if let Some(b) = &db[l] {
                for mut col in next.column_iter_mut() {
                    col += b;
                }
            }
            dz = next;
        }
        dz
    }
}

impl Differentiable for Mlp {
    fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().flatten().map(|b| b.len()).sum::<usize>()
    }

    fn params(&self) -> DVector<f64> {
        self.flatten(&self.weights, &self.biases)
    }

    fn set_params(&mut self, p: &DVector<f64>) {
        let (w, b) = self.unflatten(p.as_slice());
        self.weights = w;
        self.biases = b;
    }

    fn loss_fn(&self) -> Loss {
        self.loss
    }

    fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_unchecked(x).0
    }

    fn evaluate(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> GradEval {
        let (out, cache) = self.forward_unchecked(x);
        let loss = self.loss.value(&out, y);
        let g = self.backward(&cache, &self.loss.grad(&out, y));
        GradEval {
            loss,
            grad: self.flatten(&g.weights, &g.biases),
            predictions: out,
        }
    }

    fn gauss_newton_vp(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (out, cache) = self.forward_unchecked(x);
        let jv = self.jvp(&cache, v);
        let hjv = self.loss.hessian_vp(&out, y, &jv);
        let g = self.backward(&cache, &hjv);
        self.flatten(&g.weights, &g.biases)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::LabelSet;
    use crate::linear_flow::LinearModel;

    fn finite_difference(m: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
        let p0 = m.params();
        let mut probe = m.clone();
        DVector::from_fn(p0.len(), |i, _| {
            let h = 1e-5 * (1.0 + p0[i].abs());
            let mut p = p0.clone();
            p[i] += h;
            probe.set_params(&p);
            let up = Differentiable::loss(&probe, x, y);
            p[i] -= 2.0 * h;
            probe.set_params(&p);
            let down = Differentiable::loss(&probe, x, y);
            (up - down) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(31);
        let x = gaussian_matrix(&mut r, 4, 6, 1.0);
        let y = LabelSet::one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        for (act, loss) in [
            (Activation::Tanh, Loss::MEAN_MSE),
            (Activation::Tanh, Loss::MEAN_XENT),
            (Activation::Relu, Loss::SUM_MSE),
        ] {
            let m = Mlp::init(&[4, 5, 3], InitScheme::FanIn(1.0), 7)
                .unwrap()
                .with_activation(act)
                .with_loss(loss)
                .with_deeper_biases();
            let g = m.evaluate(&x, y.targets()).grad;
            let fd = finite_difference(&m, &x, y.targets());
            let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-4, "{act:?} {loss:?}: {rel}");
        }
    }

    #[test]
    fn zero_weights_give_zero_predictions() {
        let m = init_isotropic(&[3, 4, 2], 0.0, 1).unwrap();
        assert!(m.weights().iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert_eq!(m.predict(&DMatrix::from_element(3, 2, 1.0)), DMatrix::zeros(2, 2));
    }

    #[test]
    fn single_layer_equals_linear_model() {
        let mut r = rng(32);
        let m = init_isotropic(&[3, 2], 1.0, 5).unwrap();
        let lin = LinearModel::new(m.first_layer().clone(), Loss::MEAN_MSE).unwrap();
        let x = gaussian_matrix(&mut r, 3, 4, 1.0);
        assert_eq!(m.predict(&x), lin.predict(&x));
    }

    #[test]
    fn first_layer_gradient_is_dz_xt() {
        let mut r = rng(33);
        let x = gaussian_matrix(&mut r, 5, 7, 1.0);
        let y = gaussian_matrix(&mut r, 2, 7, 1.0);
        let m = Mlp::init(&[5, 6, 2], InitScheme::FanIn(2.0), 3).unwrap();
        let (out, cache) = m.forward(&x).unwrap();
        let g = m.backward(&cache, &m.loss().grad(&out, &y));
        assert_eq!(g.weights[0], &g.first_layer_dz * x.transpose());
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let mut r = rng(34);
        let x = gaussian_matrix(&mut r, 3, 4, 1.0);
        let m = Mlp::init(&[3, 4, 2], InitScheme::FanIn(1.0), 9).unwrap();
        let y = m.predict(&x);
        assert_eq!(m.evaluate(&x, &y).grad.amax(), 0.0);
    }

    #[test]
    fn gauss_newton_matches_dense_jacobian() {
        let mut r = rng(35);
        let x = gaussian_matrix(&mut r, 3, 4, 1.0);
        let y = LabelSet::one_hot(&[0, 1, 1, 0], 2).unwrap();
        let m = Mlp::init(&[3, 4, 2], InitScheme::FanIn(1.0), 2)
            .unwrap()
            .with_activation(Activation::Tanh)
            .with_deeper_biases();
        // finite-difference Jacobian of the flattened outputs
        let p0 = m.params();
        let mut probe = m.clone();
        let outs = m.predict(&x).len();
        let mut jac = DMatrix::zeros(outs, p0.len());
        for i in 0..p0.len() {
            let h = 1e-6;
            let mut p = p0.clone();
            p[i] += h;
            probe.set_params(&p);
            let up = probe.predict(&x);
            p[i] -= 2.0 * h;
            probe.set_params(&p);
            let down = probe.predict(&x);
            jac.set_column(i, &DVector::from_column_slice(((up - down) / (2.0 * h)).as_slice()));
        }
        let dense = jac.transpose() * &jac / 4.0; // mean-reduced MSE has H_L = I/n
        let v = DVector::from_fn(p0.len(), |i, _| (i as f64 * 0.37).sin());
        let bv = m.gauss_newton_vp(&x, y.targets(), &v);
        assert!((bv - dense * v).amax() < 1e-6);
    }

    #[test]
    fn lipschitz_bound_holds() {
        let mut r = rng(36);
        let m = Mlp::init(&[4, 8, 8, 3], InitScheme::FanIn(2.0), 4).unwrap();
        let bound = m.lipschitz_bound();
        for _ in 0..20 {
            let x = gaussian_matrix(&mut r, 4, 1, 1.0);
            let d = gaussian_matrix(&mut r, 4, 1, 0.1);
            let diff = (m.predict(&(&x + &d)) - m.predict(&x)).norm();
            assert!(diff <= bound * d.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn isotropic_rows_second_moment() {
        let m = init_isotropic(&[4, 10_000, 1], 0.5, 11).unwrap();
        let w = m.first_layer();
        let s = w.transpose() * w / w.nrows() as f64;
        let target = DMatrix::<f64>::identity(4, 4) * 0.5;
        assert!((s - target).amax() <= 0.05 * 0.5);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::init(&[3], InitScheme::Constant(1.0), 0).is_err());
        let m = init_isotropic(&[3, 2], 1.0, 0).unwrap();
        assert!(m.forward(&DMatrix::zeros(4, 1)).is_err());
    }
}
