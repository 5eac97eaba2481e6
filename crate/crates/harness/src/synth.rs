//! Gaussian synthetic data with a power-law spectrum and a linear teacher.
//!
//! Samples are drawn as `x = Q Λ^{1/2} g` with `g ~ N(0, I)`, a seeded random
//! orthogonal basis `Q`, and eigenvalues `λ_j ∝ j^{−α}` normalized to mean 1.
//! The teacher reads only the top `⌈d/4⌉` modes, so large principal
//! components carry the signal and the tail carries none.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use whitebench_core::data_model::{argmax_columns, Dataset, LabelEncoding, LabelSet, LabeledData, SplitTag};
use whitebench_core::random::{gaussian_matrix, random_orthogonal, rng};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumKind {
    PowerLaw(f64),
    Flat,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Teacher {
    Linear(u64),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub spectrum: SpectrumKind,
    pub teacher: Teacher,
    pub label_noise: f64,
    /// Number of classes; `1` produces real-valued targets.
    pub classes: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.d == 0 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 || self.classes == 0 {
            return bad(format!("all counts must be ≥ 1: {self:?}"));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return bad(format!("label_noise must be ≥ 0, got {}", self.label_noise));
        }
        match &self.spectrum {
            SpectrumKind::PowerLaw(a) if !(*a >= 0.0 && a.is_finite()) => bad(format!("alpha must be ≥ 0, got {a}")),
            SpectrumKind::Custom(v) if v.len() != self.d => {
                bad(format!("custom spectrum has {} values for d = {}", v.len(), self.d))
            }
            SpectrumKind::Custom(v) if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || v.iter().all(|x| *x == 0.0) => {
                bad("custom spectrum must be non-negative and not all zero".into())
            }
            _ => Ok(()),
        }
    }

    /// Covariance eigenvalues, descending order not enforced for custom lists.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let raw: Vec<f64> = match &self.spectrum {
            SpectrumKind::PowerLaw(a) => (1..=self.d).map(|j| (j as f64).powf(-a)).collect(),
            SpectrumKind::Flat => vec![1.0; self.d],
            SpectrumKind::Custom(v) => v.clone(),
        };
        let mean = raw.iter().sum::<f64>() / self.d as f64;
        raw.into_iter().map(|l| l / mean).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledData,
    pub val: LabeledData,
    pub test: LabeledData,
}

/// Teacher matrix acting on mode coordinates `Qᵀx`. When `k ≤ m` its rows are
/// chosen so the noiseless logits are iid `N(0, 1)`, which balances classes.
/// With more classes than teacher modes the logits are correlated and some
/// classes are rare.
fn teacher_matrix(seed: u64, k: usize, lambdas: &[f64]) -> DMatrix<f64> {
    let d = lambdas.len();
    let m = d.div_ceil(4);
    let mut r = rng(seed);
    let t = gaussian_matrix(&mut r, k, m, 1.0);
    let sqrt_l = DVector::from_iterator(m, lambdas[..m].iter().map(|l| l.sqrt()));
    let mut a = t.clone();
    for (j, mut col) in a.column_iter_mut().enumerate() {
        col *= sqrt_l[j];
    }
    let a = if k <= m {
        a.transpose().qr().q().transpose()
    } else {
        a / (m as f64).sqrt()
    };
    let mut full = DMatrix::zeros(k, d);
    for j in 0..m {
        if sqrt_l[j] > 0.0 {
            full.set_column(j, &(a.column(j) / sqrt_l[j]));
        }
    }
    full
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let lambdas = spec.eigenvalues();
    let n = spec.n_train + spec.n_val + spec.n_test;
    let mut r = rng(spec.seed);
    let q = random_orthogonal(&mut r, spec.d);
    let mut modes = gaussian_matrix(&mut r, spec.d, n, 1.0);
    for (j, mut row) in modes.row_iter_mut().enumerate() {
        row *= lambdas[j].sqrt();
    }
    let x = &q * &modes;

    let k = spec.classes;
    let logits = match spec.teacher {
        Teacher::Linear(seed) => teacher_matrix(seed, k, &lambdas) * &modes,
        Teacher::None => gaussian_matrix(&mut r, k, n, 1.0),
    };
    let noisy = logits + gaussian_matrix(&mut r, k, n, 1.0) * spec.label_noise;

    let labels = |from: usize, len: usize| -> Result<LabelSet> {
        let block = noisy.columns(from, len).into_owned();
        Ok(if k == 1 {
            LabelSet::new(block, LabelEncoding::RealValued)?
        } else {
            LabelSet::one_hot(&argmax_columns(&block), k)?
        })
    };
    let part = |from: usize, len: usize, split: SplitTag| -> Result<LabeledData> {
        let ds = Dataset::with_id(x.columns(from, len).into_owned(), split, format!("{}-{}", split.as_str(), spec.seed))?;
        Ok(LabeledData::new(ds, labels(from, len)?)?)
    };
    Ok(Splits {
        train: part(0, spec.n_train, SplitTag::Train)?,
        val: part(spec.n_train, spec.n_val, SplitTag::Validation)?,
        test: part(spec.n_train + spec.n_val, spec.n_test, SplitTag::Test)?,
    })
}

/// Extra unlabeled samples from the same distribution as `spec` (fit set for
/// distribution-scope whitening). Uses an independent stream.
pub fn sample_distribution(spec: &SyntheticSpec, n: usize, stream: u64) -> Result<Dataset> {
    spec.validate()?;
    let lambdas = spec.eigenvalues();
    let mut r = rng(spec.seed);
    let q = random_orthogonal(&mut r, spec.d);
    let mut r2 = rng(spec.seed ^ stream.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15);
    let mut modes = gaussian_matrix(&mut r2, spec.d, n, 1.0);
    for (j, mut row) in modes.row_iter_mut().enumerate() {
        row *= lambdas[j].sqrt();
    }
    Ok(Dataset::with_id(q * modes, SplitTag::Combined, format!("distribution-{}", spec.seed))?)
}

/// Uniformly random class labels, for label-independence checks.
pub fn random_classes(seed: u64, n: usize, k: usize) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use whitebench_core::data_model::{compute_f, eigh};
    use whitebench_core::linear_flow::{solve_optimum, LinearModel};
    use whitebench_core::loss::{mse_per_sample, Loss};

    fn spec(d: usize, n: usize, spectrum: SpectrumKind) -> SyntheticSpec {
        SyntheticSpec {
            d,
            n_train: n,
            n_val: 10,
            n_test: 10,
            spectrum,
            teacher: Teacher::Linear(3),
            label_noise: 0.0,
            classes: 10,
            seed: 1,
        }
    }

    #[test]
    fn flat_spectrum_has_unit_mean_eigenvalue() {
        let s = synthesize(&spec(16, 4000, SpectrumKind::Flat)).unwrap();
        let f = compute_f(&s.train.x) / 4000.0;
        let mean = f.trace() / 16.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn power_law_spectrum_is_steep() {
        for seed in 0..10 {
            let mut sp = spec(64, 4096, SpectrumKind::PowerLaw(2.0));
            sp.seed = seed;
            let s = synthesize(&sp).unwrap();
            let e = eigh(&compute_f(&s.train.x)).unwrap().eigenvalues;
            assert!(e.as_slice().windows(2).all(|w| w[0] >= w[1]));
            assert!(e[0] / e[63] > 100.0);
        }
    }

    #[test]
    fn noiseless_real_teacher_is_realizable() {
        let mut sp = spec(8, 40, SpectrumKind::PowerLaw(1.0));
        sp.classes = 1;
        let s = synthesize(&sp).unwrap();
        let opt = solve_optimum(&s.train.x, s.train.y.targets(), &LinearModel::zeros(1, 8, Loss::SUM_MSE)).unwrap();
        let pred = opt.model.weights() * s.train.x.values();
        assert!(mse_per_sample(&pred, s.train.y.targets()) < 1e-8);
    }

    #[test]
    fn classes_are_roughly_balanced() {
        let s = synthesize(&spec(64, 5000, SpectrumKind::PowerLaw(2.0))).unwrap();
        let mut counts = [0usize; 10];
        for c in s.train.y.classes() {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c > 300 && c < 700), "{counts:?}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize(&spec(6, 12, SpectrumKind::PowerLaw(2.0))).unwrap();
        let b = synthesize(&spec(6, 12, SpectrumKind::PowerLaw(2.0))).unwrap();
        assert_eq!(a.test.x.values(), b.test.x.values());
        assert_eq!(a.test.y.targets(), b.test.y.targets());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut sp = spec(4, 4, SpectrumKind::PowerLaw(-1.0));
        assert!(synthesize(&sp).is_err());
        sp.spectrum = SpectrumKind::Custom(vec![1.0, 2.0]);
        assert!(synthesize(&sp).is_err());
        sp.spectrum = SpectrumKind::Flat;
        sp.label_noise = -0.1;
        assert!(synthesize(&sp).is_err());
    }
}
