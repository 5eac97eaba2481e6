//! Matrix-valued domain types and second-moment computations.
//!
//! Samples are stored as columns: a dataset with `d` features and `n` samples
//! is a `d × n` matrix. The feature-feature second moment is `F = X Xᵀ` and the
//! sample-sample second moment (Gram matrix) is `K = Xᵀ X`. Neither is
//! normalized by the sample or feature count.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};

/// Absolute asymmetry tolerated by [`eigh`], scaled by `max(1, ‖A‖_max)`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Default relative singular-value cutoff for [`pseudoinverse`].
pub const PINV_REL_TOL: f64 = 1e-10;
/// Default relative cutoff for [`estimate_input_rank`].
pub const RANK_CUTOFF_RATIO: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Combined,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Combined => "combined",
        }
    }
}

/// A `d × n` data matrix, samples as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    split: SplitTag,
    id: String,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>, split: SplitTag) -> Result<Self> {
        Self::with_id(values, split, split.as_str())
    }

    pub fn with_id(values: DMatrix<f64>, split: SplitTag, id: impl Into<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "dataset must have d ≥ 1 and n ≥ 1, got {}×{}",
                values.nrows(),
                values.ncols()
            )));
        }
        check_finite(&values, "dataset")?;
        Ok(Self {
            values,
            split,
            id: id.into(),
        })
    }

    /// Builds a dataset from row-major samples (one inner vec per sample).
    pub fn from_samples(samples: &[Vec<f64>], split: SplitTag) -> Result<Self> {
        let n = samples.len();
        let d = samples.first().map(Vec::len).unwrap_or(0);
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != d) {
            return Err(Error::InvalidInput(format!(
                "sample {i} has {} features, expected {d}",
                s.len()
            )));
        }
        Self::new(DMatrix::from_fn(d, n, |r, c| samples[c][r]), split)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn feature_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn renamed(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Returns a dataset with the same tag and id but new values (same `d`).
    pub fn map_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::with_id(values, self.split, self.id.clone())
    }

    /// Concatenates datasets column-wise into a `combined` dataset.
    pub fn concat(parts: &[&Dataset], id: impl Into<String>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let d = first.feature_dim();
        if let Some(p) = parts.iter().find(|p| p.feature_dim() != d) {
            return Err(shape_err(format!("d = {d}"), format!("d = {}", p.feature_dim())));
        }
        let n: usize = parts.iter().map(|p| p.sample_count()).sum();
        let mut values = DMatrix::zeros(d, n);
        let mut offset = 0;
        for p in parts {
            values
                .columns_mut(offset, p.sample_count())
                .copy_from(p.values());
            offset += p.sample_count();
        }
        Self::with_id(values, SplitTag::Combined, id)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.map_values(&self.values * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelEncoding {
    OneHot,
    RealValued,
}

/// `k × n` targets paired column-by-column with a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    targets: DMatrix<f64>,
    encoding: LabelEncoding,
}

impl LabelSet {
    pub fn new(targets: DMatrix<f64>, encoding: LabelEncoding) -> Result<Self> {
        if targets.nrows() == 0 || targets.ncols() == 0 {
            return Err(Error::InvalidInput("label set must be non-empty".into()));
        }
        check_finite(&targets, "labels")?;
        if encoding == LabelEncoding::OneHot {
            for (j, col) in targets.column_iter().enumerate() {
                let ones = col.iter().filter(|&&v| v == 1.0).count();
                let zeros = col.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != col.len() {
                    return Err(Error::InvalidInput(format!(
                        "column {j} is not one-hot"
                    )));
                }
            }
        }
        Ok(Self { targets, encoding })
    }

    pub fn one_hot(classes: &[usize], k: usize) -> Result<Self> {
        if let Some(&c) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidInput(format!("class {c} out of range for k = {k}")));
        }
        let mut t = DMatrix::zeros(k, classes.len());
        for (j, &c) in classes.iter().enumerate() {
            t[(c, j)] = 1.0;
        }
        Self::new(t, LabelEncoding::OneHot)
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn encoding(&self) -> LabelEncoding {
        self.encoding
    }

    pub fn output_dim(&self) -> usize {
        self.targets.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.targets.ncols()
    }

    /// Class index per column (argmax, ties to the lowest index).
    pub fn classes(&self) -> Vec<usize> {
        argmax_columns(&self.targets)
    }

    pub fn check_pairs_with(&self, x: &Dataset) -> Result<()> {
        if self.sample_count() != x.sample_count() {
            return Err(shape_err(
                format!("{} label columns", x.sample_count()),
                format!("{}", self.sample_count()),
            ));
        }
        Ok(())
    }
}

/// A dataset paired with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Dataset,
    pub y: LabelSet,
}

impl LabeledData {
    pub fn new(x: Dataset, y: LabelSet) -> Result<Self> {
        y.check_pairs_with(&x)?;
        Ok(Self { x, y })
    }

    pub fn sample_count(&self) -> usize {
        self.x.sample_count()
    }
}

/// Argmax per column with ties broken toward the lowest row index.
pub fn argmax_columns(m: &DMatrix<f64>) -> Vec<usize> {
    m.column_iter()
        .map(|col| {
            let mut best = 0;
            for i in 1..col.len() {
                if col[i] > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SecondMoments {
    pub f: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub computed_from: String,
}

impl SecondMoments {
    pub fn of(x: &Dataset) -> Self {
        Self {
            f: compute_f(x),
            k: compute_k(x),
            computed_from: x.id().to_string(),
        }
    }
}

/// Eigendecomposition with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }

    /// Number of eigenvalues above `rel_tol × λ_max` (zero if `λ_max ≤ 0`).
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.max_eigenvalue();
        if top <= 0.0 {
            return 0;
        }
        self.eigenvalues.iter().filter(|&&l| l > rel_tol * top).count()
    }
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % m.nrows(), pos / m.nrows());
        return Err(Error::InvalidInput(format!(
            "{what} has a non-finite entry at ({r}, {c})"
        )));
    }
    Ok(())
}

pub(crate) fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    let t = a.transpose();
    (a + t) * 0.5
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `F = X Xᵀ`, symmetrized.
pub fn compute_f(x: &Dataset) -> DMatrix<f64> {
    let v = x.values();
    symmetrize(v * v.transpose())
}

/// `K = Xᵀ X`, symmetrized.
pub fn compute_k(x: &Dataset) -> DMatrix<f64> {
    let v = x.values();
    symmetrize(v.transpose() * v)
}

/// `K_train×test = X_trainᵀ X_test`.
pub fn compute_mixed_k(x_train: &Dataset, x_test: &Dataset) -> Result<DMatrix<f64>> {
    if x_train.feature_dim() != x_test.feature_dim() {
        return Err(shape_err(
            format!("test d = {}", x_train.feature_dim()),
            format!("{}", x_test.feature_dim()),
        ));
    }
    Ok(x_train.values().transpose() * x_test.values())
}

/// Symmetric eigendecomposition, eigenvalues descending.
pub fn eigh(a: &DMatrix<f64>) -> Result<Spectrum> {
    if !a.is_square() {
        return Err(shape_err("square matrix", format!("{}×{}", a.nrows(), a.ncols())));
    }
    check_finite(a, "matrix")?;
    let scale = max_abs(a).max(1.0);
    let asym = max_abs(&(a - a.transpose()));
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidInput(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(a.clone()));
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let eigenvectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Thin SVD `A = U diag(s) Vᵀ` with `s` descending. Returns `(U, s, V)`.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    check_finite(a, "matrix")?;
    let m = faer::Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    let svd = m
        .thin_svd()
        .map_err(|e| Error::DegenerateSpectrum(format!("SVD failed: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    Ok((
        DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        DVector::from_fn(s.nrows(), |i, _| s[i]),
        DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)]),
    ))
}

/// Singular values, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(thin_svd(a)?.1)
}

/// Moore–Penrose pseudoinverse; singular values `≤ rel_tol·σ_max` are dropped.
pub fn pseudoinverse(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidInput(format!("rel_tol must be positive, got {rel_tol}")));
    }
    let (u, s, v) = thin_svd(a)?;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    if smax == 0.0 {
        return Ok(out);
    }
    for (i, &si) in s.iter().enumerate() {
        if si > rel_tol * smax {
            out += (v.column(i) / si) * u.column(i).transpose();
        }
    }
    Ok(out)
}

/// Number of singular values of `F` above `cutoff_ratio × σ_max`.
pub fn estimate_input_rank(x: &Dataset, cutoff_ratio: f64) -> Result<usize> {
    if !(cutoff_ratio > 0.0 && cutoff_ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "cutoff_ratio must lie in (0, 1), got {cutoff_ratio}"
        )));
    }
    let sv = singular_values(&compute_f(x))?;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > cutoff_ratio * top).count())
}
