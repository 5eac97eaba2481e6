//! PCA and ZCA whitening.
//!
//! A whitener is fitted from the eigendecomposition `F = V Σ Vᵀ` of the
//! unnormalized second moment of the fit set. PCA whitening uses
//! `M = Σ^{-1/2} Vᵀ`; ZCA rotates back, `M = V Σ^{-1/2} Vᵀ`. For the PSD
//! matrix `F` the SVD and the eigendecomposition coincide, so `U = V`.
//!
//! Rank-deficient fit sets need a policy for the null modes of `F`:
//! - [`RankPolicy::Jitter`] adds `ε` to every eigenvalue before inverting,
//! - [`RankPolicy::ManualRankControl`] sets the inverse square root of each
//!   null mode to one.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{compute_f, eigh, Dataset};
use crate::error::{shape_err, Error, Result};

/// Relative eigenvalue cutoff below which a mode of `F` counts as null.
pub const NULL_MODE_TOL: f64 = 1e-10;
/// Default jitter, relative to the mean eigenvalue of `F`.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WhiteningMode {
    Pca,
    Zca,
}

impl WhiteningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            WhiteningMode::Pca => "pca",
            WhiteningMode::Zca => "zca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FitScope {
    TrainOnly,
    Full,
    Distribution,
}

impl FitScope {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitScope::TrainOnly => "train",
            FitScope::Full => "full",
            FitScope::Distribution => "distribution",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// `ε = relative × mean(eigenvalues of F)` is added before inverting.
    Jitter { relative: f64 },
    ManualRankControl,
}

impl RankPolicy {
    pub fn jitter() -> Self {
        RankPolicy::Jitter {
            relative: DEFAULT_RELATIVE_JITTER,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RankPolicy::Jitter { .. } => "jitter",
            RankPolicy::ManualRankControl => "manual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhiteningConfig {
    pub mode: WhiteningMode,
    pub scope: FitScope,
    pub rank_policy: RankPolicy,
    /// Subtract the fit-set mean before fitting and applying.
    pub center: bool,
}

impl WhiteningConfig {
    pub fn new(mode: WhiteningMode, scope: FitScope, rank_policy: RankPolicy) -> Self {
        Self {
            mode,
            scope,
            rank_policy,
            center: false,
        }
    }
}

/// A fitted whitening transform. Immutable once built.
#[derive(Debug, Clone)]
pub struct Whitener {
    m: DMatrix<f64>,
    config: WhiteningConfig,
    fit_dataset_id: String,
    fit_rank: usize,
    mean: Option<DVector<f64>>,
}

impl Whitener {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn mode(&self) -> WhiteningMode {
        self.config.mode
    }

    pub fn scope(&self) -> FitScope {
        self.config.scope
    }

    pub fn rank_policy(&self) -> RankPolicy {
        self.config.rank_policy
    }

    pub fn config(&self) -> &WhiteningConfig {
        &self.config
    }

    pub fn fit_dataset_id(&self) -> &str {
        &self.fit_dataset_id
    }

    /// Numerical rank of `F` on the fit set.
    pub fn fit_rank(&self) -> usize {
        self.fit_rank
    }

    pub fn feature_dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn mean(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref()
    }
}

pub fn fit_whitener(x_fit: &Dataset, config: WhiteningConfig) -> Result<Whitener> {
    if let RankPolicy::Jitter { relative } = config.rank_policy {
        if !(relative > 0.0) {
            return Err(Error::InvalidInput(format!("jitter must be positive, got {relative}")));
        }
    }
    let (data, mean) = if config.center {
        let mean = x_fit.values().column_mean();
        let mut centered = x_fit.values().clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        (x_fit.map_values(centered)?, Some(mean))
    } else {
        (x_fit.clone(), None)
    };

    let spectrum = eigh(&compute_f(&data))?;
    let top = spectrum.max_eigenvalue();
    if !(top > 0.0) {
        return Err(Error::DegenerateSpectrum("fit set has an all-zero second moment".into()));
    }
    let fit_rank = spectrum.rank(NULL_MODE_TOL);
    let d = spectrum.len();

    let inv_sqrt: Vec<f64> = match config.rank_policy {
        RankPolicy::Jitter { relative } => {
            let eps = relative * spectrum.eigenvalues.mean();
            spectrum
                .eigenvalues
                .iter()
                .map(|&s| 1.0 / (s.max(0.0) + eps).sqrt())
                .collect()
        }
        RankPolicy::ManualRankControl => spectrum
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &s)| if i < fit_rank { 1.0 / s.sqrt() } else { 1.0 })
            .collect(),
    };

    let v = &spectrum.eigenvectors;
    let mut scaled_vt = v.transpose();
    for (i, mut row) in scaled_vt.row_iter_mut().enumerate() {
        row *= inv_sqrt[i];
    }
    let m = match config.mode {
        WhiteningMode::Pca => scaled_vt,
        WhiteningMode::Zca => {
            let m = v * scaled_vt;
            (&m + m.transpose()) * 0.5
        }
    };
    debug_assert_eq!(m.shape(), (d, d));

    Ok(Whitener {
        m,
        config,
        fit_dataset_id: x_fit.id().to_string(),
        fit_rank,
        mean,
    })
}

/// `X̂ = M X` (after mean subtraction when the whitener centers).
pub fn apply(w: &Whitener, x: &Dataset) -> Result<Dataset> {
    if x.feature_dim() != w.feature_dim() {
        return Err(shape_err(
            format!("d = {}", w.feature_dim()),
            format!("d = {}", x.feature_dim()),
        ));
    }
    let out = match &w.mean {
        Some(mean) => {
            let mut centered = x.values().clone();
            for mut col in centered.column_iter_mut() {
                col -= mean;
            }
            &w.m * centered
        }
        None => &w.m * x.values(),
    };
    x.map_values(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenessReport {
    /// Eigenvalues of `F̂`, descending.
    pub eigenvalues: Vec<f64>,
    pub ones: usize,
    pub zeros: usize,
    pub pass: bool,
}

/// Classifies each eigenvalue of `F̂` as one or zero within `tol`.
pub fn verify_whitened(x_hat: &Dataset, tol: f64) -> Result<WhitenessReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol must be positive, got {tol}")));
    }
    let spectrum = eigh(&compute_f(x_hat))?;
    let eigenvalues: Vec<f64> = spectrum.eigenvalues.iter().copied().collect();
    let ones = eigenvalues.iter().filter(|&&l| (l - 1.0).abs() <= tol).count();
    let zeros = eigenvalues.iter().filter(|&&l| l.abs() <= tol).count();
    let pass = ones + zeros == eigenvalues.len();
    Ok(WhitenessReport {
        eigenvalues,
        ones,
        zeros,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{compute_k, SplitTag};
    use crate::random::{gaussian_matrix, rng};

    fn toy() -> Dataset {
        Dataset::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]),
            SplitTag::Train,
        )
        .unwrap()
    }

    fn cfg(mode: WhiteningMode, policy: RankPolicy) -> WhiteningConfig {
        WhiteningConfig::new(mode, FitScope::TrainOnly, policy)
    }

    /// F^{-1/2} for a 2×2 SPD matrix via the closed form
    /// sqrt(A) = (A + sqrt(det A) I) / sqrt(tr A + 2 sqrt(det A)).
    fn inv_sqrt_2x2(a: &DMatrix<f64>) -> DMatrix<f64> {
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let s = det.sqrt();
        let t = (a[(0, 0)] + a[(1, 1)] + 2.0 * s).sqrt();
        let root = (a + DMatrix::identity(2, 2) * s) / t;
        root.try_inverse().unwrap()
    }

    #[test]
    fn zca_on_toy_matches_closed_form_inverse_root() {
        let w = fit_whitener(&toy(), cfg(WhiteningMode::Zca, RankPolicy::ManualRankControl)).unwrap();
        let oracle = inv_sqrt_2x2(&compute_f(&toy()));
        assert!((w.matrix() - &oracle).amax() < 1e-12);
        assert!((w.matrix()[(0, 0)] - 0.788675134594813).abs() < 1e-12);
        assert!((w.matrix()[(0, 1)] + 0.211324865405187).abs() < 1e-12);
    }

    #[test]
    fn already_white_gives_identity() {
        let x = Dataset::new(DMatrix::identity(3, 3), SplitTag::Train).unwrap();
        let w = fit_whitener(&x, cfg(WhiteningMode::Zca, RankPolicy::ManualRankControl)).unwrap();
        assert!((w.matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
        let y = apply(&w, &x).unwrap();
        assert!((y.values() - x.values()).amax() < 1e-14);
    }

    #[test]
    fn verify_toy_before_and_after() {
        let r = verify_whitened(&toy(), 1e-6).unwrap();
        assert!(!r.pass);
        assert!((r.eigenvalues[0] - 3.0).abs() < 1e-12 && (r.eigenvalues[1] - 1.0).abs() < 1e-12);
        let w = fit_whitener(&toy(), cfg(WhiteningMode::Pca, RankPolicy::ManualRankControl)).unwrap();
        let r = verify_whitened(&apply(&w, &toy()).unwrap(), 1e-6).unwrap();
        assert!(r.pass);
        assert_eq!(r.ones, 2);
    }

    #[test]
    fn zero_padded_rank_bookkeeping() {
        // rank-2 data in 4 dimensions
        let mut v = DMatrix::zeros(4, 3);
        v.view_mut((0, 0), (2, 3)).copy_from(toy().values());
        let x = Dataset::new(v, SplitTag::Train).unwrap();
        let w = fit_whitener(&x, cfg(WhiteningMode::Pca, RankPolicy::ManualRankControl)).unwrap();
        assert_eq!(w.fit_rank(), 2);
        let r = verify_whitened(&apply(&w, &x).unwrap(), 1e-6).unwrap();
        assert_eq!((r.ones, r.zeros, r.pass), (2, 2, true));
    }

    #[test]
    fn full_fit_with_n_le_d_gives_identity_gram() {
        let x = Dataset::new(gaussian_matrix(&mut rng(3), 10, 6, 1.0), SplitTag::Combined).unwrap();
        for mode in [WhiteningMode::Pca, WhiteningMode::Zca] {
            let w = fit_whitener(&x, cfg(mode, RankPolicy::ManualRankControl)).unwrap();
            let k = compute_k(&apply(&w, &x).unwrap());
            assert!((k - DMatrix::<f64>::identity(6, 6)).amax() < 1e-6);
        }
    }

    #[test]
    fn jitter_is_approximately_white() {
        let x = Dataset::new(gaussian_matrix(&mut rng(4), 5, 40, 1.0), SplitTag::Train).unwrap();
        let w = fit_whitener(&x, cfg(WhiteningMode::Pca, RankPolicy::jitter())).unwrap();
        let r = verify_whitened(&apply(&w, &x).unwrap(), 1e-6).unwrap();
        assert_eq!(r.ones, 5);
    }

    #[test]
    fn zero_dataset_is_degenerate() {
        let x = Dataset::new(DMatrix::zeros(3, 4), SplitTag::Train).unwrap();
        let e = fit_whitener(&x, cfg(WhiteningMode::Pca, RankPolicy::jitter())).unwrap_err();
        assert!(matches!(e, Error::DegenerateSpectrum(_)));
    }

    #[test]
    fn dimension_mismatch_on_apply() {
        let w = fit_whitener(&toy(), cfg(WhiteningMode::Pca, RankPolicy::jitter())).unwrap();
        let x = Dataset::new(DMatrix::identity(3, 3), SplitTag::Test).unwrap();
        assert!(matches!(apply(&w, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn centering_removes_mean() {
        let mut c = WhiteningConfig::new(WhiteningMode::Pca, FitScope::TrainOnly, RankPolicy::ManualRankControl);
        c.center = true;
        let x = Dataset::new(gaussian_matrix(&mut rng(9), 3, 30, 1.0).add_scalar(5.0), SplitTag::Train).unwrap();
        let w = fit_whitener(&x, c).unwrap();
        let y = apply(&w, &x).unwrap();
        assert!(y.values().column_mean().amax() < 1e-12);
        assert!(verify_whitened(&y, 1e-8).unwrap().pass);
    }
}
