//! The property battery behind `whitebench verify`.
//!
//! Each check is an independent job; jobs run in parallel and the report lists
//! them sorted by id.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use whitebench_core::data_model::{compute_k, Dataset, SplitTag};
use whitebench_core::info_props::{
    compress_whitened, full_whitening_null_check, orbit_equivalence_check, reconstruct_k, OrbitConfig,
    ORBIT_TOL_LINEAR, ORBIT_TOL_MLP,
};
use whitebench_core::iterative_opt::{newton_step, sgd_step, Differentiable, OptimizerConfig};
use whitebench_core::linear_flow::LinearModel;
use whitebench_core::loss::Loss;
use whitebench_core::models::init_isotropic;
use whitebench_core::random::{gaussian_matrix, random_orthogonal, rng};
use whitebench_core::whitening::{apply, fit_whitener, FitScope, RankPolicy, WhiteningConfig, WhiteningMode};

use crate::error::{HarnessError, Result};

pub const COMPRESSION_TOL: f64 = 1e-8;
pub const NEWTON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Orbit,
    Compression,
    NewtonEquivalence,
    NullPrediction,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Orbit, Suite::Compression, Suite::NewtonEquivalence, Suite::NullPrediction];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Orbit => "orbit",
            Suite::Compression => "compression",
            Suite::NewtonEquivalence => "newton-equivalence",
            Suite::NullPrediction => "null-prediction",
        }
    }

    /// `all` expands to every suite.
    pub fn parse_selection(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Self::ALL.to_vec()),
            other => Self::ALL
                .iter()
                .find(|x| x.as_str() == other)
                .map(|x| vec![*x])
                .ok_or_else(|| HarnessError::Invalid(format!("unknown suite {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub suite: &'static str,
    pub pass: bool,
    /// The measured deviation compared against `tol`.
    pub metric: f64,
    pub tol: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<&'static str>,
    pub pass: bool,
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Random rotations per model family in the orbit suite.
    pub orbit_trials: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { orbit_trials: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Job {
    OrbitLinear(u64),
    OrbitMlp(u64),
    Compression { d: usize, n: usize },
    Newton,
    Null(u64),
}

fn jobs(suites: &[Suite], opts: VerifyOptions) -> Vec<Job> {
    let mut out = Vec::new();
    for s in suites {
        match s {
            Suite::Orbit => {
                for t in 0..opts.orbit_trials as u64 {
                    out.push(Job::OrbitLinear(opts.seed.wrapping_add(t)));
                    out.push(Job::OrbitMlp(opts.seed.wrapping_add(t)));
                }
            }
            Suite::Compression => {
                for d in 2..=5 {
                    for n in d + 1..=d + 6 {
                        out.push(Job::Compression { d, n });
                    }
                }
            }
            Suite::NewtonEquivalence => out.push(Job::Newton),
            Suite::NullPrediction => {
                for s in 0..10 {
                    out.push(Job::Null(opts.seed.wrapping_add(s)));
                }
            }
        }
    }
    out
}

fn failure(id: String, suite: Suite, e: impl std::fmt::Display) -> CheckResult {
    CheckResult {
        id,
        suite: suite.as_str(),
        pass: false,
        metric: f64::NAN,
        tol: 0.0,
        detail: e.to_string(),
    }
}

fn orbit(seed: u64, mlp: bool) -> CheckResult {
    let family = if mlp { "mlp" } else { "linear" };
    let id = format!("orbit/{family}/{seed:04}");
    let mut g = rng(seed ^ 0x6f72_6269_74);
    let (d, n, k) = (6, 12, 3);
    let x = gaussian_matrix(&mut g, d, n, 1.0);
    let y = gaussian_matrix(&mut g, k, n, 1.0);
    let xt = gaussian_matrix(&mut g, d, 5, 1.0);
    let r = random_orthogonal(&mut g, d);
    let rep = if mlp {
        let cfg = OrbitConfig {
            opt: OptimizerConfig::with_eta(0.05),
            steps: 30,
            batch_seed: seed,
            tol: ORBIT_TOL_MLP,
        };
        init_isotropic(&[d, 8, 8, k], 0.3, seed)
            .map_err(HarnessError::from)
            .and_then(|m| Ok(orbit_equivalence_check(&m, &x, &y, &xt, &r, &cfg)?))
    } else {
        let cfg = OrbitConfig {
            opt: OptimizerConfig::with_eta(0.01),
            steps: 30,
            batch_seed: seed,
            tol: ORBIT_TOL_LINEAR,
        };
        LinearModel::new(gaussian_matrix(&mut g, k, d, 0.1), Loss::SUM_MSE)
            .map_err(HarnessError::from)
            .and_then(|m| Ok(orbit_equivalence_check(&m, &x, &y, &xt, &r, &cfg)?))
    };
    match rep {
        Ok(r) => CheckResult {
            id,
            suite: Suite::Orbit.as_str(),
            pass: r.pass,
            metric: r.max_deviation(),
            tol: r.tol,
            detail: format!(
                "theta {:.2e}, z {:.2e}, loss {:.2e}, test {:.2e}",
                r.theta_deviation, r.z_deviation, r.loss_deviation, r.test_deviation
            ),
        },
        Err(e) => failure(id, Suite::Orbit, e),
    }
}

fn compression(d: usize, n: usize) -> CheckResult {
    let id = format!("compression/d{d}/n{n:02}");
    let run = || -> Result<(f64, bool, usize)> {
        let mut worst = 0.0f64;
        let mut sizes_ok = true;
        let mut fallbacks = 0;
        for seed in 0..10u64 {
            let x = Dataset::new(gaussian_matrix(&mut rng(seed * 1000 + (d * 10 + n) as u64), d, n, 1.0), SplitTag::Combined)?;
            let cfg = WhiteningConfig::new(WhiteningMode::Pca, FitScope::Full, RankPolicy::ManualRankControl);
            let xh = apply(&fit_whitener(&x, cfg)?, &x)?;
            let c = compress_whitened(&xh)?;
            sizes_ok &= c.stored_scalars() == (n - d) * d;
            fallbacks += usize::from(c.permutation.is_some());
            worst = worst.max((reconstruct_k(&c)? - compute_k(&xh)).amax());
        }
        Ok((worst, sizes_ok, fallbacks))
    };
    match run() {
        Ok((worst, sizes_ok, fallbacks)) => CheckResult {
            id,
            suite: Suite::Compression.as_str(),
            pass: worst <= COMPRESSION_TOL && sizes_ok,
            metric: worst,
            tol: COMPRESSION_TOL,
            detail: format!("10 seeds, payload (n-d)d = {}, exact sizes {sizes_ok}, pivoted {fallbacks}", (n - d) * d),
        },
        Err(e) => failure(id, Suite::Compression, e),
    }
}

/// Maximum train/test prediction gap between Newton's method on raw data and
/// gradient descent on PCA-whitened data, over `steps` steps.
pub fn newton_vs_whitened_gd(d: usize, n: usize, steps: usize, eta: f64, seed: u64) -> Result<f64> {
    let mut g = rng(seed);
    let mut raw = gaussian_matrix(&mut g, d, n + 64, 1.0);
    for (i, mut row) in raw.row_iter_mut().enumerate() {
        row *= ((i + 1) as f64).powf(-1.0);
    }
    let x = Dataset::new(raw.columns(0, n).into_owned(), SplitTag::Train)?;
    let x_test = Dataset::new(raw.columns(n, 64).into_owned(), SplitTag::Test)?;
    let y = gaussian_matrix(&mut g, 10, n, 1.0);
    let wh = fit_whitener(
        &x,
        WhiteningConfig::new(WhiteningMode::Pca, FitScope::TrainOnly, RankPolicy::ManualRankControl),
    )?;
    let (xw, xw_test) = (apply(&wh, &x)?, apply(&wh, &x_test)?);
    let w0 = gaussian_matrix(&mut g, 10, d, 0.1);
    let m_inv = wh
        .matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| HarnessError::Invalid("whitening matrix is singular".into()))?;
    let mut newton = LinearModel::new(w0.clone(), Loss::SUM_MSE)?;
    let mut gd = LinearModel::new(w0 * m_inv, Loss::SUM_MSE)?;
    let cfg = OptimizerConfig::with_eta(eta);
    let gap = |a: &LinearModel, b: &LinearModel| -> f64 {
        let tr: DMatrix<f64> = a.predict(x.values()) - b.predict(xw.values());
        let te: DMatrix<f64> = a.predict(x_test.values()) - b.predict(xw_test.values());
        tr.amax().max(te.amax())
    };
    let mut worst = gap(&newton, &gd);
    for _ in 0..steps {
        newton_step(&mut newton, &x, &y, &cfg)?;
        sgd_step(&mut gd, xw.values(), &y, &cfg)?;
        worst = worst.max(gap(&newton, &gd));
    }
    Ok(worst)
}

fn newton() -> CheckResult {
    let id = "newton-equivalence/d32/n256".to_string();
    match newton_vs_whitened_gd(32, 256, 100, 0.5, 3) {
        Ok(gap) => CheckResult {
            id,
            suite: Suite::NewtonEquivalence.as_str(),
            pass: gap <= NEWTON_TOL,
            metric: gap,
            tol: NEWTON_TOL,
            detail: "100 steps, eta 0.5, max train/test prediction gap".into(),
        },
        Err(e) => failure(id, Suite::NewtonEquivalence, e),
    }
}

fn null(seed: u64) -> CheckResult {
    let id = format!("null-prediction/{seed:04}");
    match full_whitening_null_check(64, 32, 16, 10, seed) {
        Ok(r) => CheckResult {
            id,
            suite: Suite::NullPrediction.as_str(),
            pass: r.pass,
            metric: r.max_abs_prediction.max((r.test_loss - r.expected_loss).abs()),
            tol: whitebench_core::info_props::NULL_TOL,
            detail: format!(
                "max |f| {:.2e}, test loss {}, error {:.3} (tie-break {:.3}, chance {:.3})",
                r.max_abs_prediction, r.test_loss, r.test_error, r.tie_break_error, r.chance_error
            ),
        },
        Err(e) => failure(id, Suite::NullPrediction, e),
    }
}

pub fn run_verify(suites: &[Suite], opts: VerifyOptions) -> VerifyReport {
    let mut checks: Vec<CheckResult> = jobs(suites, opts)
        .into_par_iter()
        .map(|j| match j {
            Job::OrbitLinear(s) => orbit(s, false),
            Job::OrbitMlp(s) => orbit(s, true),
            Job::Compression { d, n } => compression(d, n),
            Job::Newton => newton(),
            Job::Null(s) => null(s),
        })
        .collect();
    checks.sort_by(|a, b| a.id.cmp(&b.id));
    let passed = checks.iter().filter(|c| c.pass).count();
    let mut names: Vec<&'static str> = suites.iter().map(Suite::as_str).collect();
    names.sort_unstable();
    names.dedup();
    VerifyReport {
        suites: names,
        pass: passed == checks.len(),
        passed,
        failed: checks.len() - passed,
        checks,
    }
}
