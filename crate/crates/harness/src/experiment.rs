//! Running configured experiments and sweeps.
//!
//! A sweep is the grid `sizes × whitening modes × seeds`. Every cell draws one
//! dataset (paired across whitening modes: the data seed ignores the mode),
//! fits the configured whitener, and trains every configured optimizer on the
//! same copy. Cells run in parallel on a pool of `workers` threads; rows are
//! sorted afterwards so output never depends on scheduling.
//!
//! Seeds: `run_seed = H(master, experiment_id, dataset_size, whitening_mode,
//! seed)` where `H` is 64-bit FNV-1a over the little-endian encodings
//! (strings as UTF-8 followed by a 0xff separator), finished with the
//! SplitMix64 mixer. The data seed is the same hash with the mode omitted.
//! `run_seed` orders minibatches; the data seed also initializes the model, so
//! whitened and unwhitened copies start from the same weights.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;
use whitebench_core::data_model::{Dataset, LabeledData, SplitTag};
use whitebench_core::iterative_opt::{BatchSize, LineSearchConfig, OptimizerConfig};
use whitebench_core::linear_flow::{build_flow, early_stop, LinearModel, Preconditioning, TimeGrid};
use whitebench_core::loss::Reduction;
use whitebench_core::models::{train_to_cutoff, InitScheme, Mlp, OptimizerKind, StopReason, TrainConfig, TrainRecord};
use whitebench_core::random::{gaussian_matrix, rng, shuffled};
use whitebench_core::whitening::{apply, fit_whitener, FitScope, WhiteningConfig};

use crate::config::{DataSource, InitChoice, ModelKind, OptimizerChoice, RunConfig, ScopeChoice};
use crate::error::{HarnessError, Result};
use crate::io::ingest_path;
use crate::synth::{sample_distribution, synthesize, Splits, SyntheticSpec};

/// Environment variable overriding `master_seed`.
pub const SEED_ENV: &str = "WHITEBENCH_SEED";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy)]
enum Part<'a> {
    U64(u64),
    Str(&'a str),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_parts(parts: &[Part]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    for p in parts {
        match p {
            Part::U64(v) => eat(&v.to_le_bytes()),
            Part::Str(s) => {
                eat(s.as_bytes());
                eat(&[0xff]);
            }
        }
    }
    splitmix64(h)
}

pub fn run_seed(master: u64, id: &str, size: usize, mode: ScopeChoice, seed: u64) -> u64 {
    hash_parts(&[Part::U64(master), Part::Str(id), Part::U64(size as u64), Part::Str(mode.as_str()), Part::U64(seed)])
}

pub fn data_seed(master: u64, id: &str, size: usize, seed: u64) -> u64 {
    hash_parts(&[Part::U64(master), Part::Str(id), Part::U64(size as u64), Part::U64(seed)])
}

/// `master_seed`, or `WHITEBENCH_SEED` when set.
pub fn effective_master_seed(cfg: &RunConfig) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| HarnessError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(cfg.master_seed),
    }
}

/// One CSV row. Loss columns are per-sample (`½‖f − y‖²` averaged over
/// samples for squared-error heads), whatever reduction the model trains with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub seed: u64,
    pub run_seed: u64,
    pub dataset_size: usize,
    pub n_train: usize,
    pub size_convention: String,
    pub whitening_mode: String,
    pub optimizer: String,
    /// `terminal` (one per run, at the early-stopping point) or `trajectory`.
    pub row_kind: String,
    pub step_or_time: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_error: Option<f64>,
    pub steps_to_cutoff: Option<usize>,
    pub stopping_reason: String,
    pub error: String,
}

impl ResultRow {
    pub fn is_terminal(&self) -> bool {
        self.row_kind == "terminal"
    }

    fn sort_key(&self) -> (&str, usize, &str, u64, &str, bool) {
        (
            &self.experiment_id,
            self.dataset_size,
            &self.whitening_mode,
            self.seed,
            &self.optimizer,
            self.is_terminal(),
        )
    }
}

fn cmp_rows(a: &ResultRow, b: &ResultRow) -> Ordering {
    a.sort_key()
        .cmp(&b.sort_key())
        .then_with(|| a.step_or_time.unwrap_or(0.0).total_cmp(&b.step_or_time.unwrap_or(0.0)))
}

fn finite(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

/// Label for an optimizer variant; regularized GN carries its λ.
pub fn optimizer_label(kind: OptimizerChoice, lambda: f64) -> String {
    match kind {
        OptimizerChoice::GaussNewton => format!("gauss_newton@{lambda}"),
        other => other.as_str().to_string(),
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    size: usize,
    mode: ScopeChoice,
    seed: u64,
}

struct Prepared {
    splits: Splits,
}

fn synthetic_spec(cfg: &RunConfig, n_train: usize, n_test: usize, seed: u64) -> Option<SyntheticSpec> {
    match &cfg.source {
        DataSource::Synthetic {
            d,
            spectrum,
            teacher,
            label_noise,
            classes,
        } => Some(SyntheticSpec {
            d: *d,
            n_train,
            n_val: cfg.n_val,
            n_test,
            spectrum: spectrum.clone(),
            teacher: *teacher,
            label_noise: *label_noise,
            classes: *classes,
            seed,
        }),
        DataSource::Files { .. } => None,
    }
}

fn labeled(path: &std::path::Path, split: SplitTag) -> Result<LabeledData> {
    let (x, y) = ingest_path(path, split)?;
    let y = y.ok_or_else(|| HarnessError::Invalid(format!("{} has no labels", path.display())))?;
    Ok(LabeledData::new(x, y)?)
}

fn subsample(d: &LabeledData, n: usize, seed: u64) -> Result<LabeledData> {
    if n > d.sample_count() {
        return Err(HarnessError::Invalid(format!(
            "requested {n} training samples but the file holds {}",
            d.sample_count()
        )));
    }
    let mut idx = shuffled(&mut rng(seed), d.sample_count());
    idx.truncate(n);
    idx.sort_unstable();
    let x = d.x.map_values(d.x.values().select_columns(&idx))?;
    let y = whitebench_core::LabelSet::new(d.y.targets().select_columns(&idx), d.y.encoding())?;
    Ok(LabeledData::new(x, y)?)
}

fn whiten_splits(cfg: &RunConfig, cell: Cell, raw: Splits, dseed: u64, n_test: usize) -> Result<Splits> {
    let scope = match cell.mode {
        ScopeChoice::None => return Ok(raw),
        ScopeChoice::Train => FitScope::TrainOnly,
        ScopeChoice::Full => FitScope::Full,
        ScopeChoice::Distribution => FitScope::Distribution,
    };
    let fit = match cell.mode {
        ScopeChoice::Train => raw.train.x.clone(),
        ScopeChoice::Full => Dataset::concat(&[&raw.train.x, &raw.val.x, &raw.test.x], "train+val+test")?,
        _ => match &cfg.source {
            DataSource::Synthetic { .. } => {
                let spec = synthetic_spec(cfg, raw.train.sample_count(), n_test, dseed).expect("synthetic source");
                sample_distribution(&spec, cfg.distribution_samples, 1)?
            }
            DataSource::Files { train, .. } => ingest_path(train, SplitTag::Combined)?.0,
        },
    };
    let mut wc = WhiteningConfig::new(cfg.method, scope, cfg.rank_policy);
    wc.center = cfg.center;
    let w = fit_whitener(&fit, wc)?;
    let map = |d: LabeledData| -> Result<LabeledData> { Ok(LabeledData::new(apply(&w, &d.x)?, d.y)?) };
    Ok(Splits {
        train: map(raw.train)?,
        val: map(raw.val)?,
        test: map(raw.test)?,
    })
}

fn prepare(cfg: &RunConfig, master: u64, cell: Cell) -> Result<Prepared> {
    let (n_train, n_test) = cfg.size_convention.split(cell.size, cfg.n_test);
    let dseed = data_seed(master, &cfg.id, cell.size, cell.seed);
    let raw = match &cfg.source {
        DataSource::Synthetic { .. } => synthesize(&synthetic_spec(cfg, n_train, n_test, dseed).expect("synthetic source"))?,
        DataSource::Files { train, val, test } => Splits {
            train: subsample(&labeled(train, SplitTag::Train)?, n_train, dseed)?,
            val: labeled(val, SplitTag::Validation)?,
            test: labeled(test, SplitTag::Test)?,
        },
    };
    Ok(Prepared {
        splits: whiten_splits(cfg, cell, raw, dseed, n_test)?,
    })
}

/// Early-stopping point of a flow run: `(t*, train, val, test, test error)`.
struct FlowPoint {
    time: f64,
    train: f64,
    val: f64,
    test: Option<f64>,
    error: Option<f64>,
}

struct Outcome {
    record: TrainRecord,
    flow: Option<FlowPoint>,
    reason: StopReason,
}

fn init_linear(cfg: &RunConfig, k: usize, d: usize, seed: u64) -> Result<LinearModel> {
    let loss = cfg.model.loss;
    Ok(match cfg.model.init {
        InitChoice::Zeros => LinearModel::zeros(k, d, loss),
        InitChoice::Isotropic => LinearModel::new(gaussian_matrix(&mut rng(seed), k, d, cfg.model.init_variance.sqrt()), loss)?,
        InitChoice::FanIn => LinearModel::new(gaussian_matrix(&mut rng(seed), k, d, (1.0 / d as f64).sqrt()), loss)?,
    })
}

fn init_mlp(cfg: &RunConfig, k: usize, d: usize, seed: u64) -> Result<Mlp> {
    let mut sizes = vec![d];
    sizes.extend(&cfg.model.hidden);
    sizes.push(k);
    let scheme = match cfg.model.init {
        InitChoice::Zeros => InitScheme::Constant(0.0),
        InitChoice::Isotropic => InitScheme::Constant(cfg.model.init_variance),
        InitChoice::FanIn => InitScheme::FanIn(2.0),
    };
    let mut m = Mlp::init(&sizes, scheme, seed)?
        .with_activation(cfg.model.activation)
        .with_loss(cfg.model.loss);
    if cfg.model.biases {
        m = m.with_deeper_biases();
    }
    Ok(m)
}

fn train_config(cfg: &RunConfig, kind: OptimizerChoice, lambda: f64, batch_seed: u64) -> TrainConfig {
    let o = &cfg.optimizer;
    let (optimizer, reg_lambda) = match kind {
        OptimizerChoice::Newton => (OptimizerKind::RegularizedGn, 0.0),
        OptimizerChoice::GaussNewton => (OptimizerKind::RegularizedGn, lambda),
        _ => (OptimizerKind::Sgd, 1.0),
    };
    let batch_size = match (kind, o.batch_size) {
        (OptimizerChoice::Sgd, Some(b)) => BatchSize::Mini(b),
        _ => BatchSize::Full,
    };
    TrainConfig {
        optimizer,
        opt: OptimizerConfig {
            eta: o.eta,
            reg_lambda,
            kernel_epsilon: o.epsilon,
            batch_size,
            cg_tol: o.cg_tol,
            cg_max_iter: o.cg_max_iter,
            line_search: o.line_search.then(LineSearchConfig::default),
        },
        cutoff: cfg.stopping.cutoff,
        max_steps: cfg.stopping.max_steps,
        record_every: cfg.stopping.record_every,
        batch_seed,
    }
}

fn run_variant(cfg: &RunConfig, p: &Prepared, kind: OptimizerChoice, lambda: f64, dseed: u64, rseed: u64) -> Result<Outcome> {
    let s = &p.splits;
    let (k, d) = (s.train.y.output_dim(), s.train.x.feature_dim());
    if kind.is_flow() {
        let w0 = init_linear(cfg, k, d, dseed)?;
        let pre = if kind == OptimizerChoice::NewtonFlow {
            Preconditioning::Newton
        } else {
            Preconditioning::None
        };
        let sol = build_flow(&s.train.x, s.train.y.targets(), &w0, pre)?;
        let mut grid = TimeGrid::default_for(&sol);
        grid.points = cfg.stopping.grid_points;
        let es = early_stop(&sol, &s.train, &s.val, Some(&s.test), grid)?;
        let reason = if es.boundary_hit {
            StopReason::Boundary
        } else {
            StopReason::EarlyStop
        };
        return Ok(Outcome {
            flow: Some(FlowPoint {
                time: es.t_star,
                train: es.train_loss,
                val: es.val_loss,
                test: es.test_loss,
                error: es.test_error,
            }),
            record: es.record,
            reason,
        });
    }
    let tc = train_config(cfg, kind, lambda, rseed);
    let record = match cfg.model.kind {
        ModelKind::Linear => {
            let mut m = init_linear(cfg, k, d, dseed)?;
            train_to_cutoff(&mut m, &s.train, Some(&s.val), Some(&s.test), &tc)
        }
        ModelKind::Mlp => {
            let mut m = init_mlp(cfg, k, d, dseed)?;
            train_to_cutoff(&mut m, &s.train, Some(&s.val), Some(&s.test), &tc)
        }
    };
    let reason = record.stopping_reason.unwrap_or(StopReason::Error);
    Ok(Outcome {
        record,
        flow: None,
        reason,
    })
}

struct Scales {
    train: f64,
    val: f64,
    test: f64,
}

fn rows_for(cfg: &RunConfig, base: &ResultRow, outcome: Result<Outcome>, scales: &Scales) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let out = match outcome {
        Ok(o) => o,
        Err(e) => {
            let mut r = base.clone();
            r.stopping_reason = StopReason::Error.as_str().into();
            r.error = e.to_string();
            rows.push(r);
            return rows;
        }
    };
    let rec = &out.record;
    if cfg.trajectory {
        for s in &rec.steps {
            let mut r = base.clone();
            r.row_kind = "trajectory".into();
            r.step_or_time = Some(if out.flow.is_some() { s.time } else { s.step as f64 });
            r.train_loss = finite(Some(s.train_loss / scales.train));
            r.val_loss = finite(s.val_loss.map(|v| v / scales.val));
            r.test_loss = finite(s.test_loss.map(|v| v / scales.test));
            r.test_error = finite(s.test_error);
            rows.push(r);
        }
    }
    let mut t = base.clone();
    t.stopping_reason = out.reason.as_str().into();
    t.error = rec.error.clone().unwrap_or_default();
    t.steps_to_cutoff = rec.steps_to_cutoff;
    match &out.flow {
        Some(p) => {
            t.step_or_time = finite(Some(p.time));
            t.train_loss = finite(Some(p.train));
            t.val_loss = finite(Some(p.val));
            t.test_loss = finite(p.test);
            t.test_error = finite(p.error);
        }
        None => {
            if let Some(s) = rec.best().or(rec.last()) {
                t.step_or_time = Some(s.step as f64);
                t.train_loss = finite(Some(s.train_loss / scales.train));
                t.val_loss = finite(s.val_loss.map(|v| v / scales.val));
                t.test_loss = finite(s.test_loss.map(|v| v / scales.test));
                t.test_error = finite(s.test_error);
            }
        }
    }
    rows.push(t);
    rows
}

fn run_cell(cfg: &RunConfig, master: u64, cell: Cell) -> Vec<ResultRow> {
    let rseed = run_seed(master, &cfg.id, cell.size, cell.mode, cell.seed);
    let dseed = data_seed(master, &cfg.id, cell.size, cell.seed);
    let (n_train, _) = cfg.size_convention.split(cell.size, cfg.n_test);
    let variants: Vec<(OptimizerChoice, f64)> = cfg
        .optimizer
        .kinds
        .iter()
        .flat_map(|&k| {
            if k == OptimizerChoice::GaussNewton {
                cfg.optimizer.lambdas.iter().map(|&l| (k, l)).collect::<Vec<_>>()
            } else {
                vec![(k, 1.0)]
            }
        })
        .collect();
    let base = |label: String| ResultRow {
        experiment_id: cfg.id.clone(),
        seed: cell.seed,
        run_seed: rseed,
        dataset_size: cell.size,
        n_train,
        size_convention: cfg.size_convention.as_str().into(),
        whitening_mode: cell.mode.as_str().into(),
        optimizer: label,
        row_kind: "terminal".into(),
        step_or_time: None,
        train_loss: None,
        val_loss: None,
        test_loss: None,
        test_error: None,
        steps_to_cutoff: None,
        stopping_reason: String::new(),
        error: String::new(),
    };
    let prepared = match prepare(cfg, master, cell) {
        Ok(p) => p,
        Err(e) => {
            return variants
                .iter()
                .map(|&(k, l)| {
                    let mut r = base(optimizer_label(k, l));
                    r.stopping_reason = StopReason::Error.as_str().into();
                    r.error = e.to_string();
                    r
                })
                .collect();
        }
    };
    let s = &prepared.splits;
    let sum = cfg.model.loss.reduction == Reduction::Sum;
    let per = |n: usize| if sum { n as f64 } else { 1.0 };
    let mut rows = Vec::new();
    for (kind, lambda) in variants {
        let scales = if kind.is_flow() {
            Scales {
                train: 1.0,
                val: 1.0,
                test: 1.0,
            }
        } else {
            Scales {
                train: per(s.train.sample_count()),
                val: per(s.val.sample_count()),
                test: per(s.test.sample_count()),
            }
        };
        let outcome = run_variant(cfg, &prepared, kind, lambda, dseed, rseed);
        rows.extend(rows_for(cfg, &base(optimizer_label(kind, lambda)), outcome, &scales));
    }
    rows
}

/// Runs every cell of the configured grid on `workers` threads and returns the
/// rows in canonical order.
pub fn run_experiment(cfg: &RunConfig, workers: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let master = effective_master_seed(cfg)?;
    let mut cells = Vec::new();
    for &size in &cfg.sizes {
        for &mode in &cfg.modes {
            for &seed in &cfg.seeds {
                cells.push(Cell { size, mode, seed });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(format!("cannot build worker pool: {e}")))?;
    let mut rows: Vec<ResultRow> = pool.install(|| cells.par_iter().flat_map_iter(|&c| run_cell(cfg, master, c)).collect());
    rows.sort_by(cmp_rows);
    Ok(rows)
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(ROW_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Invalid(e.to_string()))
}

pub const ROW_HEADER: [&str; 17] = [
    "experiment_id",
    "seed",
    "run_seed",
    "dataset_size",
    "n_train",
    "size_convention",
    "whitening_mode",
    "optimizer",
    "row_kind",
    "step_or_time",
    "train_loss",
    "val_loss",
    "test_loss",
    "test_error",
    "steps_to_cutoff",
    "stopping_reason",
    "error",
];

/// Terminal rows only.
pub fn terminal(rows: &[ResultRow]) -> impl Iterator<Item = &ResultRow> {
    rows.iter().filter(|r| r.is_terminal())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::parse(text).unwrap()
    }

    const SMALL: &str = "[experiment]\nid = t\nseeds = 0, 1\n[data]\nd = 16\nsizes = 4, 8, 16\nn_val = 4\nn_test = 4\nalpha = 2\nlabel_noise = 0.1\nclasses = 3\n[whitening]\nmodes = none, train, full\nrank_policy = manual\n[stopping]\ngrid_points = 40\n";

    #[test]
    fn seeds_depend_on_every_component() {
        let base = run_seed(0, "a", 10, ScopeChoice::None, 0);
        assert_eq!(base, run_seed(0, "a", 10, ScopeChoice::None, 0));
        for other in [
            run_seed(1, "a", 10, ScopeChoice::None, 0),
            run_seed(0, "b", 10, ScopeChoice::None, 0),
            run_seed(0, "a", 11, ScopeChoice::None, 0),
            run_seed(0, "a", 10, ScopeChoice::Full, 0),
            run_seed(0, "a", 10, ScopeChoice::None, 1),
        ] {
            assert_ne!(base, other);
        }
        assert_ne!(hash_parts(&[Part::Str("ab"), Part::Str("c")]), hash_parts(&[Part::Str("a"), Part::Str("bc")]));
    }

    #[test]
    fn grid_cardinality_and_order() {
        let rows = run_experiment(&cfg(SMALL), 2).unwrap();
        assert_eq!(rows.len(), 18);
        assert!(rows.windows(2).all(|w| cmp_rows(&w[0], &w[1]) != Ordering::Greater));
        assert!(rows.iter().all(|r| r.error.is_empty()), "{rows:#?}");
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let a = rows_to_csv(&run_experiment(&cfg(SMALL), 1).unwrap()).unwrap();
        let b = rows_to_csv(&run_experiment(&cfg(SMALL), 3).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_whitening_below_d_gives_half_loss() {
        let rows = run_experiment(&cfg(SMALL), 1).unwrap();
        for r in terminal(&rows).filter(|r| r.whitening_mode == "full" && r.dataset_size <= 8) {
            let loss = r.test_loss.unwrap();
            assert!((loss - 0.5).abs() < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn discrete_rows_report_per_sample_losses() {
        let text = format!("{SMALL}[optimizer]\nkind = gd, gauss_newton\nlambda = 0, 1\neta = 0.05\n");
        let text = text.replace("grid_points = 40", "grid_points = 40\nmax_steps = 30\nrecord_every = 1");
        let rows = run_experiment(&cfg(&text), 1).unwrap();
        assert_eq!(terminal(&rows).count(), 54);
        for r in terminal(&rows) {
            assert!(r.train_loss.unwrap() < 1.0, "{r:?}");
        }
    }

    #[test]
    fn trajectory_rows_precede_terminal() {
        let text = SMALL.replace("id = t", "id = t\ntrajectory = true").replace("sizes = 4, 8, 16", "sizes = 8");
        let text = text.replace("seeds = 0, 1", "seeds = 0").replace("modes = none, train, full", "modes = none");
        let rows = run_experiment(&cfg(&text), 1).unwrap();
        assert_eq!(rows.len(), 41);
        assert!(rows.last().unwrap().is_terminal());
    }

    #[test]
    fn errors_are_rows_not_failures() {
        let text = SMALL.replace("classes = 3", "classes = 3\nspectrum = custom\ncustom = 1, 2");
        let rows = run_experiment(&cfg(&text), 1).unwrap();
        assert_eq!(rows.len(), 18);
        assert!(rows.iter().all(|r| r.stopping_reason == "error" && !r.error.is_empty()));
    }
}
