//! Flat `key = value` configuration with `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known for its section; unknown sections or keys are errors so that typos in
//! sweep definitions fail loudly. Lists are comma separated; integer lists
//! also accept `a..b` ranges (half open).
//!
//! ```text
//! [experiment]
//! id = gap
//! seeds = 0..10
//! master_seed = 0
//! size_convention = train      # or joint (train+test, 8:2)
//! output = results/gap.csv
//! trajectory = false
//!
//! [data]
//! source = synthetic           # or files
//! d = 64
//! sizes = 16, 32, 64
//! n_val = 64
//! n_test = 256
//! spectrum = power_law         # flat | custom
//! alpha = 2
//! teacher = linear             # none
//! teacher_seed = 7
//! label_noise = 0.1
//! classes = 10
//! distribution_samples = 4096
//!
//! [whitening]
//! modes = none, train, full    # distribution
//! method = pca                 # zca
//! rank_policy = manual         # jitter
//! jitter = 1e-8
//! center = false
//!
//! [model]
//! kind = linear                # mlp
//! hidden = 64, 64
//! activation = relu
//! head = mse                   # xent
//! reduction = sum              # mean
//! init = zeros                 # isotropic | fan_in
//! init_variance = 1e-4
//! biases = false
//!
//! [optimizer]
//! kind = gradient_flow         # newton_flow | gd | sgd | newton | gauss_newton
//! eta = 0.01
//! lambda = 1
//! batch_size = full
//! epsilon = 0
//! cg_tol = 1e-5
//! cg_max_iter = 1000
//! line_search = false
//!
//! [stopping]
//! cutoff = 0.999
//! max_steps = 10000
//! record_every = 100
//! grid_points = 200
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use whitebench_core::loss::{Loss, OutputHead, Reduction};
use whitebench_core::models::{Activation, DEFAULT_CUTOFF, DEFAULT_INIT_VARIANCE};
use whitebench_core::whitening::{RankPolicy, WhiteningMode, DEFAULT_RELATIVE_JITTER};

use crate::error::{io_err, HarnessError, Result};
use crate::synth::{SpectrumKind, Teacher};

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "experiment",
        &["id", "seeds", "master_seed", "size_convention", "output", "trajectory"],
    ),
    (
        "data",
        &[
            "source",
            "d",
            "sizes",
            "n_val",
            "n_test",
            "spectrum",
            "alpha",
            "custom",
            "teacher",
            "teacher_seed",
            "label_noise",
            "classes",
            "distribution_samples",
            "train_path",
            "val_path",
            "test_path",
        ],
    ),
    ("whitening", &["modes", "method", "rank_policy", "jitter", "center"]),
    (
        "model",
        &["kind", "hidden", "activation", "head", "reduction", "init", "init_variance", "biases"],
    ),
    (
        "optimizer",
        &["kind", "eta", "lambda", "batch_size", "epsilon", "cg_tol", "cg_max_iter", "line_search"],
    ),
    ("stopping", &["cutoff", "max_steps", "record_every", "grid_points"]),
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but untyped configuration: section → key → value.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, SCHEMA)
    }

    /// Parses against an explicit `(section, allowed keys)` schema.
    pub fn parse_with(text: &str, schema: &[(&str, &[&str])]) -> Result<Self> {
        let mut out = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| HarnessError::Config {
                        line,
                        msg: format!("malformed section header {content:?}"),
                    })?
                    .trim();
                if !schema.iter().any(|(s, _)| *s == name) {
                    return Err(HarnessError::Config {
                        line,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| HarnessError::Config {
                line,
                msg: format!("expected `key = value`, found {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.clone().ok_or_else(|| HarnessError::Config {
                line,
                msg: format!("key {key:?} appears before any [section]"),
            })?;
            let allowed = schema.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(HarnessError::Config {
                    line,
                    msg: format!("unknown key {key:?} in [{sec}]"),
                });
            }
            let entries = out.sections.entry(sec.clone()).or_default();
            if entries.contains_key(key) {
                return Err(HarnessError::Config {
                    line,
                    msg: format!("duplicate key {key:?} in [{sec}]"),
                });
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(out)
    }

    pub fn value(&self, section: &str, key: &str) -> Option<&str> {
        self.get(section, key).map(|e| e.value.as_str())
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    pub fn parse_or<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| HarnessError::Config {
                line: e.line,
                msg: format!("cannot parse {key} = {:?}", e.value),
            }),
        }
    }

    fn str_or<'a>(&'a self, section: &str, key: &str, default: &'a str) -> (&'a str, usize) {
        match self.get(section, key) {
            None => (default, 0),
            Some(e) => (e.value.as_str(), e.line),
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.get(section, key) else {
            return Ok(None);
        };
        let bad = || HarnessError::Config {
            line: e.line,
            msg: format!("cannot parse list {key} = {:?}", e.value),
        };
        let mut out = Vec::new();
        for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some((a, b)) = item.split_once("..") {
                let a: i64 = a.trim().parse().map_err(|_| bad())?;
                let b: i64 = b.trim().parse().map_err(|_| bad())?;
                for v in a..b {
                    out.push(v.to_string().parse().map_err(|_| bad())?);
                }
            } else {
                out.push(item.parse().map_err(|_| bad())?);
            }
        }
        Ok(Some(out))
    }
}

fn choice<T: Copy>(value: &str, line: usize, key: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| HarnessError::Config {
            line,
            msg: format!(
                "{key} = {value:?} is not one of {}",
                options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScopeChoice {
    None,
    Train,
    Full,
    Distribution,
}

impl ScopeChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScopeChoice::None => "none",
            ScopeChoice::Train => "train",
            ScopeChoice::Full => "full",
            ScopeChoice::Distribution => "distribution",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "unwhitened" => Some(ScopeChoice::None),
            "train" | "train_only" => Some(ScopeChoice::Train),
            "full" => Some(ScopeChoice::Full),
            "distribution" => Some(ScopeChoice::Distribution),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeConvention {
    /// Dataset size is the number of training samples.
    Train,
    /// Dataset size counts training and test samples, split 8:2.
    Joint,
}

impl SizeConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            SizeConvention::Train => "train",
            SizeConvention::Joint => "joint",
        }
    }

    /// `(n_train, n_test)` for a dataset size.
    pub fn split(&self, size: usize, n_test: usize) -> (usize, usize) {
        match self {
            SizeConvention::Train => (size, n_test),
            SizeConvention::Joint => {
                let train = ((size as f64) * 0.8).round() as usize;
                (train.max(1), (size - train.min(size)).max(1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        d: usize,
        spectrum: SpectrumKind,
        teacher: Teacher,
        label_noise: f64,
        classes: usize,
    },
    Files {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitChoice {
    Zeros,
    Isotropic,
    FanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
    pub init: InitChoice,
    pub init_variance: f64,
    pub biases: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OptimizerChoice {
    GradientFlow,
    NewtonFlow,
    Gd,
    Sgd,
    Newton,
    GaussNewton,
}

impl OptimizerChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerChoice::GradientFlow => "gradient_flow",
            OptimizerChoice::NewtonFlow => "newton_flow",
            OptimizerChoice::Gd => "gd",
            OptimizerChoice::Sgd => "sgd",
            OptimizerChoice::Newton => "newton",
            OptimizerChoice::GaussNewton => "gauss_newton",
        }
    }

    fn options() -> [(&'static str, OptimizerChoice); 6] {
        use OptimizerChoice::*;
        [
            ("gradient_flow", GradientFlow),
            ("newton_flow", NewtonFlow),
            ("gd", Gd),
            ("sgd", Sgd),
            ("newton", Newton),
            ("gauss_newton", GaussNewton),
        ]
    }

    pub fn is_flow(&self) -> bool {
        matches!(self, OptimizerChoice::GradientFlow | OptimizerChoice::NewtonFlow)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub kinds: Vec<OptimizerChoice>,
    pub eta: f64,
    /// Regularization values swept for `gauss_newton`.
    pub lambdas: Vec<f64>,
    /// `None` for full batch.
    pub batch_size: Option<usize>,
    pub epsilon: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub line_search: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingSpec {
    pub cutoff: f64,
    pub max_steps: usize,
    pub record_every: usize,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub id: String,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub size_convention: SizeConvention,
    pub output: Option<PathBuf>,
    pub trajectory: bool,
    pub source: DataSource,
    pub sizes: Vec<usize>,
    pub n_val: usize,
    pub n_test: usize,
    pub distribution_samples: usize,
    pub modes: Vec<ScopeChoice>,
    pub method: WhiteningMode,
    pub rank_policy: RankPolicy,
    pub center: bool,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub stopping: StoppingSpec,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text)?;
        if let DataSource::Files { train, val, test } = &mut cfg.source {
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [train, val, test] {
                if p.is_relative() && !p.exists() && base.join(&*p).exists() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let (id, _) = raw.str_or("experiment", "id", "experiment");
        let seeds = raw.list::<u64>("experiment", "seeds")?.unwrap_or_else(|| vec![0]);
        let (conv, line) = raw.str_or("experiment", "size_convention", "train");
        let size_convention = choice(
            conv,
            line,
            "size_convention",
            &[("train", SizeConvention::Train), ("joint", SizeConvention::Joint)],
        )?;
        let output = raw.get("experiment", "output").map(|e| PathBuf::from(&e.value));

        let (src, line) = raw.str_or("data", "source", "synthetic");
        let source = match src {
            "synthetic" => {
                let (spec, sline) = raw.str_or("data", "spectrum", "power_law");
                let spectrum = match spec {
                    "power_law" => SpectrumKind::PowerLaw(raw.parse_or("data", "alpha", 1.0)?),
                    "flat" => SpectrumKind::Flat,
                    "custom" => SpectrumKind::Custom(raw.list("data", "custom")?.ok_or(HarnessError::Config {
                        line: sline,
                        msg: "spectrum = custom requires a `custom` list".into(),
                    })?),
                    other => {
                        return Err(HarnessError::Config {
                            line: sline,
                            msg: format!("unknown spectrum {other:?}"),
                        })
                    }
                };
                let (t, tline) = raw.str_or("data", "teacher", "linear");
                let teacher = match t {
                    "linear" => Teacher::Linear(raw.parse_or("data", "teacher_seed", 0)?),
                    "none" => Teacher::None,
                    other => {
                        return Err(HarnessError::Config {
                            line: tline,
                            msg: format!("unknown teacher {other:?}"),
                        })
                    }
                };
                DataSource::Synthetic {
                    d: raw.parse_or("data", "d", 64)?,
                    spectrum,
                    teacher,
                    label_noise: raw.parse_or("data", "label_noise", 0.0)?,
                    classes: raw.parse_or("data", "classes", 10)?,
                }
            }
            "files" => {
                let path = |k: &str| -> Result<PathBuf> {
                    raw.get("data", k).map(|e| PathBuf::from(&e.value)).ok_or(HarnessError::Config {
                        line,
                        msg: format!("source = files requires {k}"),
                    })
                };
                DataSource::Files {
                    train: path("train_path")?,
                    val: path("val_path")?,
                    test: path("test_path")?,
                }
            }
            other => {
                return Err(HarnessError::Config {
                    line,
                    msg: format!("unknown data source {other:?}"),
                })
            }
        };
        let sizes = raw.list::<usize>("data", "sizes")?.unwrap_or_else(|| vec![100]);

        let modes = match raw.get("whitening", "modes") {
            None => vec![ScopeChoice::None],
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    ScopeChoice::parse(s).ok_or(HarnessError::Config {
                        line: e.line,
                        msg: format!("unknown whitening mode {s:?}"),
                    })
                })
                .collect::<Result<_>>()?,
        };
        let (m, line) = raw.str_or("whitening", "method", "pca");
        let method = choice(m, line, "method", &[("pca", WhiteningMode::Pca), ("zca", WhiteningMode::Zca)])?;
        let (rp, line) = raw.str_or("whitening", "rank_policy", "jitter");
        let rank_policy = match rp {
            "jitter" => RankPolicy::Jitter {
                relative: raw.parse_or("whitening", "jitter", DEFAULT_RELATIVE_JITTER)?,
            },
            "manual" => RankPolicy::ManualRankControl,
            other => {
                return Err(HarnessError::Config {
                    line,
                    msg: format!("unknown rank_policy {other:?}"),
                })
            }
        };

        let (k, line) = raw.str_or("model", "kind", "linear");
        let kind = choice(k, line, "kind", &[("linear", ModelKind::Linear), ("mlp", ModelKind::Mlp)])?;
        let (a, line) = raw.str_or("model", "activation", "relu");
        let activation = choice(a, line, "activation", &[("relu", Activation::Relu), ("tanh", Activation::Tanh)])?;
        let (h, line) = raw.str_or("model", "head", "mse");
        let head = choice(h, line, "head", &[("mse", OutputHead::LinearMse), ("xent", OutputHead::SoftmaxXent)])?;
        let default_reduction = if kind == ModelKind::Linear { "sum" } else { "mean" };
        let (r, line) = raw.str_or("model", "reduction", default_reduction);
        let reduction = choice(r, line, "reduction", &[("sum", Reduction::Sum), ("mean", Reduction::Mean)])?;
        let default_init = if kind == ModelKind::Linear { "zeros" } else { "isotropic" };
        let (i, line) = raw.str_or("model", "init", default_init);
        let init = choice(
            i,
            line,
            "init",
            &[
                ("zeros", InitChoice::Zeros),
                ("isotropic", InitChoice::Isotropic),
                ("fan_in", InitChoice::FanIn),
            ],
        )?;
        let model = ModelSpec {
            kind,
            hidden: raw.list("model", "hidden")?.unwrap_or_else(|| vec![64, 64]),
            activation,
            loss: Loss { head, reduction },
            init,
            init_variance: raw.parse_or("model", "init_variance", DEFAULT_INIT_VARIANCE)?,
            biases: raw.parse_or("model", "biases", false)?,
        };

        let default_opt = if kind == ModelKind::Linear { "gradient_flow" } else { "sgd" };
        let kinds = match raw.get("optimizer", "kind") {
            None => vec![choice(default_opt, 0, "kind", &OptimizerChoice::options())?],
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| choice(s, e.line, "optimizer kind", &OptimizerChoice::options()))
                .collect::<Result<_>>()?,
        };
        let batch_size = match raw.get("optimizer", "batch_size") {
            None => None,
            Some(e) if e.value == "full" => None,
            Some(e) => Some(e.value.parse().map_err(|_| HarnessError::Config {
                line: e.line,
                msg: format!("batch_size must be `full` or an integer, got {:?}", e.value),
            })?),
        };
        let optimizer = OptimizerSpec {
            kinds,
            eta: raw.parse_or("optimizer", "eta", 0.01)?,
            lambdas: raw.list("optimizer", "lambda")?.unwrap_or_else(|| vec![1.0]),
            batch_size,
            epsilon: raw.parse_or("optimizer", "epsilon", 0.0)?,
            cg_tol: raw.parse_or("optimizer", "cg_tol", 1e-5)?,
            cg_max_iter: raw.parse_or("optimizer", "cg_max_iter", 1000)?,
            line_search: raw.parse_or("optimizer", "line_search", false)?,
        };
        let stopping = StoppingSpec {
            cutoff: raw.parse_or("stopping", "cutoff", DEFAULT_CUTOFF)?,
            max_steps: raw.parse_or("stopping", "max_steps", 10_000)?,
            record_every: raw.parse_or("stopping", "record_every", 100)?,
            grid_points: raw.parse_or("stopping", "grid_points", 200)?,
        };
        let cfg = RunConfig {
            id: id.to_string(),
            seeds,
            master_seed: raw.parse_or("experiment", "master_seed", 0)?,
            size_convention,
            output,
            trajectory: raw.parse_or("experiment", "trajectory", false)?,
            source,
            sizes,
            n_val: raw.parse_or("data", "n_val", 32)?,
            n_test: raw.parse_or("data", "n_test", 128)?,
            distribution_samples: raw.parse_or("data", "distribution_samples", 4096)?,
            modes,
            method,
            rank_policy,
            center: raw.parse_or("whitening", "center", false)?,
            model,
            optimizer,
            stopping,
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be non-empty and positive");
        }
        if self.modes.is_empty() {
            return bad("whitening modes must be non-empty");
        }
        if self.optimizer.kinds.is_empty() || self.optimizer.lambdas.is_empty() {
            return bad("optimizer kinds and lambdas must be non-empty");
        }
        if self.id.contains(',') || self.id.is_empty() {
            return bad("experiment id must be non-empty and contain no commas");
        }
        if let DataSource::Files { train, val, test } = &self.source {
            for p in [train, val, test] {
                if !p.exists() {
                    return Err(HarnessError::Invalid(format!("data file {} does not exist", p.display())));
                }
            }
        }
        for k in &self.optimizer.kinds {
            if k.is_flow() && self.model.kind != ModelKind::Linear {
                return bad("gradient_flow and newton_flow require model kind = linear");
            }
        }
        if self.stopping.grid_points < 2 {
            return bad("grid_points must be ≥ 2");
        }
        Ok(())
    }
}
