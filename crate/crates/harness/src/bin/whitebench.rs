use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use whitebench::config::{ModelKind, RunConfig};
use whitebench::error::{HarnessError, Result};
use whitebench::experiment::{rows_to_csv, run_experiment};
use whitebench::io::{flush_stdout, ingest_path, read_compressed, write_compressed, write_matrix, write_text};
use whitebench::plot::{emit_plot, PlotSpec};
use whitebench::verify::{run_verify, Suite, VerifyOptions};
use whitebench_core::data_model::{compute_f, compute_k, compute_mixed_k, estimate_input_rank, Dataset, SplitTag, RANK_CUTOFF_RATIO};
use whitebench_core::info_props::{compress_whitened, reconstruct_k};
use whitebench_core::whitening::{apply, fit_whitener, FitScope, RankPolicy, WhiteningConfig, WhiteningMode};

#[derive(Parser)]
#[command(name = "whitebench", version, about = "Whitening, second moments and training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pca,
    Zca,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Train,
    Full,
    Distribution,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankArg {
    Jitter,
    Manual,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    F,
    K,
    Mixed,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a whitening transform and apply it to the input.
    Whiten {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "train")]
        scope: ScopeArg,
        #[arg(long = "rank-policy", value_enum, default_value = "jitter")]
        rank_policy: RankArg,
        #[arg(long)]
        output: PathBuf,
        /// Files whose samples form the fit set (default: the input itself).
        #[arg(long = "fit")]
        fit: Vec<PathBuf>,
        /// Subtract the fit-set mean.
        #[arg(long)]
        center: bool,
    },
    /// Write F = XXᵀ, K = XᵀX, or the mixed Gram XᵀX_other.
    SecondMoments {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        which: WhichArg,
        #[arg(long)]
        output: PathBuf,
        /// Second dataset for `--which mixed`.
        #[arg(long)]
        other: Option<PathBuf>,
    },
    /// Gradient or Newton flow on a linear model, with early stopping.
    TrainLinear {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// SGD, Newton or regularized Gauss-Newton training of an MLP.
    TrainMlp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the configured grid of sizes, whitening modes, seeds and optimizers.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Store whitened data as its (n−d)·d free parameters.
    Compress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rebuild K from a compressed file.
    ReconstructK {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Number of singular values of F above a relative cutoff.
    Rank {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "cutoff-ratio", default_value_t = RANK_CUTOFF_RATIO)]
        cutoff_ratio: f64,
    },
    /// Run the property battery; exit code 0 iff every check passes.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        report: PathBuf,
        /// Random rotations per model family in the orbit suite.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a results CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load(path: &Path) -> Result<Dataset> {
    Ok(ingest_path(path, SplitTag::Combined)?.0)
}

fn emit_rows(cfg: &RunConfig, workers: usize, output: Option<PathBuf>) -> Result<()> {
    let rows = run_experiment(cfg, workers)?;
    let text = rows_to_csv(&rows)?;
    match output.or_else(|| cfg.output.clone()) {
        Some(p) => {
            write_text(&p, &text)?;
            let failed = rows.iter().filter(|r| r.stopping_reason == "error").count();
            eprintln!("wrote {} rows to {} ({failed} failed runs)", rows.len(), p.display());
            Ok(())
        }
        None => flush_stdout(&text),
    }
}

fn load_config(path: &Path, expect: Option<ModelKind>) -> Result<RunConfig> {
    let cfg = RunConfig::from_file(path)?;
    if let Some(kind) = expect {
        if cfg.model.kind != kind {
            return Err(HarnessError::Invalid(format!(
                "{} configures a {:?} model; use the matching train-* subcommand or sweep",
                path.display(),
                cfg.model.kind
            )));
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Whiten {
            input,
            mode,
            scope,
            rank_policy,
            output,
            fit,
            center,
        } => {
            let x = load(&input)?;
            let fit_set = if fit.is_empty() {
                x.clone()
            } else {
                let parts = fit.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Dataset> = parts.iter().collect();
                let id = fit.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("+");
                Dataset::concat(&refs, id)?
            };
            let mut cfg = WhiteningConfig::new(
                match mode {
                    ModeArg::Pca => WhiteningMode::Pca,
                    ModeArg::Zca => WhiteningMode::Zca,
                },
                match scope {
                    ScopeArg::Train => FitScope::TrainOnly,
                    ScopeArg::Full => FitScope::Full,
                    ScopeArg::Distribution => FitScope::Distribution,
                },
                match rank_policy {
                    RankArg::Jitter => RankPolicy::jitter(),
                    RankArg::Manual => RankPolicy::ManualRankControl,
                },
            );
            cfg.center = center;
            let w = fit_whitener(&fit_set, cfg)?;
            write_matrix(&output, apply(&w, &x)?.values())?;
            eprintln!(
                "{} whitening, scope {}, fit on {} (rank {} of {})",
                w.mode().as_str(),
                w.scope().as_str(),
                w.fit_dataset_id(),
                w.fit_rank(),
                w.feature_dim()
            );
        }
        Command::SecondMoments {
            input,
            which,
            output,
            other,
        } => {
            let x = load(&input)?;
            let m = match which {
                WhichArg::F => compute_f(&x),
                WhichArg::K => compute_k(&x),
                WhichArg::Mixed => {
                    let other = other.ok_or_else(|| HarnessError::Invalid("--which mixed requires --other <path>".into()))?;
                    compute_mixed_k(&x, &load(&other)?)?
                }
            };
            write_matrix(&output, &m)?;
        }
        Command::TrainLinear { config, output, workers } => {
            emit_rows(&load_config(&config, Some(ModelKind::Linear))?, workers, output)?;
        }
        Command::TrainMlp { config, output, workers } => {
            emit_rows(&load_config(&config, Some(ModelKind::Mlp))?, workers, output)?;
        }
        Command::Sweep { config, workers, output } => {
            emit_rows(&load_config(&config, None)?, workers, output)?;
        }
        Command::Compress { input, output } => {
            let c = compress_whitened(&load(&input)?)?;
            write_compressed(&output, &c)?;
            eprintln!(
                "stored {} scalars for d = {}, n = {}{}",
                c.stored_scalars(),
                c.d,
                c.n,
                if c.permutation.is_some() { " (pivoted columns)" } else { "" }
            );
        }
        Command::ReconstructK { input, output } => {
            write_matrix(&output, &reconstruct_k(&read_compressed(&input)?)?)?;
        }
        Command::Rank { input, cutoff_ratio } => {
            let x = load(&input)?;
            println!("{}", estimate_input_rank(&x, cutoff_ratio)?);
        }
        Command::Verify {
            suite,
            report,
            trials,
            seed,
        } => {
            let suites = Suite::parse_selection(&suite)?;
            let rep = run_verify(
                &suites,
                VerifyOptions {
                    orbit_trials: trials,
                    seed,
                },
            );
            write_text(&report, &(serde_json::to_string_pretty(&rep)? + "\n"))?;
            for c in rep.checks.iter().filter(|c| !c.pass) {
                eprintln!("FAIL {}: {} (metric {:e}, tol {:e})", c.id, c.detail, c.metric, c.tol);
            }
            eprintln!("{} passed, {} failed", rep.passed, rep.failed);
            return Ok(if rep.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Plot { results, spec, output } => {
            emit_plot(&results, &PlotSpec::from_file(&spec)?, &output)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
