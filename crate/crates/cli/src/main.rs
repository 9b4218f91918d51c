use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dgm_core::eval::{evaluate_checkpoint, EvalMode};
use dgm_core::experiments::{ablate_joint, ablate_lambda, export_plot, worker_threads, write_csv, LambdaRow};
use dgm_core::nets::DynamicsMode;
use dgm_core::odegen::{generate_dataset, linspace, Dataset, Preset};
use dgm_core::smoother::KernelMode;
use dgm_core::trainer::{train, Checkpoint, TrainConfig};

/// `println!` that stays quiet when stdout is a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "dgm", version, about = "Distributional gradient matching for ODE system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a noisy dataset from a preset.
    GenData {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint plus `<out>.history.json`.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground-truth log-likelihood of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Train)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// State posterior (original units) along one initial condition.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated initial condition.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        /// Comma-separated query times; 100 points over the training horizon when absent.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per λ multiple of the default `|D|/|Ẋ|`.
    AblateLambda {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.0625,0.25,1,4")]
        lambda_grid: Vec<f64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Generalization)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint vs separate smoothing, with and without gradient matching.
    AblateJoint {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Generalization)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Band and observation CSVs for plotting.
    ExportPlot {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset to plot; the checkpoint's training data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON file with `TrainConfig` fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random Fourier feature count; exact kernel when absent.
    #[arg(long)]
    features: Option<usize>,
    /// `neural`, `parametric` or `factorized:a1,a2,...`.
    #[arg(long)]
    dynamics: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Train,
    Generalization,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Train => EvalMode::Train,
            ModeArg::Generalization => EvalMode::Generalization,
        }
    }
}

/// Output wrapper that echoes the invocation.
#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    args: Vec<String>,
    #[serde(flatten)]
    body: &'a T,
}

fn tagged<T: Serialize>(body: &T) -> Result<String> {
    let t = Tagged {
        args: std::env::args().skip(1).collect(),
        body,
    };
    Ok(serde_json::to_string_pretty(&t)?)
}

/// List outputs (ablation cells) under a `cells` key next to the echo.
#[derive(Serialize)]
struct TaggedCells<'a, T: Serialize> {
    args: Vec<String>,
    cells: &'a [T],
}

fn tagged_cells<T: Serialize>(cells: &[T]) -> Result<String> {
    let t = TaggedCells {
        args: std::env::args().skip(1).collect(),
        cells,
    };
    Ok(serde_json::to_string_pretty(&t)?)
}

fn parse_dynamics(s: &str) -> Result<DynamicsMode> {
    match s {
        "neural" => Ok(DynamicsMode::Neural),
        "parametric" => Ok(DynamicsMode::Parametric),
        other => {
            let Some(widths) = other.strip_prefix("factorized:") else {
                bail!("unknown dynamics `{other}` (expected neural, parametric or factorized:a1,a2,...)");
            };
            let inner = widths
                .split(',')
                .filter(|w| !w.is_empty())
                .map(|w| w.trim().parse::<usize>().with_context(|| format!("bad factor width `{w}`")))
                .collect::<Result<Vec<_>>>()?;
            Ok(DynamicsMode::FactorizedLinear { inner })
        }
    }
}

fn load_model_inputs(args: &ModelArgs) -> Result<(Dataset, TrainConfig)> {
    let data = Dataset::load(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    let mut config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => match data.spec.preset.as_deref().map(str::parse::<Preset>) {
            Some(Ok(p)) => TrainConfig::for_preset(p),
            _ => TrainConfig::default(),
        },
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(d) = &args.dynamics {
        config.dynamics = parse_dynamics(d)?;
    }
    if let Some(f) = args.features {
        config.smoother.kernel = KernelMode::Rff {
            features: f,
            seed: config.seed,
        };
    }
    config.validate()?;
    Ok((data, config))
}

fn history_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.history.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { preset, seed, out } => {
            let data = generate_dataset(preset, seed)?;
            data.save(&out)?;
            say!(
                "wrote {} trajectories, {} observations to {}",
                data.num_trajectories(),
                data.num_observations(),
                out.display()
            );
        }
        Command::Train { model, out } => {
            let (data, config) = load_model_inputs(&model)?;
            let (ckpt, history) = train(&data, &config)?;
            ckpt.save(&out)?;
            let hist = history_path(&out);
            std::fs::write(&hist, tagged(&history)?)?;
            say!(
                "data_term={:.4} wasserstein_term={:.4} checkpoint={} history={}",
                ckpt.final_metrics.data_term,
                ckpt.final_metrics.wasserstein_term,
                out.display(),
                hist.display()
            );
        }
        Command::Eval { ckpt, mode, seed, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let report = evaluate_checkpoint(&ckpt, mode.into(), seed)?;
            say!("{}", report.summary());
            let json = tagged(&report)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => say!("{json}"),
            }
        }
        Command::Predict { ckpt, x0, times, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let times = if times.is_empty() {
                linspace(0.0, ckpt.data.horizon(), 100)
            } else {
                times
            };
            let post = ckpt.predict(&x0, &times)?;
            #[derive(Serialize)]
            struct Prediction<'a> {
                x0: &'a [f64],
                times: &'a [f64],
                mean: Vec<Vec<f64>>,
                var: Vec<Vec<f64>>,
            }
            let rows = |m: &dgm_core::linalg::Matrix| (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
            let p = Prediction {
                x0: &x0,
                times: &times,
                mean: rows(&post.mean),
                var: rows(&post.var),
            };
            std::fs::write(&out, tagged(&p)?)?;
            say!("wrote {} predictions to {}", times.len(), out.display());
        }
        Command::AblateLambda {
            model,
            lambda_grid,
            mode,
            out,
        } => {
            let (data, config) = load_model_inputs(&model)?;
            let cells = ablate_lambda(&data, &config, &lambda_grid, mode.into(), config.seed, worker_threads())?;
            let rows: Vec<LambdaRow> = cells
                .iter()
                .map(|c| LambdaRow {
                    ratio: c.ratio,
                    lambda: c.lambda,
                    mean_ll: c.mean_ll.unwrap_or(f64::NAN),
                    std: 0.0,
                })
                .collect();
            write_csv(&out, &rows)?;
            std::fs::write(out.with_extension("json"), tagged_cells(&cells)?)?;
            for c in &cells {
                match (&c.mean_ll, &c.error) {
                    (Some(ll), _) => say!("ratio={} lambda={:.6} mean_ll={ll:.4}", c.ratio, c.lambda),
                    (None, e) => say!("ratio={} lambda={:.6} failed: {}", c.ratio, c.lambda, e.as_deref().unwrap_or("?")),
                }
            }
        }
        Command::AblateJoint { model, mode, out } => {
            let (data, config) = load_model_inputs(&model)?;
            let cells = ablate_joint(&data, &config, mode.into(), config.seed, worker_threads())?;
            std::fs::write(&out, tagged_cells(&cells)?)?;
            for c in &cells {
                say!(
                    "joint_smoother={} matching={} lambda={:.6} mean_ll={}",
                    c.joint_smoother,
                    c.matching,
                    c.lambda,
                    c.mean_ll.map_or("failed".to_string(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::ExportPlot { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let data = match data {
                Some(p) => Dataset::load(&p)?,
                None => ckpt.data.clone(),
            };
            for f in export_plot(&ckpt, &data, &out)? {
                say!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_flag_forms() {
        assert_eq!(parse_dynamics("neural").unwrap(), DynamicsMode::Neural);
        assert_eq!(parse_dynamics("parametric").unwrap(), DynamicsMode::Parametric);
        assert_eq!(
            parse_dynamics("factorized:3,6,6,3").unwrap(),
            DynamicsMode::FactorizedLinear { inner: vec![3, 6, 6, 3] }
        );
        assert!(parse_dynamics("factorized:3,x").is_err());
        assert!(parse_dynamics("linear").is_err());
    }

    #[test]
    fn history_sits_next_to_the_checkpoint() {
        assert_eq!(history_path(Path::new("runs/ck.json")), PathBuf::from("runs/ck.history.json"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
