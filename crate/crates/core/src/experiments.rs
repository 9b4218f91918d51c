//! Ablations, seed repetitions and plot data.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dynamics::choose_supporting_points;
use crate::error::{DgmError, Result};
use crate::eval::{evaluate_checkpoint, mean_std, EvalMode, EvalReport, EVAL_GRID};
use crate::odegen::{generate_dataset, integrate, linspace, Dataset, Preset};
use crate::trainer::{default_lambda, train, Checkpoint, TrainConfig, TrainHistory};

/// Worker count from `DGM_THREADS`, defaulting to one.
pub fn worker_threads() -> usize {
    std::env::var("DGM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// Runs `f` on every item with at most `threads` workers; results keep the
/// input order.
pub fn run_cells<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = Mutex::new(0usize);
    let out: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("work queue");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *out[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    out.into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect()
}

/// Trains on `data` and scores the result.
pub fn train_and_evaluate(
    data: &Dataset,
    config: &TrainConfig,
    mode: EvalMode,
    eval_seed: u64,
) -> Result<(Checkpoint, TrainHistory, EvalReport)> {
    let (ckpt, history) = train(data, config)?;
    let report = evaluate_checkpoint(&ckpt, mode, eval_seed)?;
    Ok((ckpt, history, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaCell {
    /// λ in units of the default `|D| / |Ẋ|`.
    pub ratio: f64,
    pub lambda: f64,
    pub mean_ll: Option<f64>,
    pub error: Option<String>,
}

/// Drops repeated grid values (with a warning) and keeps the first
/// occurrence order.
pub fn dedup_grid(grid: &[f64]) -> Vec<f64> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &g in grid {
        if seen.insert(g.to_bits()) {
            out.push(g);
        } else {
            warn!("duplicate λ grid value {g} ignored");
        }
    }
    out
}

/// One training run per grid value, where `ratios` are multiples of the
/// default λ. Failed cells are recorded rather than aborting the sweep.
pub fn ablate_lambda(
    data: &Dataset,
    config: &TrainConfig,
    ratios: &[f64],
    mode: EvalMode,
    eval_seed: u64,
    threads: usize,
) -> Result<Vec<LambdaCell>> {
    let ratios = dedup_grid(ratios);
    if ratios.is_empty() {
        return Err(DgmError::Config("λ grid is empty".into()));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(DgmError::Config("λ grid values must be finite and nonnegative".into()));
    }
    let base = default_lambda(data, &choose_supporting_points(data)?);
    Ok(run_cells(&ratios, threads, |&ratio| {
        let lambda = ratio * base;
        let cfg = TrainConfig {
            lambda_final: Some(lambda),
            ..config.clone()
        };
        match train_and_evaluate(data, &cfg, mode, eval_seed) {
            Ok((_, _, r)) => LambdaCell {
                ratio,
                lambda,
                mean_ll: Some(r.mean_ll),
                error: None,
            },
            Err(e) => {
                warn!("λ = {lambda}: {e}");
                LambdaCell {
                    ratio,
                    lambda,
                    mean_ll: None,
                    error: Some(e.to_string()),
                }
            }
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCell {
    /// One Gram matrix across trajectories (true) or one per trajectory.
    pub joint_smoother: bool,
    /// Whether the matching term is active (λ default) or off (λ = 0).
    pub matching: bool,
    pub lambda: f64,
    pub mean_ll: Option<f64>,
    pub error: Option<String>,
}

/// 2×2 grid over joint/separate smoothing and λ default/zero. The
/// `matching = false` cells are plain sequential smoothing.
pub fn ablate_joint(
    data: &Dataset,
    config: &TrainConfig,
    mode: EvalMode,
    eval_seed: u64,
    threads: usize,
) -> Result<Vec<JointCell>> {
    let base = config
        .lambda_final
        .unwrap_or(default_lambda(data, &choose_supporting_points(data)?));
    let cells = [(true, true), (true, false), (false, true), (false, false)];
    Ok(run_cells(&cells, threads, |&(joint, matching)| {
        let lambda = if matching { base } else { 0.0 };
        let mut cfg = config.clone();
        cfg.lambda_final = Some(lambda);
        cfg.smoother.joint = joint;
        let (mean_ll, error) = match train_and_evaluate(data, &cfg, mode, eval_seed) {
            Ok((_, _, r)) => (Some(r.mean_ll), None),
            Err(e) => {
                warn!("joint={joint} λ={lambda}: {e}");
                (None, Some(e.to_string()))
            }
        };
        JointCell {
            joint_smoother: joint,
            matching,
            lambda,
            mean_ll,
            error,
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub seeds: Vec<u64>,
    pub mean_lls: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Regenerates data, retrains and evaluates once per seed; the seed drives
/// the noise realization, the initialization and the test draws.
pub fn repeat_over_seeds(
    preset: Preset,
    config: &TrainConfig,
    seeds: &[u64],
    mode: EvalMode,
    threads: usize,
) -> Result<RepetitionSummary> {
    let results = run_cells(seeds, threads, |&seed| -> Result<f64> {
        let data = generate_dataset(preset, seed)?;
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        Ok(train_and_evaluate(&data, &cfg, mode, seed)?.2.mean_ll)
    });
    let mean_lls = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&mean_lls);
    Ok(RepetitionSummary {
        seeds: seeds.to_vec(),
        mean_lls,
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub traj: usize,
    pub t: f64,
    pub dim: usize,
    pub mean: f64,
    pub lower2sigma: f64,
    pub upper2sigma: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub traj: usize,
    pub t: f64,
    pub dim: usize,
    pub y_obs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub ratio: f64,
    pub lambda: f64,
    pub mean_ll: f64,
    pub std: f64,
}

/// Band and observation tables for every trajectory of `data`.
pub fn plot_tables(ckpt: &Checkpoint, data: &Dataset) -> Result<(Vec<BandRow>, Vec<ObservationRow>)> {
    let times = linspace(0.0, data.horizon(), EVAL_GRID);
    let mut bands = Vec::new();
    let mut obs = Vec::new();
    for (m, traj) in data.trajectories.iter().enumerate() {
        let truth = integrate(&data.spec.system, &traj.x0, &times)?;
        let post = ckpt.predict(&traj.x0, &times)?;
        for (i, t) in times.iter().enumerate() {
            for d in 0..data.state_dim() {
                let mean = post.mean[(i, d)];
                let half = 2.0 * post.var[(i, d)].sqrt();
                bands.push(BandRow {
                    traj: m,
                    t: *t,
                    dim: d,
                    mean,
                    lower2sigma: mean - half,
                    upper2sigma: mean + half,
                    truth: truth[i][d],
                });
            }
        }
        for (t, y) in traj.times.iter().zip(&traj.observations) {
            for (d, v) in y.iter().enumerate() {
                obs.push(ObservationRow {
                    traj: m,
                    t: *t,
                    dim: d,
                    y_obs: *v,
                });
            }
        }
    }
    Ok((bands, obs))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> DgmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DgmError::Io(io),
        other => DgmError::Config(format!("csv: {other:?}")),
    }
}

/// Writes `bands.csv` (`traj,t,dim,mean,lower2sigma,upper2sigma,truth`) and
/// `observations.csv` (`traj,t,dim,y_obs`) into `out_dir`.
pub fn export_plot(ckpt: &Checkpoint, data: &Dataset, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let (bands, obs) = plot_tables(ckpt, data)?;
    let b = out_dir.join("bands.csv");
    let o = out_dir.join("observations.csv");
    write_csv(&b, &bands)?;
    write_csv(&o, &obs)?;
    Ok(vec![b, o])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PhaseSteps;

    #[test]
    fn cells_keep_order_with_several_workers() {
        let items: Vec<u64> = (0..17).collect();
        assert_eq!(run_cells(&items, 4, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(run_cells(&items, 1, |x| x + 1)[16], 17);
    }

    #[test]
    fn duplicate_grid_values_are_dropped() {
        assert_eq!(dedup_grid(&[1.0, 0.5, 1.0, 2.0, 0.5]), vec![1.0, 0.5, 2.0]);
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let data = generate_dataset(Preset::LvGrid(2), 0).unwrap();
        let cfg = TrainConfig {
            phases: PhaseSteps::new(3, 0, 2),
            ..TrainConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn lambda_sweep_has_one_row_per_distinct_value() {
        let (data, cfg) = tiny();
        let rows = ablate_lambda(&data, &cfg, &[0.0625, 0.25, 1.0, 4.0, 1.0], EvalMode::Generalization, 0, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert!((rows[2].lambda - 5.0 * 4.0 / 120.0).abs() < 1e-15);
        assert!(rows.iter().all(|r| r.mean_ll.is_some()));
        assert!(ablate_lambda(&data, &cfg, &[], EvalMode::Train, 0, 1).is_err());
    }

    #[test]
    fn zero_lambda_cell_matches_sequential_joint_cell() {
        let (data, cfg) = tiny();
        let sweep = ablate_lambda(&data, &cfg, &[0.0], EvalMode::Generalization, 3, 1).unwrap();
        let grid = ablate_joint(&data, &cfg, EvalMode::Generalization, 3, 1).unwrap();
        assert_eq!(grid.len(), 4);
        let seq = grid.iter().find(|c| c.joint_smoother && !c.matching).unwrap();
        assert_eq!(seq.mean_ll, sweep[0].mean_ll);
    }

    #[test]
    fn plot_tables_are_consistent() {
        let (data, cfg) = tiny();
        let (ckpt, _) = train(&data, &cfg).unwrap();
        let (bands, obs) = plot_tables(&ckpt, &data).unwrap();
        assert_eq!(obs.len(), data.num_observations() * 2);
        assert_eq!(bands.len(), 4 * EVAL_GRID * 2);
        assert!(bands.iter().all(|r| r.lower2sigma <= r.mean && r.mean <= r.upper2sigma));
        let times = linspace(0.0, data.horizon(), EVAL_GRID);
        let truth = integrate(&data.spec.system, &data.trajectories[1].x0, &times).unwrap();
        let row = &bands[EVAL_GRID * 2 + 7 * 2 + 1];
        assert_eq!((row.traj, row.dim), (1, 1));
        assert_eq!(row.truth.to_bits(), truth[7][1].to_bits());

        let dir = std::env::temp_dir().join(format!("dgm-plot-{}", std::process::id()));
        let files = export_plot(&ckpt, &data, &dir).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("traj,t,dim,mean,lower2sigma,upper2sigma,truth\n"));
        assert_eq!(std::fs::read_to_string(&files[1]).unwrap().lines().count(), obs.len() + 1);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
