//! Ground-truth log-likelihood of the predicted state marginals.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::odegen::{integrate, linspace, sample_test_initial_conditions, Preset, SystemSpec};
use crate::smoother::{PointSet, StatePosterior};
use crate::trainer::Checkpoint;

/// Equidistant evaluation times per trajectory.
pub const EVAL_GRID: usize = 100;
/// Unseen initial conditions in generalization mode.
pub const TEST_TRAJECTORIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Train,
    Generalization,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Train => "train",
            EvalMode::Generalization => "generalization",
        })
    }
}

impl FromStr for EvalMode {
    type Err = DgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalMode::Train),
            "generalization" => Ok(EvalMode::Generalization),
            other => Err(DgmError::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_ll: f64,
    pub per_trajectory: Vec<f64>,
    pub per_dimension: Vec<f64>,
    pub grid_size: usize,
    pub mode: EvalMode,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "mode={} trajectories={} grid={} mean_ll={:.4}",
            self.mode,
            self.per_trajectory.len(),
            self.grid_size,
            self.mean_ll
        )
    }
}

/// `log N(x | μ, σ²)`; a point mass (σ² = 0) scores `+∞` on its atom and
/// `−∞` elsewhere.
pub fn gaussian_log_density(x: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return if x == mean { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// Averages pointwise log densities of `truth[m]` (T×K rows) under
/// `predictions[m]` over dimensions, times and trajectories.
pub fn log_likelihood_report(truth: &[Vec<Vec<f64>>], predictions: &[StatePosterior], mode: EvalMode) -> Result<EvalReport> {
    if truth.is_empty() || truth.len() != predictions.len() {
        return Err(DgmError::Shape("one prediction per ground-truth trajectory is required".into()));
    }
    let grid = truth[0].len();
    let k = truth[0].first().map_or(0, Vec::len);
    let mut per_trajectory = Vec::with_capacity(truth.len());
    let mut per_dimension = vec![0.0; k];
    for (tr, post) in truth.iter().zip(predictions) {
        if tr.len() != grid || post.mean.shape() != (grid, k) || post.var.shape() != (grid, k) {
            return Err(DgmError::Shape("prediction and ground truth grids disagree".into()));
        }
        let mut sum = 0.0;
        for (i, row) in tr.iter().enumerate() {
            for d in 0..k {
                let ll = gaussian_log_density(row[d], post.mean[(i, d)], post.var[(i, d)]);
                sum += ll;
                per_dimension[d] += ll;
            }
        }
        per_trajectory.push(sum / (grid * k) as f64);
    }
    let points = (truth.len() * grid) as f64;
    per_dimension.iter_mut().for_each(|v| *v /= points);
    let mean_ll = per_trajectory.iter().sum::<f64>() / per_trajectory.len() as f64;
    Ok(EvalReport {
        mean_ll,
        per_trajectory,
        per_dimension,
        grid_size: grid,
        mode,
    })
}

/// Integrates `system` from every initial condition on a 100-point grid over
/// `[0, horizon]` and scores the checkpoint's state posterior against it.
pub fn ground_truth_ll(
    ckpt: &Checkpoint,
    system: &SystemSpec,
    x0_list: &[Vec<f64>],
    horizon: f64,
    mode: EvalMode,
) -> Result<EvalReport> {
    if system.state_dim() != ckpt.state_dim() {
        return Err(DgmError::Shape(format!(
            "system has {} states, checkpoint {}",
            system.state_dim(),
            ckpt.state_dim()
        )));
    }
    let times = linspace(0.0, horizon, EVAL_GRID);
    let mut truth = Vec::with_capacity(x0_list.len());
    let mut queries = PointSet::default();
    for x0 in x0_list {
        truth.push(integrate(system, x0, &times)?);
        for t in &times {
            queries.push(x0, *t, None);
        }
    }
    let post = ckpt.predict_points(&queries)?;
    let predictions: Vec<StatePosterior> = (0..x0_list.len())
        .map(|m| StatePosterior {
            mean: post.mean.slice_rows(m * EVAL_GRID, EVAL_GRID),
            var: post.var.slice_rows(m * EVAL_GRID, EVAL_GRID),
        })
        .collect();
    log_likelihood_report(&truth, &predictions, mode)
}

/// Training mode scores the training initial conditions; generalization
/// mode draws ten fresh ones for the checkpoint's preset with `seed`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, mode: EvalMode, seed: u64) -> Result<EvalReport> {
    let x0_list = match mode {
        EvalMode::Train => ckpt.data.trajectories.iter().map(|t| t.x0.clone()).collect(),
        EvalMode::Generalization => {
            let preset: Preset = ckpt
                .spec
                .preset
                .as_deref()
                .ok_or_else(|| DgmError::Config("generalization needs a dataset generated from a preset".into()))?
                .parse()?;
            sample_test_initial_conditions(preset, TEST_TRAJECTORIES, seed)
        }
    };
    ground_truth_ll(ckpt, &ckpt.spec.system, &x0_list, ckpt.data.horizon(), mode)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn perfect(truth: &[Vec<f64>], var: f64) -> StatePosterior {
        StatePosterior {
            mean: Matrix::from_rows(truth),
            var: Matrix::filled(truth.len(), truth[0].len(), var),
        }
    }

    #[test]
    fn perfect_unit_variance_prediction() {
        let tr = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]];
        let r = log_likelihood_report(&[tr.clone()], &[perfect(&tr, 1.0)], EvalMode::Train).unwrap();
        assert!((r.mean_ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((r.mean_ll + 0.9189).abs() < 1e-4);
        assert_eq!(r.grid_size, 3);
    }

    #[test]
    fn overconfidence_is_punished() {
        let tr = vec![vec![1.0]];
        let mut post = perfect(&tr, 1.0);
        post.mean[(0, 0)] = 1.1;
        let mut prev = f64::INFINITY;
        for var in [1e-2, 1e-4, 1e-8, 1e-12] {
            post.var[(0, 0)] = var;
            let ll = log_likelihood_report(&[tr.clone()], &[post.clone()], EvalMode::Train).unwrap().mean_ll;
            assert!(ll < prev);
            prev = ll;
        }
        assert!(prev < -1e9);
        post.var[(0, 0)] = 0.0;
        let ll = log_likelihood_report(&[tr], &[post], EvalMode::Train).unwrap().mean_ll;
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn invariant_under_trajectory_and_dimension_order() {
        let a = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        let b = vec![vec![-1.0, 0.3], vec![0.2, 0.1]];
        let pa = StatePosterior {
            mean: Matrix::from_rows(&[vec![1.2, 1.5], vec![0.1, 1.0]]),
            var: Matrix::from_rows(&[vec![0.3, 0.5], vec![0.2, 2.0]]),
        };
        let pb = StatePosterior {
            mean: Matrix::from_rows(&[vec![-0.7, 0.0], vec![0.0, 0.0]]),
            var: Matrix::from_rows(&[vec![1.0, 0.1], vec![0.4, 0.3]]),
        };
        let r1 = log_likelihood_report(&[a.clone(), b.clone()], &[pa.clone(), pb.clone()], EvalMode::Train).unwrap();
        let r2 = log_likelihood_report(&[b.clone(), a.clone()], &[pb.clone(), pa.clone()], EvalMode::Train).unwrap();
        assert!((r1.mean_ll - r2.mean_ll).abs() < 1e-15);
        let swap = |rows: &[Vec<f64>]| rows.iter().map(|r| vec![r[1], r[0]]).collect::<Vec<_>>();
        let swap_post = |p: &StatePosterior| StatePosterior {
            mean: Matrix::from_rows(&swap(&(0..2).map(|i| p.mean.row(i).to_vec()).collect::<Vec<_>>())),
            var: Matrix::from_rows(&swap(&(0..2).map(|i| p.var.row(i).to_vec()).collect::<Vec<_>>())),
        };
        let r3 = log_likelihood_report(&[swap(&a), swap(&b)], &[swap_post(&pa), swap_post(&pb)], EvalMode::Train).unwrap();
        assert!((r1.mean_ll - r3.mean_ll).abs() < 1e-15);
        assert_eq!(r1.per_dimension[0], r3.per_dimension[1]);
        let mean_of_dims = r1.per_dimension.iter().sum::<f64>() / 2.0;
        assert!((mean_of_dims - r1.mean_ll).abs() < 1e-14);
    }

    #[test]
    fn shapes_are_checked() {
        let tr = vec![vec![1.0, 2.0]];
        assert!(log_likelihood_report(&[tr.clone()], &[], EvalMode::Train).is_err());
        let wrong = perfect(&[vec![1.0]], 1.0);
        assert!(log_likelihood_report(&[tr], &[wrong], EvalMode::Train).is_err());
    }

    #[test]
    fn mode_names_and_mean_std() {
        assert_eq!("generalization".parse::<EvalMode>().unwrap(), EvalMode::Generalization);
        assert_eq!(EvalMode::Train.to_string(), "train");
        assert!("test".parse::<EvalMode>().is_err());
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
