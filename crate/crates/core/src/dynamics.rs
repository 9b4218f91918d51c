//! Support points and the dynamics-side gradient marginals.
//!
//! The dynamics model is evaluated at the smoother's posterior state mean
//! of every support point, so its marginals depend on the smoother through
//! those means only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, ParamVector, Tape, Var};
use crate::error::{DgmError, Result};
use crate::linalg::Matrix;
use crate::nets::{self, eval_with, DynamicsArch};
use crate::odegen::{linspace, Dataset};
use crate::smoother::PointSet;

/// Support points per trajectory when a dataset has more than one.
pub const SUPPORT_PER_TRAJECTORY: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSource {
    ObservationTimes,
    Equidistant30,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    /// `(t, x0, trajectory)` triples.
    pub entries: Vec<(f64, Vec<f64>, usize)>,
    pub source: SupportSource,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn points(&self) -> PointSet {
        let mut p = PointSet::default();
        for (t, x0, m) in &self.entries {
            p.push(x0, *t, Some(*m));
        }
        p
    }
}

/// A single trajectory is matched at its observation times; several
/// trajectories get 30 equidistant times each over their observed range.
pub fn choose_supporting_points(data: &Dataset) -> Result<SupportSet> {
    if data.trajectories.is_empty() {
        return Err(DgmError::Config("dataset has no trajectories".into()));
    }
    let mut entries = Vec::new();
    if data.trajectories.len() == 1 {
        let traj = &data.trajectories[0];
        for t in &traj.times {
            entries.push((*t, traj.x0.clone(), 0));
        }
        return Ok(SupportSet {
            entries,
            source: SupportSource::ObservationTimes,
        });
    }
    for (m, traj) in data.trajectories.iter().enumerate() {
        let (lo, hi) = match (traj.times.first(), traj.times.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err(DgmError::Config(format!("trajectory {m} has no observations"))),
        };
        for t in linspace(lo, hi, SUPPORT_PER_TRAJECTORY) {
            entries.push((t, traj.x0.clone(), m));
        }
    }
    Ok(SupportSet {
        entries,
        source: SupportSource::Equidistant30,
    })
}

/// Independent Gaussian marginals indexed by (support point, dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginalSet {
    /// S×K
    pub mean: Matrix,
    /// S×K, nonnegative
    pub std: Matrix,
}

impl GaussianMarginalSet {
    pub fn new(mean: Matrix, std: Matrix) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(DgmError::Shape(format!(
                "marginal means {:?} and stds {:?} disagree",
                mean.shape(),
                std.shape()
            )));
        }
        if std.as_slice().iter().any(|s| !(*s >= 0.0)) {
            return Err(DgmError::Domain("marginal standard deviations must be nonnegative".into()));
        }
        Ok(Self { mean, std })
    }

    /// Number of (point, dimension) marginals.
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.len() == 0
    }
}

/// Dynamics mean and std at every row of `state_means` (standardized).
pub fn dynamics_marginals(
    arch: &DynamicsArch,
    params: &ParamVector,
    state_means: &Matrix,
) -> Result<GaussianMarginalSet> {
    eval_with(params, |t, v| {
        let x = t.constant(state_means.clone());
        let (mean, std) = dynamics_marginals_tape(t, v, arch, x)?;
        GaussianMarginalSet::new(t.value(mean).clone(), t.value(std).clone())
    })
}

pub fn dynamics_marginals_tape(t: &mut Tape, vars: &ParamVars, arch: &DynamicsArch, state_means: Var) -> Result<(Var, Var)> {
    nets::dynamics_tape(t, vars, arch, state_means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::flatten_params;
    use crate::nets::{init_dynamics_params, DynamicsMode, StateScaling};
    use crate::odegen::{generate_dataset, Preset, SystemSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn support_counts_follow_the_dataset_shape() {
        let lv1 = generate_dataset(Preset::Lv1, 0).unwrap();
        let s = choose_supporting_points(&lv1).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.source, SupportSource::ObservationTimes);
        assert_eq!(s.entries[7].0, lv1.trajectories[0].times[7]);

        let lv100 = generate_dataset(Preset::Lv100, 0).unwrap();
        let s = choose_supporting_points(&lv100).unwrap();
        assert_eq!(s.len(), 3000);
        assert_eq!(s.source, SupportSource::Equidistant30);

        let dp = generate_dataset(Preset::Dp100, 0).unwrap().subset(&[0, 1, 2, 3, 4]);
        let s = choose_supporting_points(&dp).unwrap();
        assert_eq!(s.len(), 150);
        let horizon = dp.horizon();
        assert!(s.entries.iter().all(|(t, _, _)| (0.0..=horizon).contains(t)));
        assert_eq!(s.entries[31].1, dp.trajectories[1].x0);
        assert_eq!(s.points().traj[31], Some(1));
    }

    #[test]
    fn marginal_sets_validate() {
        assert!(GaussianMarginalSet::new(Matrix::zeros(2, 2), Matrix::zeros(2, 1)).is_err());
        assert!(GaussianMarginalSet::new(Matrix::zeros(1, 1), Matrix::scalar(-1.0)).is_err());
        let m = GaussianMarginalSet::new(Matrix::zeros(3, 2), Matrix::filled(3, 2, 0.5)).unwrap();
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn parametric_lotka_volterra_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = DynamicsArch {
            mode: DynamicsMode::Parametric,
            state_dim: 2,
            system: Some(SystemSpec::lotka_volterra()),
            scaling: StateScaling::identity(2),
        };
        let mut p = flatten_params(&init_dynamics_params(&arch, &mut rng).unwrap());
        p.set_segment("dynamics.theta", &Matrix::row_vector(&[1.0, 1.0, 1.0, 1.0])).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.5], vec![1.0, 1.0]]);
        let m = dynamics_marginals(&arch, &p, &x).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.mean.row(0), &[-1.0, 0.0]);
        assert!(m.std.as_slice().iter().all(|s| *s >= 0.0));
    }
}
