use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};

use super::integrate::{integrate, linspace};
use super::systems::{make_random_linear_system, SystemKind, SystemSpec};

pub const DATASET_SCHEMA: &str = "dgm-dataset-v1";

/// Named dataset recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Lv1,
    Lv100,
    Lo1,
    Lo125,
    Dp1,
    Dp100,
    Qu1,
    Qu64,
    /// LV initial conditions on an `n × n` grid over `[0.5, 1.5]²`, five
    /// observations each. `LvGrid(10)` is the LV100 grid.
    LvGrid(usize),
    /// One trajectory of a random 3-D linear system, started on the unit
    /// sphere and observed 100 times on `[0, 10]`.
    Linear,
}

impl Preset {
    pub fn system_kind(self) -> SystemKind {
        match self {
            Preset::Lv1 | Preset::Lv100 | Preset::LvGrid(_) => SystemKind::LotkaVolterra,
            Preset::Lo1 | Preset::Lo125 => SystemKind::Lorenz,
            Preset::Dp1 | Preset::Dp100 => SystemKind::DoublePendulum,
            Preset::Qu1 | Preset::Qu64 => SystemKind::Quadrocopter,
            Preset::Linear => SystemKind::RandomLinear,
        }
    }

    pub fn horizon(self) -> f64 {
        horizon_of(self.system_kind())
    }

    /// The generating spec, before noise is drawn.
    pub fn dataset_spec(self, seed: u64) -> DatasetSpec {
        let kind = self.system_kind();
        let horizon = horizon_of(kind);
        let (system, ics, n_obs) = match self {
            Preset::Lv1 => (SystemSpec::lotka_volterra(), vec![vec![1.0, 2.0]], 100),
            Preset::Lv100 => (SystemSpec::lotka_volterra(), lv_grid(10), 5),
            Preset::LvGrid(n) => (SystemSpec::lotka_volterra(), lv_grid(n), 5),
            Preset::Lo1 => (SystemSpec::lorenz(), vec![vec![-2.5, 2.5, 2.5]], 100),
            Preset::Lo125 => {
                let axis: Vec<f64> = (0..5).map(|i| -5.0 + 2.5 * i as f64).collect();
                let mut ics = Vec::new();
                for &a in &axis {
                    for &b in &axis {
                        for &c in &axis {
                            ics.push(vec![a, b, c]);
                        }
                    }
                }
                (SystemSpec::lorenz(), ics, 10)
            }
            Preset::Dp1 => (
                SystemSpec::double_pendulum(),
                vec![vec![-PI / 6.0, -PI / 6.0, 0.0, 0.0]],
                100,
            ),
            Preset::Dp100 => {
                let axis: Vec<f64> = (0..10).map(|i| -PI / 6.0 + PI * i as f64 / 27.0).collect();
                let mut ics = Vec::new();
                for &a in &axis {
                    for &b in &axis {
                        ics.push(vec![a, b, 0.0, 0.0]);
                    }
                }
                (SystemSpec::double_pendulum(), ics, 5)
            }
            Preset::Qu1 => (SystemSpec::quadrocopter(), vec![vec![0.0; 12]], 100),
            Preset::Qu64 => {
                let axis: Vec<f64> = (0..4).map(|i| -PI / 18.0 + PI * i as f64 / 27.0).collect();
                let mut ics = Vec::new();
                for &a in &axis {
                    for &b in &axis {
                        for &c in &axis {
                            let mut x = vec![0.0; 12];
                            x[6] = a;
                            x[7] = b;
                            x[8] = c;
                            ics.push(x);
                        }
                    }
                }
                (SystemSpec::quadrocopter(), ics, 15)
            }
            Preset::Linear => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11ea_0000);
                (make_random_linear_system(seed), vec![unit_sphere_point(&mut rng)], 100)
            }
        };
        let times = linspace(0.0, horizon, n_obs);
        DatasetSpec {
            system,
            obs_times_per_traj: vec![times; ics.len()],
            initial_conditions: ics,
            seed,
            preset: Some(self.to_string()),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Lv1 => write!(f, "lv1"),
            Preset::Lv100 => write!(f, "lv100"),
            Preset::Lo1 => write!(f, "lo1"),
            Preset::Lo125 => write!(f, "lo125"),
            Preset::Dp1 => write!(f, "dp1"),
            Preset::Dp100 => write!(f, "dp100"),
            Preset::Qu1 => write!(f, "qu1"),
            Preset::Qu64 => write!(f, "qu64"),
            Preset::LvGrid(n) => write!(f, "lvgrid{n}"),
            Preset::Linear => write!(f, "linear"),
        }
    }
}

impl FromStr for Preset {
    type Err = DgmError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let p = match lower.as_str() {
            "lv1" => Preset::Lv1,
            "lv100" => Preset::Lv100,
            "lo1" => Preset::Lo1,
            "lo125" => Preset::Lo125,
            "dp1" => Preset::Dp1,
            "dp100" => Preset::Dp100,
            "qu1" => Preset::Qu1,
            "qu64" => Preset::Qu64,
            "linear" => Preset::Linear,
            other => match other.strip_prefix("lvgrid").map(str::parse::<usize>) {
                Some(Ok(n)) if n >= 2 => Preset::LvGrid(n),
                _ => return Err(DgmError::UnknownPreset(s.to_string())),
            },
        };
        Ok(p)
    }
}

fn horizon_of(kind: SystemKind) -> f64 {
    match kind {
        SystemKind::LotkaVolterra | SystemKind::Quadrocopter | SystemKind::RandomLinear => 10.0,
        SystemKind::Lorenz | SystemKind::DoublePendulum => 1.0,
    }
}

fn lv_grid(n: usize) -> Vec<Vec<f64>> {
    let axis = linspace(0.5, 1.5, n);
    let mut ics = Vec::with_capacity(n * n);
    for &a in &axis {
        for &b in &axis {
            ics.push(vec![a, b]);
        }
    }
    ics
}

fn unit_sphere_point<R: Rng>(rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub system: SystemSpec,
    pub initial_conditions: Vec<Vec<f64>>,
    pub obs_times_per_traj: Vec<Vec<f64>>,
    pub seed: u64,
    #[serde(default)]
    pub preset: Option<String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let k = self.system.state_dim();
        if self.initial_conditions.is_empty() {
            return Err(DgmError::Config("dataset has no trajectories".into()));
        }
        if self.initial_conditions.len() != self.obs_times_per_traj.len() {
            return Err(DgmError::Config(format!(
                "{} initial conditions but {} time lists",
                self.initial_conditions.len(),
                self.obs_times_per_traj.len()
            )));
        }
        for (m, (x0, times)) in self
            .initial_conditions
            .iter()
            .zip(&self.obs_times_per_traj)
            .enumerate()
        {
            if x0.len() != k {
                return Err(DgmError::Shape(format!(
                    "trajectory {m}: initial condition has {} entries, expected {k}",
                    x0.len()
                )));
            }
            if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(DgmError::Config(format!(
                    "trajectory {m}: observation times must be nonempty and strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedTrajectory {
    pub x0: Vec<f64>,
    pub times: Vec<f64>,
    /// `times.len()` rows of `K` values.
    pub observations: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: String,
    pub spec: DatasetSpec,
    pub trajectories: Vec<ObservedTrajectory>,
}

/// Ground truth on a dense grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x0: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn simulate(system: &SystemSpec, x0: &[f64], times: &[f64]) -> Result<Self> {
        Ok(Self {
            x0: x0.to_vec(),
            times: times.to_vec(),
            states: integrate(system, x0, times)?,
        })
    }
}

/// Standard normal draw that depends only on its coordinates, so any subset
/// of the noise can be regenerated in any order.
pub fn noise_draw(seed: u64, trajectory: u64, time_index: u64, dim: u64) -> f64 {
    let mut key = [0u8; 32];
    for (i, v) in [seed, trajectory, time_index, dim].into_iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key).sample(StandardNormal)
}

pub fn generate_dataset(preset: Preset, seed: u64) -> Result<Dataset> {
    generate_from_spec(preset.dataset_spec(seed))
}

pub fn generate_from_spec(spec: DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let std: Vec<f64> = spec.system.noise_var.iter().map(|v| v.sqrt()).collect();
    let mut trajectories = Vec::with_capacity(spec.initial_conditions.len());
    for (m, (x0, times)) in spec
        .initial_conditions
        .iter()
        .zip(&spec.obs_times_per_traj)
        .enumerate()
    {
        let clean = integrate(&spec.system, x0, times)?;
        let observations = clean
            .into_iter()
            .enumerate()
            .map(|(n, x)| {
                x.into_iter()
                    .enumerate()
                    .map(|(k, v)| v + std[k] * noise_draw(spec.seed, m as u64, n as u64, k as u64))
                    .collect()
            })
            .collect();
        trajectories.push(ObservedTrajectory {
            x0: x0.clone(),
            times: times.clone(),
            observations,
        });
    }
    Ok(Dataset {
        schema: DATASET_SCHEMA.to_string(),
        spec,
        trajectories,
    })
}

/// Uniform draws from the preset family's test box.
///
/// The quadrocopter box randomizes roll and pitch only; yaw and all other
/// coordinates are zero.
pub fn sample_test_initial_conditions(preset: Preset, count: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(count >= 1, "need at least one initial condition");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match preset.system_kind() {
            SystemKind::LotkaVolterra => {
                (0..2).map(|_| rng.random_range(0.5..=1.5)).collect()
            }
            SystemKind::Lorenz => (0..3).map(|_| rng.random_range(-5.0..=5.0)).collect(),
            SystemKind::DoublePendulum => {
                let a = rng.random_range(-PI / 6.0..=PI / 6.0);
                let b = rng.random_range(-PI / 6.0..=PI / 6.0);
                vec![a, b, 0.0, 0.0]
            }
            SystemKind::Quadrocopter => {
                let mut x = vec![0.0; 12];
                x[6] = rng.random_range(-PI / 18.0..=PI / 18.0);
                x[7] = rng.random_range(-PI / 18.0..=PI / 18.0);
                x
            }
            SystemKind::RandomLinear => unit_sphere_point(&mut rng),
        })
        .collect()
}

impl Dataset {
    pub fn state_dim(&self) -> usize {
        self.spec.system.state_dim()
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// Total count of observation time points (one per row, not per scalar).
    pub fn num_observations(&self) -> usize {
        self.trajectories.iter().map(|t| t.times.len()).sum()
    }

    /// Latest observation time across trajectories.
    pub fn horizon(&self) -> f64 {
        self.trajectories
            .iter()
            .filter_map(|t| t.times.last().copied())
            .fold(0.0, f64::max)
    }

    /// Checks schema tag and array shapes.
    pub fn validate(&self) -> Result<()> {
        if self.schema != DATASET_SCHEMA {
            return Err(DgmError::Config(format!(
                "unsupported dataset schema `{}`",
                self.schema
            )));
        }
        self.spec.validate()?;
        let k = self.state_dim();
        if self.trajectories.is_empty() {
            return Err(DgmError::Config("dataset has no trajectories".into()));
        }
        for (m, t) in self.trajectories.iter().enumerate() {
            if t.observations.len() != t.times.len() || t.observations.iter().any(|o| o.len() != k) {
                return Err(DgmError::Shape(format!(
                    "trajectory {m}: observations do not match {} times × {k} dims",
                    t.times.len()
                )));
            }
            if t.x0.len() != k {
                return Err(DgmError::Shape(format!("trajectory {m}: x0 has wrong length")));
            }
        }
        Ok(())
    }

    /// A dataset with only the listed trajectories.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut spec = self.spec.clone();
        spec.initial_conditions = indices.iter().map(|&i| spec.initial_conditions[i].clone()).collect();
        spec.obs_times_per_traj = indices.iter().map(|&i| spec.obs_times_per_traj[i].clone()).collect();
        Dataset {
            schema: self.schema.clone(),
            spec,
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
