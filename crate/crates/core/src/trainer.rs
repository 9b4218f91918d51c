//! Adam with decoupled weight decay over a three-phase schedule.
//!
//! During the transition phase λ and the dynamics weight decay ramp from 0
//! to their final values as `final·(s/S)^0.8`. The training phase holds them
//! constant, and the finetune phase drops the learning rate.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{flatten_params, value_and_grad, DecayGroup, Layout, ParamVector};
use crate::dynamics::{choose_supporting_points, SupportSet};
use crate::error::{DgmError, Result};
use crate::linalg::Matrix;
use crate::matching::{objective_tape, weight_decay_penalty, Divergence, LossBreakdown, ObjectiveContext};
use crate::nets::{init_dynamics_params, init_smoother_params, DynamicsArch, DynamicsMode, InputScaling};
use crate::odegen::{Dataset, DatasetSpec, Preset, SystemKind};
use crate::smoother::{fit_input_scaling, state_posterior, GpProblem, PointSet, SmootherConfig, StatePosterior};

pub const CHECKPOINT_VERSION: &str = "dgm-ckpt-v1";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Initial noise std relative to each dimension's observation std.
pub const INIT_NOISE_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSteps {
    pub transition: usize,
    pub training: usize,
    pub finetune: usize,
}

impl PhaseSteps {
    pub fn new(transition: usize, training: usize, finetune: usize) -> Self {
        Self {
            transition,
            training,
            finetune,
        }
    }

    pub fn total(&self) -> usize {
        self.transition + self.training + self.finetune
    }

    /// Phase lengths used for each preset.
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Dp1 => Self::new(1000, 1000, 1000),
            Preset::Qu1 => Self::new(1000, 2000, 1000),
            Preset::Dp100 => Self::new(5000, 4000, 1000),
            Preset::Qu64 => Self::new(6000, 3000, 1000),
            _ => Self::new(1000, 0, 1000),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Transition,
    Training,
    Finetune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Log noise scales are trained with everything else.
    #[default]
    Learned,
    /// Noise fixed at the generating noise level of the dataset.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phases: PhaseSteps,
    pub lr_main: f64,
    pub lr_finetune: f64,
    pub wd_smoother: f64,
    /// Final dynamics weight decay; the smoother value when absent.
    pub wd_dynamics_final: Option<f64>,
    /// Final λ; `|D| / |Ẋ|` when absent.
    pub lambda_final: Option<f64>,
    pub schedule_power: f64,
    pub seed: u64,
    pub dynamics: DynamicsMode,
    pub smoother: SmootherConfig,
    pub divergence: Divergence,
    pub noise: NoiseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phases: PhaseSteps::new(1000, 0, 1000),
            lr_main: 0.05,
            lr_finetune: 0.01,
            wd_smoother: 0.1,
            wd_dynamics_final: None,
            lambda_final: None,
            schedule_power: 0.8,
            seed: 0,
            dynamics: DynamicsMode::Neural,
            smoother: SmootherConfig::default(),
            divergence: Divergence::W2,
            noise: NoiseMode::Learned,
        }
    }
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let dynamics = match preset {
            Preset::Linear => DynamicsMode::FactorizedLinear { inner: vec![6, 6] },
            _ => DynamicsMode::Neural,
        };
        Self {
            phases: PhaseSteps::for_preset(preset),
            dynamics,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.phases.total() == 0 {
            return Err(DgmError::Config("no training steps configured".into()));
        }
        if !positive(self.lr_main) || !positive(self.lr_finetune) {
            return Err(DgmError::Config("learning rates must be positive".into()));
        }
        if !nonneg(self.wd_smoother) || !self.wd_dynamics_final.is_none_or(nonneg) {
            return Err(DgmError::Config("weight decay must be nonnegative".into()));
        }
        if !self.lambda_final.is_none_or(nonneg) {
            return Err(DgmError::Config("λ must be nonnegative".into()));
        }
        if !positive(self.schedule_power) {
            return Err(DgmError::Config("schedule power must be positive".into()));
        }
        if let crate::smoother::KernelMode::Rff { features, .. } = self.smoother.kernel {
            if features < 2 || features % 2 != 0 {
                return Err(DgmError::Config(format!("feature count must be even and ≥ 2, got {features}")));
            }
            if !self.smoother.joint {
                return Err(DgmError::Config("random features need the joint smoother".into()));
            }
        }
        Ok(())
    }

    pub fn wd_dynamics(&self) -> f64 {
        self.wd_dynamics_final.unwrap_or(self.wd_smoother)
    }
}

/// `|D| / |Ẋ|`: observation time points over support points.
pub fn default_lambda(data: &Dataset, support: &SupportSet) -> f64 {
    data.num_observations() as f64 / support.len() as f64
}

/// Values in force at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValues {
    pub phase: Phase,
    pub lr: f64,
    pub lambda: f64,
    pub wd_dynamics: f64,
}

/// Schedule at `step` (0-based) for final values `lambda_final`, `wd_final`.
pub fn schedule(config: &TrainConfig, lambda_final: f64, step: usize) -> ScheduleValues {
    let p = config.phases;
    let ramp = if p.transition == 0 || step >= p.transition {
        1.0
    } else {
        (step as f64 / p.transition as f64).powf(config.schedule_power)
    };
    let phase = if step < p.transition {
        Phase::Transition
    } else if step < p.transition + p.training {
        Phase::Training
    } else {
        Phase::Finetune
    };
    ScheduleValues {
        phase,
        lr: if phase == Phase::Finetune { config.lr_finetune } else { config.lr_main },
        lambda: lambda_final * ramp,
        wd_dynamics: config.wd_dynamics() * ramp,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam update with decoupled decay `p ← p − lr·wd_i·p` per coordinate.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], lr: f64, decay: &[f64]) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), decay.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = params[i];
        params[i] = p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * decay[i] * p;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub wd_dynamics: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// Wall-clock seconds spent in transition, training and finetune.
    pub phase_seconds: [f64; 3],
}

/// Smoother and dynamics settings needed to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub scaling: InputScaling,
    pub arch: DynamicsArch,
    pub smoother: SmootherConfig,
    pub lambda_final: f64,
    pub support_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub spec: DatasetSpec,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub hyper: ModelHyper,
    pub config: TrainConfig,
    pub final_metrics: LossBreakdown,
    /// Training data; the smoother conditions on it at prediction time.
    pub data: Dataset,
}

impl Checkpoint {
    pub fn param_vector(&self) -> ParamVector {
        ParamVector {
            values: self.params.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn problem(&self) -> GpProblem {
        GpProblem::from_dataset(&self.data, &self.hyper.scaling)
    }

    pub fn state_dim(&self) -> usize {
        self.hyper.arch.state_dim
    }

    /// State posterior in original units at `(x0, t)` for every time.
    pub fn predict(&self, x0: &[f64], times: &[f64]) -> Result<StatePosterior> {
        let mut q = PointSet::default();
        for t in times {
            q.push(x0, *t, None);
        }
        self.predict_points(&q)
    }

    pub fn predict_points(&self, queries: &PointSet) -> Result<StatePosterior> {
        if queries.x0.iter().any(|x| x.len() != self.state_dim()) {
            return Err(DgmError::Shape(format!("initial conditions must have {} entries", self.state_dim())));
        }
        let post = state_posterior(&self.param_vector(), &self.problem(), queries, &self.hyper.smoother)?;
        Ok(post.to_original_units(&self.hyper.scaling.state))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(DgmError::Config(format!("unsupported checkpoint version `{}`", self.version)));
        }
        if self.layout.total_len() != self.params.len() || !self.layout.is_consistent() {
            return Err(DgmError::Shape("checkpoint layout does not match its parameters".into()));
        }
        self.hyper.arch.validate()?;
        self.data.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Everything fixed for the duration of a run.
pub struct TrainSetup {
    pub ctx: ObjectiveContext,
    pub support: SupportSet,
    pub lambda_final: f64,
    pub init: ParamVector,
    /// Coordinates excluded from updates.
    pub frozen: Vec<bool>,
}

pub fn prepare(data: &Dataset, config: &TrainConfig) -> Result<TrainSetup> {
    config.validate()?;
    data.validate()?;
    let scaling = fit_input_scaling(data);
    let problem = GpProblem::from_dataset(data, &scaling);
    let support = choose_supporting_points(data)?;
    let lambda_final = config.lambda_final.unwrap_or_else(|| default_lambda(data, &support));
    let k = data.state_dim();
    let system = &data.spec.system;
    let arch = DynamicsArch {
        mode: config.dynamics.clone(),
        state_dim: k,
        system: (system.kind != SystemKind::RandomLinear || config.dynamics == DynamicsMode::Parametric)
            .then(|| system.clone()),
        scaling: scaling.state.clone(),
    };
    arch.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = init_smoother_params(k, INIT_NOISE_FRACTION, &mut rng);
    tensors.extend(init_dynamics_params(&arch, &mut rng)?);
    let mut init = flatten_params(&tensors);
    let mut frozen = vec![false; init.len()];
    if config.noise == NoiseMode::Fixed {
        let log_noise: Vec<f64> = (0..k)
            .map(|d| (system.noise_var[d].sqrt() / scaling.state.scale[d]).ln())
            .collect();
        init.set_segment("smoother.log_noise", &Matrix::row_vector(&log_noise))?;
        let seg = init.layout.get("smoother.log_noise").expect("smoother segment");
        frozen[seg.range()].iter_mut().for_each(|f| *f = true);
    }
    let ctx = ObjectiveContext {
        problem,
        support: support.points(),
        arch,
        smoother: config.smoother.clone(),
        divergence: config.divergence,
    };
    Ok(TrainSetup {
        ctx,
        support,
        lambda_final,
        init,
        frozen,
    })
}

fn decay_rates(groups: &[DecayGroup], wd_s: f64, wd_d: f64) -> Vec<f64> {
    groups
        .iter()
        .map(|g| match g {
            DecayGroup::Smoother => wd_s,
            DecayGroup::Dynamics => wd_d,
            DecayGroup::Exempt => 0.0,
        })
        .collect()
}

/// Objective value and gradient at `params` with the given λ, reported as a
/// breakdown that includes the (separately applied) decay penalty.
fn loss_and_grad(
    setup: &TrainSetup,
    params: &ParamVector,
    lambda: f64,
    wd_s: f64,
    wd_d: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let parts = std::cell::Cell::new((0.0, 0.0));
    let g = value_and_grad(
        |t, v| {
            let o = objective_tape(t, v, &setup.ctx, lambda)?;
            parts.set((t.scalar(o.data), o.matching.map_or(0.0, |m| t.scalar(m))));
            Ok(o.loss)
        },
        params,
    )?;
    let (data, matching) = parts.get();
    let loss = LossBreakdown::new(data, matching, weight_decay_penalty(params, wd_s, wd_d), lambda);
    Ok((loss, g.gradient))
}

/// Full-batch training. Deterministic in `(data, config)`.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    let setup = prepare(data, config)?;
    let mut params = setup.init.clone();
    let groups = params.decay_groups();
    let mut opt = OptimizerState::new(params.len());
    let mut history = TrainHistory::default();
    let total = config.phases.total();
    info!(
        "training on {} observations, {} support points, λ = {:.4}, {} steps",
        data.num_observations(),
        setup.support.len(),
        setup.lambda_final,
        total
    );
    let mut phase_start = Instant::now();
    let mut current = Phase::Transition;
    for step in 0..total {
        let s = schedule(config, setup.lambda_final, step);
        if s.phase != current {
            history.phase_seconds[current as usize] += phase_start.elapsed().as_secs_f64();
            phase_start = Instant::now();
            current = s.phase;
        }
        let (loss, mut grad) = loss_and_grad(&setup, &params, s.lambda, config.wd_smoother, s.wd_dynamics)
            .map_err(|e| DgmError::NonFinite(format!("step {step} ({:?}): {e}", s.phase)))?;
        if !loss.is_finite() {
            return Err(DgmError::NonFinite(format!("step {step}: {loss:?}")));
        }
        if step % 100 == 0 {
            info!(
                "step {step:5} {:?} data {:.4} match {:.4} λ {:.4}",
                s.phase, loss.data_term, loss.wasserstein_term, s.lambda
            );
        } else {
            debug!("step {step} total {:.6}", loss.total);
        }
        for (g, f) in grad.iter_mut().zip(&setup.frozen) {
            if *f {
                *g = 0.0;
            }
        }
        let decay = decay_rates(&groups, config.wd_smoother, s.wd_dynamics);
        adam_step(&mut opt, &mut params.values, &grad, s.lr, &decay);
        history.steps.push(StepRecord {
            step,
            phase: s.phase,
            lr: s.lr,
            wd_dynamics: s.wd_dynamics,
            loss,
        });
    }
    history.phase_seconds[current as usize] += phase_start.elapsed().as_secs_f64();

    let last = schedule(config, setup.lambda_final, total.saturating_sub(1));
    let (final_metrics, _) = loss_and_grad(&setup, &params, last.lambda, config.wd_smoother, last.wd_dynamics)?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        spec: data.spec.clone(),
        layout: params.layout.clone(),
        params: params.values,
        hyper: ModelHyper {
            scaling: setup.ctx.problem.scaling.clone(),
            arch: setup.ctx.arch.clone(),
            smoother: config.smoother.clone(),
            lambda_final: setup.lambda_final,
            support_count: setup.support.len(),
        },
        config: config.clone(),
        final_metrics,
        data: data.clone(),
    };
    Ok((ckpt, history))
}
