//! Deep-kernel GP smoother: marginal likelihood, derivative posterior and
//! state posterior, one independent GP per state dimension.
//!
//! All quantities live in standardized state units, where the kernel has
//! unit signal variance. Time is kept in original units, so derivatives are
//! standardized states per original time unit.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, ParamVector, Tape, Var};
use crate::error::{DgmError, Result};
use crate::linalg::Matrix;
use crate::nets::{self, eval_with, CoreOutput, InputScaling, StateScaling, FEATURE_DIM};
use crate::odegen::Dataset;
use crate::rff;

/// Floor applied to posterior variances before taking square roots.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Negative variances below this are reported when clamped.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelMode {
    /// Dense ARD-RBF Gram matrices.
    Exact,
    /// Random Fourier features of the lengthscale-scaled head output; frequencies
    /// are a function of `(seed, dimension)` only.
    Rff { features: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub kernel: KernelMode,
    /// One Gram matrix across all trajectories. When false, observations of
    /// different trajectories are uncorrelated.
    pub joint: bool,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            kernel: KernelMode::Exact,
            joint: true,
        }
    }
}

/// `(x0, t)` pairs in original units, tagged with the training trajectory
/// they belong to (`None` for points off the training set).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub x0: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub traj: Vec<Option<usize>>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, x0: &[f64], t: f64, traj: Option<usize>) {
        self.x0.push(x0.to_vec());
        self.t.push(t);
        self.traj.push(traj);
    }

    pub fn inputs(&self, scaling: &InputScaling) -> Matrix {
        scaling.rows(self.x0.iter().map(Vec::as_slice).zip(self.t.iter().copied()))
    }
}

/// Observations prepared for the GP: points plus standardized targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GpProblem {
    pub points: PointSet,
    /// N×K standardized observations.
    pub y: Matrix,
    pub scaling: InputScaling,
}

impl GpProblem {
    /// Stacks all trajectories; targets use the same standardization as the
    /// initial-condition inputs.
    pub fn from_dataset(data: &Dataset, scaling: &InputScaling) -> Self {
        let mut points = PointSet::default();
        let mut rows = Vec::new();
        for (m, traj) in data.trajectories.iter().enumerate() {
            for (t, obs) in traj.times.iter().zip(&traj.observations) {
                points.push(&traj.x0, *t, Some(m));
                rows.push(scaling.state.normalize(obs));
            }
        }
        Self {
            points,
            y: Matrix::from_rows(&rows),
            scaling: scaling.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }
}

/// Standardization fitted on all observations, with the time axis scaled by
/// the latest observation time.
pub fn fit_input_scaling(data: &Dataset) -> InputScaling {
    let rows: Vec<Vec<f64>> = data
        .trajectories
        .iter()
        .flat_map(|t| t.observations.iter().cloned())
        .collect();
    let horizon = data.horizon();
    InputScaling {
        state: StateScaling::fit(&rows),
        time_scale: if horizon > 0.0 { horizon } else { 1.0 },
    }
}

/// `K_ij = exp(-½ Σ_d (a_id - b_jd)² / ℓ_d²)` between feature rows.
pub fn kernel_matrix(a: &Matrix, b: &Matrix, lengthscales: &[f64]) -> Matrix {
    assert_eq!(a.cols(), lengthscales.len());
    assert_eq!(b.cols(), lengthscales.len());
    let scale = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] / lengthscales[j]);
    crate::autodiff::rbf_matrix(&scale(a), &scale(b))
}

/// Result of conditioning on the observations of one dimension.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conditioned {
    /// `½ rᵀ(K+σ²I)⁻¹r + ½ logdet(K+σ²I)`
    pub nll: Var,
    /// `(K+σ²I)⁻¹ r`
    pub alpha: Var,
    /// `(K+σ²I)⁻¹`
    pub inverse: Var,
}

pub(crate) fn condition_exact(t: &mut Tape, k_oo: Var, noise_var: Var, resid: Var) -> Result<Conditioned> {
    let k_sigma = t.add_diag(k_oo, noise_var);
    let inverse = t.spd_inverse(k_sigma)?;
    let alpha = t.matmul(inverse, resid);
    let ra = t.mul(resid, alpha);
    let quad = t.sum(ra);
    let logdet = t.logdet(k_sigma, inverse);
    let both = t.add(quad, logdet);
    let nll = t.scale(both, 0.5);
    Ok(Conditioned { nll, alpha, inverse })
}

/// `μ = ṁ + K̇α` and `diag(K̈) - diag(K̇(K+σ²I)⁻¹K̇ᵀ)`.
pub(crate) fn derivative_moments(
    t: &mut Tape,
    c: &Conditioned,
    k_dot: Var,
    kdd_diag: Var,
    mean_dot: Var,
) -> (Var, Var) {
    let shift = t.matmul(k_dot, c.alpha);
    let mu = t.add(mean_dot, shift);
    let ka = t.matmul(k_dot, c.inverse);
    let prod = t.mul(ka, k_dot);
    let explained = t.row_sum(prod);
    let var = t.sub(kdd_diag, explained);
    (mu, var)
}

/// `μ = m + K_qo α` and `1 - diag(K_qo(K+σ²I)⁻¹K_oq)`.
pub(crate) fn state_moments(t: &mut Tape, c: &Conditioned, k_qo: Var, mean_q: Var) -> (Var, Var) {
    let shift = t.matmul(k_qo, c.alpha);
    let mu = t.add(mean_q, shift);
    let ka = t.matmul(k_qo, c.inverse);
    let prod = t.mul(ka, k_qo);
    let explained = t.row_sum(prod);
    let neg = t.neg(explained);
    let var = t.add_const(neg, 1.0);
    (mu, var)
}

/// 1 where two points share a training trajectory, 0 elsewhere.
fn trajectory_mask(a: &[Option<usize>], b: &[Option<usize>]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| match (a[i], b[j]) {
        (Some(x), Some(y)) if x == y => 1.0,
        _ => 0.0,
    })
}

/// Smoother-side quantities that the training objective needs.
#[derive(Clone, Copy, Debug)]
pub struct GpTerms {
    /// Σ_k data NLL, 1×1.
    pub data_nll: Var,
    /// Derivative posterior at support points, S×K means and S×K stds.
    pub deriv_mean: Option<Var>,
    pub deriv_std: Option<Var>,
    /// State posterior mean at support points, S×K.
    pub state_mean: Option<Var>,
}

/// Per-dimension blocks computed from the features of one dimension.
struct DimBlocks {
    nll: Var,
    deriv: Option<(Var, Var)>,
    state_mean: Option<Var>,
}

/// Network outputs shared by every dimension.
struct Evaluated {
    core_o: CoreOutput,
    mean_o: Var,
    core_s: Option<CoreOutput>,
    mean_s: Option<(Var, Var)>,
}

fn check_problem(problem: &GpProblem) -> Result<()> {
    if problem.is_empty() {
        return Err(DgmError::Config("no observations to condition on".into()));
    }
    if problem.points.len() != problem.len() {
        return Err(DgmError::Shape("observation points and targets disagree".into()));
    }
    Ok(())
}

fn evaluate_nets(
    t: &mut Tape,
    vars: &ParamVars,
    problem: &GpProblem,
    support: Option<&PointSet>,
) -> Result<Evaluated> {
    let ts = problem.scaling.time_scale;
    let xo = t.constant(problem.points.inputs(&problem.scaling));
    let core_o = nets::smoother_core(t, vars, xo, ts)?;
    let (mean_o, _) = nets::mean_head(t, vars, core_o)?;
    let (core_s, mean_s) = match support {
        Some(s) if !s.is_empty() => {
            let xs = t.constant(s.inputs(&problem.scaling));
            let core = nets::smoother_core(t, vars, xs, ts)?;
            let m = nets::mean_head(t, vars, core)?;
            (Some(core), Some(m))
        }
        _ => (None, None),
    };
    Ok(Evaluated { core_o, mean_o, core_s, mean_s })
}

fn noise_var(t: &mut Tape, vars: &ParamVars, d: usize) -> Result<Var> {
    let log_noise = vars.get("smoother.log_noise")?;
    let ln = t.slice_cols(log_noise, d, 1);
    let twice = t.scale(ln, 2.0);
    Ok(t.exp(twice))
}

fn exact_dim(
    t: &mut Tape,
    vars: &ParamVars,
    problem: &GpProblem,
    support: Option<&PointSet>,
    ev: &Evaluated,
    config: &SmootherConfig,
    d: usize,
) -> Result<DimBlocks> {
    let (u_o, _) = nets::scaled_feature_head(t, vars, ev.core_o, d)?;
    let mut k_oo = t.rbf(u_o, u_o);
    if !config.joint {
        let mask = t.constant(trajectory_mask(&problem.points.traj, &problem.points.traj));
        k_oo = t.mul(k_oo, mask);
    }
    let y = t.constant(Matrix::column(&problem.y.col_to_vec(d)));
    let m_o = t.slice_cols(ev.mean_o, d, 1);
    let resid = t.sub(y, m_o);
    let sigma2 = noise_var(t, vars, d)?;
    let cond = condition_exact(t, k_oo, sigma2, resid)?;

    let (Some(core_s), Some((mean_s, mean_s_dot)), Some(supp)) = (ev.core_s, ev.mean_s, support) else {
        return Ok(DimBlocks { nll: cond.nll, deriv: None, state_mean: None });
    };
    let (u_s, u_s_dot) = nets::scaled_feature_head(t, vars, core_s, d)?;
    let mut k_so = t.rbf(u_s, u_o);
    if !config.joint {
        let mask = t.constant(trajectory_mask(&supp.traj, &problem.points.traj));
        k_so = t.mul(k_so, mask);
    }
    // ∂k(u_i, v_j)/∂t_i = k_ij (v_j - u_i)·u̇_i
    let cross = t.matmul_nt(u_s_dot, u_o);
    let self_dot = t.mul(u_s_dot, u_s);
    let self_dot = t.row_sum(self_dot);
    let self_dot = t.neg(self_dot);
    let factor = t.add_col(cross, self_dot);
    let k_dot = t.mul(k_so, factor);
    // ∂²k/∂t₁∂t₂ at coinciding points is |u̇|² for a unit-lengthscale RBF.
    let sq = t.square(u_s_dot);
    let kdd = t.row_sum(sq);
    let m_dot = t.slice_cols(mean_s_dot, d, 1);
    let deriv = derivative_moments(t, &cond, k_dot, kdd, m_dot);
    let m_s = t.slice_cols(mean_s, d, 1);
    let shift = t.matmul(k_so, cond.alpha);
    let state_mean = t.add(m_s, shift);
    Ok(DimBlocks { nll: cond.nll, deriv: Some(deriv), state_mean: Some(state_mean) })
}

#[allow(clippy::too_many_arguments)]
fn dim_blocks(
    t: &mut Tape,
    vars: &ParamVars,
    problem: &GpProblem,
    support: Option<&PointSet>,
    ev: &Evaluated,
    config: &SmootherConfig,
    d: usize,
) -> Result<DimBlocks> {
    match &config.kernel {
        KernelMode::Exact => exact_dim(t, vars, problem, support, ev, config, d),
        KernelMode::Rff { features, seed } => {
            if !config.joint {
                return Err(DgmError::Config(
                    "random-feature kernels support only the joint smoother".into(),
                ));
            }
            let spec = rff::FourierFeatureSpec::for_dimension(*features, *seed, d)?;
            let (u_o, _) = nets::scaled_feature_head(t, vars, ev.core_o, d)?;
            let psi_o = rff::features_tape(t, &spec, u_o);
            let y = t.constant(Matrix::column(&problem.y.col_to_vec(d)));
            let m_o = t.slice_cols(ev.mean_o, d, 1);
            let resid = t.sub(y, m_o);
            let sigma2 = noise_var(t, vars, d)?;
            let cond = rff::condition_features(t, psi_o, sigma2, resid)?;
            let (Some(core_s), Some((mean_s, mean_s_dot))) = (ev.core_s, ev.mean_s) else {
                return Ok(DimBlocks { nll: cond.nll, deriv: None, state_mean: None });
            };
            let (u_s, u_s_dot) = nets::scaled_feature_head(t, vars, core_s, d)?;
            let (psi_s, psi_s_dot) = rff::features_with_derivative_tape(t, &spec, u_s, u_s_dot);
            let m_dot = t.slice_cols(mean_s_dot, d, 1);
            let deriv = rff::feature_moments(t, &cond, psi_s_dot, m_dot);
            let m_s = t.slice_cols(mean_s, d, 1);
            let shift = t.matmul(psi_s, cond.weights);
            let state_mean = t.add(m_s, shift);
            Ok(DimBlocks {
                nll: cond.nll,
                deriv: Some(deriv),
                state_mean: Some(state_mean),
            })
        }
    }
}

/// Builds the smoother part of the objective on `t`. Derivative and state
/// quantities at `support` are produced only when support points are given.
pub fn gp_terms(
    t: &mut Tape,
    vars: &ParamVars,
    problem: &GpProblem,
    support: Option<&PointSet>,
    config: &SmootherConfig,
) -> Result<GpTerms> {
    check_problem(problem)?;
    let ev = evaluate_nets(t, vars, problem, support)?;
    let k = problem.state_dim();
    let mut nlls = Vec::with_capacity(k);
    let mut mus = Vec::new();
    let mut stds = Vec::new();
    let mut states = Vec::new();
    for d in 0..k {
        let b = dim_blocks(t, vars, problem, support, &ev, config, d)?;
        nlls.push(b.nll);
        if let (Some((mu, var)), Some(sm)) = (b.deriv, b.state_mean) {
            mus.push(mu);
            stds.push(t.sqrt_floor(var, VARIANCE_FLOOR));
            states.push(sm);
        }
    }
    let all = t.concat_rows(&nlls);
    let data_nll = t.sum(all);
    let cat = |t: &mut Tape, v: &[Var]| (!v.is_empty()).then(|| t.concat_cols(v));
    Ok(GpTerms {
        data_nll,
        deriv_mean: cat(t, &mus),
        deriv_std: cat(t, &stds),
        state_mean: cat(t, &states),
    })
}

/// Per dimension and support point: posterior mean and variance of `ẋ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativePosterior {
    /// S×K
    pub mean: Matrix,
    /// S×K
    pub var: Matrix,
}

/// Per dimension and query point: posterior mean and variance of `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePosterior {
    /// Q×K
    pub mean: Matrix,
    /// Q×K
    pub var: Matrix,
}

impl StatePosterior {
    /// Converts standardized moments back to original units.
    pub fn to_original_units(&self, scaling: &StateScaling) -> StatePosterior {
        let mean = Matrix::from_fn(self.mean.rows(), self.mean.cols(), |i, j| {
            scaling.shift[j] + scaling.scale[j] * self.mean[(i, j)]
        });
        let var = Matrix::from_fn(self.var.rows(), self.var.cols(), |i, j| {
            scaling.scale[j].powi(2) * self.var[(i, j)]
        });
        StatePosterior { mean, var }
    }
}

fn clamp_variances(var: &Matrix, what: &str) -> Matrix {
    let worst = var.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    if worst < -NEGATIVE_VARIANCE_TOLERANCE {
        warn!("{what}: clamping posterior variance {worst:.3e} to zero");
    }
    var.map(|v| v.max(0.0))
}

/// Σ_k data NLL at `params`.
pub fn data_nll(params: &ParamVector, problem: &GpProblem, config: &SmootherConfig) -> Result<f64> {
    eval_with(params, |t, v| {
        let g = gp_terms(t, v, problem, None, config)?;
        Ok(t.scalar(g.data_nll))
    })
}

pub fn derivative_posterior(
    params: &ParamVector,
    problem: &GpProblem,
    support: &PointSet,
    config: &SmootherConfig,
) -> Result<DerivativePosterior> {
    if support.is_empty() {
        return Err(DgmError::Config("empty support set".into()));
    }
    eval_with(params, |t, v| {
        check_problem(problem)?;
        let ev = evaluate_nets(t, v, problem, Some(support))?;
        let k = problem.state_dim();
        let mut mean = Matrix::zeros(support.len(), k);
        let mut var = Matrix::zeros(support.len(), k);
        for d in 0..k {
            let b = dim_blocks(t, v, problem, Some(support), &ev, config, d)?;
            let (mu, vr) = b.deriv.expect("support given");
            for i in 0..support.len() {
                mean[(i, d)] = t.value(mu)[(i, 0)];
                var[(i, d)] = t.value(vr)[(i, 0)];
            }
        }
        Ok(DerivativePosterior {
            mean,
            var: clamp_variances(&var, "derivative posterior"),
        })
    })
}

/// Latent state posterior (standardized units) at `queries`.
pub fn state_posterior(
    params: &ParamVector,
    problem: &GpProblem,
    queries: &PointSet,
    config: &SmootherConfig,
) -> Result<StatePosterior> {
    eval_with(params, |t, v| {
        check_problem(problem)?;
        let ev = evaluate_nets(t, v, problem, Some(queries))?;
        let k = problem.state_dim();
        let q = queries.len();
        let mut mean = Matrix::zeros(q, k);
        let mut var = Matrix::zeros(q, k);
        if q == 0 {
            return Ok(StatePosterior { mean, var });
        }
        let core_q = ev.core_s.expect("queries given");
        let (mean_q, _) = ev.mean_s.expect("queries given");
        for d in 0..k {
            let (mu, vr) = match &config.kernel {
                KernelMode::Exact => {
                    let (u_o, _) = nets::scaled_feature_head(t, v, ev.core_o, d)?;
                    let mut k_oo = t.rbf(u_o, u_o);
                    let (u_q, _) = nets::scaled_feature_head(t, v, core_q, d)?;
                    let mut k_qo = t.rbf(u_q, u_o);
                    if !config.joint {
                        let m1 = t.constant(trajectory_mask(&problem.points.traj, &problem.points.traj));
                        k_oo = t.mul(k_oo, m1);
                        let m2 = t.constant(trajectory_mask(&queries.traj, &problem.points.traj));
                        k_qo = t.mul(k_qo, m2);
                    }
                    let y = t.constant(Matrix::column(&problem.y.col_to_vec(d)));
                    let m_o = t.slice_cols(ev.mean_o, d, 1);
                    let resid = t.sub(y, m_o);
                    let sigma2 = noise_var(t, v, d)?;
                    let cond = condition_exact(t, k_oo, sigma2, resid)?;
                    let m_q = t.slice_cols(mean_q, d, 1);
                    state_moments(t, &cond, k_qo, m_q)
                }
                KernelMode::Rff { features, seed } => {
                    let spec = rff::FourierFeatureSpec::for_dimension(*features, *seed, d)?;
                    let (u_o, _) = nets::scaled_feature_head(t, v, ev.core_o, d)?;
                    let psi_o = rff::features_tape(t, &spec, u_o);
                    let y = t.constant(Matrix::column(&problem.y.col_to_vec(d)));
                    let m_o = t.slice_cols(ev.mean_o, d, 1);
                    let resid = t.sub(y, m_o);
                    let sigma2 = noise_var(t, v, d)?;
                    let cond = rff::condition_features(t, psi_o, sigma2, resid)?;
                    let (u_q, _) = nets::scaled_feature_head(t, v, core_q, d)?;
                    let psi_q = rff::features_tape(t, &spec, u_q);
                    let m_q = t.slice_cols(mean_q, d, 1);
                    rff::feature_moments(t, &cond, psi_q, m_q)
                }
            };
            for i in 0..q {
                mean[(i, d)] = t.value(mu)[(i, 0)];
                var[(i, d)] = t.value(vr)[(i, 0)];
            }
        }
        Ok(StatePosterior {
            mean,
            var: clamp_variances(&var, "state posterior"),
        })
    })
}

/// Exact `(K̇, K̈)` blocks of dimension `d` between point sets `a` and `b`:
/// `K̇_ij = ∂k/∂t_a`, `K̈_ij = ∂²k/∂t_a∂t_b`, through the feature map.
pub fn kernel_time_derivs(
    params: &ParamVector,
    scaling: &InputScaling,
    d: usize,
    a: &PointSet,
    b: &PointSet,
) -> Result<(Matrix, Matrix)> {
    let feats = |p: &PointSet| -> Result<(Matrix, Matrix)> {
        eval_with(params, |t, v| {
            let x = t.constant(p.inputs(scaling));
            let core = nets::smoother_core(t, v, x, scaling.time_scale)?;
            let (z, z_dot) = nets::feature_head(t, v, core, d)?;
            Ok((t.value(z).clone(), t.value(z_dot).clone()))
        })
    };
    let ls: Vec<f64> = params
        .segment(&format!("smoother.log_ls{d}"))?
        .iter()
        .map(|l| l.exp())
        .collect();
    let (za, za_dot) = feats(a)?;
    let (zb, zb_dot) = feats(b)?;
    let k = kernel_matrix(&za, &zb, &ls);
    let mut k_dot = Matrix::zeros(a.len(), b.len());
    let mut k_ddot = Matrix::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            // r = (u_a - u_b) in lengthscale units; ∂k/∂u_a = -k r
            let r: Vec<f64> = (0..FEATURE_DIM).map(|c| (za[(i, c)] - zb[(j, c)]) / ls[c]).collect();
            let ua: Vec<f64> = (0..FEATURE_DIM).map(|c| za_dot[(i, c)] / ls[c]).collect();
            let ub: Vec<f64> = (0..FEATURE_DIM).map(|c| zb_dot[(j, c)] / ls[c]).collect();
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            let kij = k[(i, j)];
            k_dot[(i, j)] = -kij * dot(&r, &ua);
            k_ddot[(i, j)] = kij * (dot(&ua, &ub) - dot(&r, &ua) * dot(&r, &ub));
        }
    }
    Ok((k_dot, k_ddot))
}
