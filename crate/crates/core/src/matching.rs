//! Distances between gradient marginals and the training objective
//! `L_data + λ Σ W2²`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{DecayGroup, ParamVars, ParamVector, Tape, Var};
use crate::dynamics::{dynamics_marginals_tape, GaussianMarginalSet};
use crate::error::{DgmError, Result};
use crate::nets::{eval_with, DynamicsArch};
use crate::smoother::{gp_terms, GpProblem, PointSet, SmootherConfig, VARIANCE_FLOOR};

/// Squared 2-Wasserstein distance between `N(μa, σa²)` and `N(μb, σb²)`.
pub fn w2_gaussian_1d(mu_a: f64, sigma_a: f64, mu_b: f64, sigma_b: f64) -> f64 {
    debug_assert!(sigma_a >= 0.0 && sigma_b >= 0.0);
    (mu_a - mu_b).powi(2) + (sigma_a - sigma_b).powi(2)
}

/// `KL(N(μa, σa²) ‖ N(μb, σb²))`.
pub fn kl_gaussian_1d(mu_a: f64, sigma_a: f64, mu_b: f64, sigma_b: f64) -> f64 {
    (sigma_b / sigma_a).ln() + (sigma_a.powi(2) + (mu_a - mu_b).powi(2)) / (2.0 * sigma_b.powi(2)) - 0.5
}

/// Marginal distance used for matching. Only W2 is used by default; the
/// KL variants exist for comparison runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    W2,
    /// `KL(p_S ‖ p_D)`
    KlForward,
    /// `KL(p_D ‖ p_S)`
    KlBackward,
    KlSymmetric,
}

impl Divergence {
    pub fn eval(self, mu_s: f64, sigma_s: f64, mu_d: f64, sigma_d: f64) -> f64 {
        match self {
            Divergence::W2 => w2_gaussian_1d(mu_s, sigma_s, mu_d, sigma_d),
            Divergence::KlForward => kl_gaussian_1d(mu_s, sigma_s, mu_d, sigma_d),
            Divergence::KlBackward => kl_gaussian_1d(mu_d, sigma_d, mu_s, sigma_s),
            Divergence::KlSymmetric => {
                kl_gaussian_1d(mu_s, sigma_s, mu_d, sigma_d) + kl_gaussian_1d(mu_d, sigma_d, mu_s, sigma_s)
            }
        }
    }
}

/// `Σ_k Σ_i W2²(p_S[i,k], p_D[i,k])`.
pub fn dynamics_loss(p_s: &GaussianMarginalSet, p_d: &GaussianMarginalSet) -> Result<f64> {
    divergence_sum(Divergence::W2, p_s, p_d)
}

pub fn divergence_sum(kind: Divergence, p_s: &GaussianMarginalSet, p_d: &GaussianMarginalSet) -> Result<f64> {
    if p_s.mean.shape() != p_d.mean.shape() {
        return Err(DgmError::IndexMismatch(format!(
            "{:?} smoother marginals vs {:?} dynamics marginals",
            p_s.mean.shape(),
            p_d.mean.shape()
        )));
    }
    let s = (p_s.mean.as_slice().iter().zip(p_s.std.as_slice()))
        .zip(p_d.mean.as_slice().iter().zip(p_d.std.as_slice()))
        .map(|((ms, ss), (md, sd))| kind.eval(*ms, *ss, *md, *sd))
        .sum();
    Ok(s)
}

fn kl_tape(t: &mut Tape, mu_a: Var, sd_a: Var, mu_b: Var, sd_b: Var) -> Var {
    let la = t.log(sd_a);
    let lb = t.log(sd_b);
    let log_ratio = t.sub(lb, la);
    let va = t.square(sd_a);
    let d = t.sub(mu_a, mu_b);
    let d2 = t.square(d);
    let num = t.add(va, d2);
    let neg2 = t.scale(lb, -2.0);
    let inv_vb = t.exp(neg2);
    let frac = t.mul(num, inv_vb);
    let half = t.scale(frac, 0.5);
    let terms = t.add(log_ratio, half);
    let total = t.sum(terms);
    let n = t.shape(mu_a);
    t.add_const(total, -0.5 * (n.0 * n.1) as f64)
}

/// Summed divergence between two sets of marginals on the tape (1×1).
pub fn divergence_tape(t: &mut Tape, kind: Divergence, mu_s: Var, sd_s: Var, mu_d: Var, sd_d: Var) -> Var {
    match kind {
        Divergence::W2 => {
            let dm = t.sub(mu_s, mu_d);
            let dm = t.square(dm);
            let ds = t.sub(sd_s, sd_d);
            let ds = t.square(ds);
            let both = t.add(dm, ds);
            t.sum(both)
        }
        Divergence::KlForward => kl_tape(t, mu_s, sd_s, mu_d, sd_d),
        Divergence::KlBackward => kl_tape(t, mu_d, sd_d, mu_s, sd_s),
        Divergence::KlSymmetric => {
            let a = kl_tape(t, mu_s, sd_s, mu_d, sd_d);
            let b = kl_tape(t, mu_d, sd_d, mu_s, sd_s);
            t.add(a, b)
        }
    }
}

/// Everything the objective needs besides the parameters.
#[derive(Clone, Debug)]
pub struct ObjectiveContext {
    pub problem: GpProblem,
    pub support: PointSet,
    pub arch: DynamicsArch,
    pub smoother: SmootherConfig,
    pub divergence: Divergence,
}

/// Tape handles of the objective pieces (each 1×1).
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub data: Var,
    /// Absent when λ is zero, in which case the matching term is not built.
    pub matching: Option<Var>,
    pub loss: Var,
}

/// Builds `L_data + λ·matching` on `t`. The dynamics model sees the
/// smoother's posterior state means at the support points, and gradients
/// flow through them into the smoother.
pub fn objective_tape(t: &mut Tape, vars: &ParamVars, ctx: &ObjectiveContext, lambda: f64) -> Result<ObjectiveVars> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(DgmError::Config(format!("λ must be finite and nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        let g = gp_terms(t, vars, &ctx.problem, None, &ctx.smoother)?;
        return Ok(ObjectiveVars {
            data: g.data_nll,
            matching: None,
            loss: g.data_nll,
        });
    }
    let g = gp_terms(t, vars, &ctx.problem, Some(&ctx.support), &ctx.smoother)?;
    let (mu_s, sd_s, x_s) = match (g.deriv_mean, g.deriv_std, g.state_mean) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(DgmError::Config("empty support set".into())),
    };
    let (mu_d, sd_d) = dynamics_marginals_tape(t, vars, &ctx.arch, x_s)?;
    let sd_d = if ctx.divergence == Divergence::W2 {
        sd_d
    } else {
        let v = t.square(sd_d);
        t.sqrt_floor(v, VARIANCE_FLOOR)
    };
    let m = divergence_tape(t, ctx.divergence, mu_s, sd_s, mu_d, sd_d);
    let weighted = t.scale(m, lambda);
    let loss = t.add(g.data_nll, weighted);
    Ok(ObjectiveVars {
        data: g.data_nll,
        matching: Some(m),
        loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data_term: f64,
    pub wasserstein_term: f64,
    pub weight_decay_term: f64,
    pub lambda_effective: f64,
}

impl LossBreakdown {
    pub fn new(data_term: f64, wasserstein_term: f64, weight_decay_term: f64, lambda_effective: f64) -> Self {
        Self {
            total: data_term + lambda_effective * wasserstein_term + weight_decay_term,
            data_term,
            wasserstein_term,
            weight_decay_term,
            lambda_effective,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.data_term, self.wasserstein_term, self.weight_decay_term, self.lambda_effective]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `wd_S‖φ_net‖² + wd_D‖ψ‖²`; lengthscales and noise are exempt.
pub fn weight_decay_penalty(params: &ParamVector, wd_s: f64, wd_d: f64) -> f64 {
    wd_s * params.group_norm_sq(DecayGroup::Smoother) + wd_d * params.group_norm_sq(DecayGroup::Dynamics)
}

/// Full objective at `params` (smoother and dynamics segments together).
pub fn total_loss(params: &ParamVector, ctx: &ObjectiveContext, lambda: f64, wd_s: f64, wd_d: f64) -> Result<LossBreakdown> {
    let (data, matching) = eval_with(params, |t, v| {
        let o = objective_tape(t, v, ctx, lambda)?;
        Ok((t.scalar(o.data), o.matching.map_or(0.0, |m| t.scalar(m))))
    })?;
    let out = LossBreakdown::new(data, matching, weight_decay_penalty(params, wd_s, wd_d), lambda);
    if !out.is_finite() {
        return Err(DgmError::NonFinite(format!("{out:?}")));
    }
    Ok(out)
}
