//! Feed-forward building blocks for the smoother and the dynamics model.
//!
//! Every forward pass exists in two forms: a tape form that the training
//! objective differentiates, and a plain form (built on a constant tape) for
//! evaluation.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DecayGroup, NamedTensor, ParamVars, ParamVector, Tape, Var};
use crate::error::{DgmError, Result};
use crate::linalg::Matrix;
use crate::odegen::{SystemKind, SystemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `log(1 + exp(x))²`
    SoftplusSquare,
}

/// Fully connected network with sigmoid hidden layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Output width of every layer, the last one included.
    pub layer_widths: Vec<usize>,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, layer_widths: &[usize], output_activation: OutputActivation) -> Self {
        Self {
            input_dim,
            layer_widths: layer_widths.to_vec(),
            output_activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() || self.input_dim == 0 || self.layer_widths.contains(&0) {
            return Err(DgmError::Config(format!("invalid network widths {:?}", self.layer_widths)));
        }
        Ok(())
    }
}

/// Uniform Glorot initialization: weights in `±√(6/(fan_in+fan_out))`.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Weight blocks `{prefix}.w{i}` (fan_in × fan_out) and biases `{prefix}.b{i}`.
pub fn init_mlp<R: Rng>(spec: &MlpSpec, prefix: &str, decay: DecayGroup, rng: &mut R) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    let mut fan_in = spec.input_dim;
    for (i, &w) in spec.layer_widths.iter().enumerate() {
        out.push(NamedTensor::new(format!("{prefix}.w{i}"), glorot(fan_in, w, rng), decay));
        out.push(NamedTensor::new(format!("{prefix}.b{i}"), Matrix::zeros(1, w), decay));
        fan_in = w;
    }
    out
}

/// Applies the network to every row of `x`.
pub fn mlp_tape(t: &mut Tape, vars: &ParamVars, spec: &MlpSpec, prefix: &str, x: Var) -> Result<Var> {
    spec.validate()?;
    if t.shape(x).1 != spec.input_dim {
        return Err(DgmError::Shape(format!(
            "network `{prefix}` takes {} inputs, got {}",
            spec.input_dim,
            t.shape(x).1
        )));
    }
    let mut h = x;
    let last = spec.layer_widths.len() - 1;
    for i in 0..=last {
        let w = vars.get(&format!("{prefix}.w{i}"))?;
        let b = vars.get(&format!("{prefix}.b{i}"))?;
        let z = t.matmul(h, w);
        let z = t.add_row(z, b);
        h = if i < last {
            t.sigmoid(z)
        } else {
            match spec.output_activation {
                OutputActivation::Identity => z,
                OutputActivation::SoftplusSquare => {
                    let s = t.softplus(z);
                    t.square(s)
                }
            }
        };
    }
    Ok(h)
}

/// Evaluates `f` on a tape whose parameters are constants.
pub fn eval_with<T>(params: &ParamVector, f: impl FnOnce(&mut Tape, &ParamVars) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    f(&mut tape, &vars)
}

/// Plain forward pass on one input vector.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, prefix: &str, input: &[f64]) -> Result<Vec<f64>> {
    eval_with(params, |t, v| {
        let x = t.constant(Matrix::row_vector(input));
        let y = mlp_tape(t, v, spec, prefix, x)?;
        Ok(t.value(y).as_slice().to_vec())
    })
}

/// Per-dimension affine standardization of states: `x' = (x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StateScaling {
    pub fn identity(k: usize) -> Self {
        Self {
            shift: vec![0.0; k],
            scale: vec![1.0; k],
        }
    }

    /// Mean and standard deviation of each column of `rows`.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let k = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut shift = vec![0.0; k];
        for r in rows {
            for (s, v) in shift.iter_mut().zip(r) {
                *s += v / n;
            }
        }
        let mut scale = vec![0.0; k];
        for r in rows {
            for j in 0..k {
                scale[j] += (r[j] - shift[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = s.sqrt();
            if !(*s > 1e-8) {
                *s = 1.0;
            }
        }
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }
}

/// Maps `(x0, t)` to the smoother's input row `[(x0 - shift)/scale, t/time_scale]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub state: StateScaling,
    pub time_scale: f64,
}

impl InputScaling {
    pub fn identity(k: usize) -> Self {
        Self {
            state: StateScaling::identity(k),
            time_scale: 1.0,
        }
    }

    pub fn row(&self, x0: &[f64], t: f64) -> Vec<f64> {
        let mut r = self.state.normalize(x0);
        r.push(t / self.time_scale);
        r
    }

    /// Stacked input rows for a list of `(x0, t)` pairs.
    pub fn rows<'a>(&self, points: impl IntoIterator<Item = (&'a [f64], f64)>) -> Matrix {
        let rows: Vec<Vec<f64>> = points.into_iter().map(|(x0, t)| self.row(x0, t)).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.state.dim() + 1);
        }
        Matrix::from_rows(&rows)
    }
}

/// Widths of the shared smoother core.
pub const CORE_WIDTHS: [usize; 2] = [10, 5];
/// Output length of each per-dimension feature head.
pub const FEATURE_DIM: usize = 3;

/// Smoother parameters: shared core, mean head, one feature head per state
/// dimension, ARD log-lengthscales, and log noise scales.
pub fn init_smoother_params<R: Rng>(k: usize, init_noise_std: f64, rng: &mut R) -> Vec<NamedTensor> {
    let core = MlpSpec::new(k + 1, &CORE_WIDTHS, OutputActivation::Identity);
    let mut out = init_mlp(&core, "smoother.core", DecayGroup::Smoother, rng);
    let width = CORE_WIDTHS[1];
    out.push(NamedTensor::new("smoother.mean.w", glorot(width, k, rng), DecayGroup::Smoother));
    out.push(NamedTensor::new("smoother.mean.b", Matrix::zeros(1, k), DecayGroup::Smoother));
    for d in 0..k {
        out.push(NamedTensor::new(
            format!("smoother.feat{d}.w"),
            glorot(width, FEATURE_DIM, rng),
            DecayGroup::Smoother,
        ));
        out.push(NamedTensor::new(
            format!("smoother.feat{d}.b"),
            Matrix::zeros(1, FEATURE_DIM),
            DecayGroup::Smoother,
        ));
        out.push(NamedTensor::new(
            format!("smoother.log_ls{d}"),
            Matrix::zeros(1, FEATURE_DIM),
            DecayGroup::Exempt,
        ));
    }
    out.push(NamedTensor::new(
        "smoother.log_noise",
        Matrix::filled(1, k, init_noise_std.ln()),
        DecayGroup::Exempt,
    ));
    out
}

/// Core activations and their exact derivative with respect to time.
#[derive(Clone, Copy, Debug)]
pub struct CoreOutput {
    pub h: Var,
    pub h_dot: Var,
}

/// Runs the shared core on input rows `x` (scaled `[x0; t]`), propagating
/// the tangent `∂x/∂t = (0, …, 0, 1/time_scale)` alongside.
pub fn smoother_core(t: &mut Tape, vars: &ParamVars, x: Var, time_scale: f64) -> Result<CoreOutput> {
    let k1 = t.shape(x).1;
    let w0 = vars.get("smoother.core.w0")?;
    if t.shape(w0).0 != k1 {
        return Err(DgmError::Shape(format!(
            "smoother core takes {} inputs, got {k1}",
            t.shape(w0).0
        )));
    }
    let b0 = vars.get("smoother.core.b0")?;
    let w1 = vars.get("smoother.core.w1")?;
    let b1 = vars.get("smoother.core.b1")?;

    let a1 = t.matmul(x, w0);
    let a1 = t.add_row(a1, b0);
    let h1 = t.sigmoid(a1);
    let w_time = t.slice_rows(w0, k1 - 1, 1);
    let a1_dot = t.scale(w_time, 1.0 / time_scale);
    let d1 = sigmoid_slope(t, h1);
    let h1_dot = t.mul_row(d1, a1_dot);

    let a2 = t.matmul(h1, w1);
    let a2 = t.add_row(a2, b1);
    let h2 = t.sigmoid(a2);
    let a2_dot = t.matmul(h1_dot, w1);
    let d2 = sigmoid_slope(t, h2);
    let h2_dot = t.mul(d2, a2_dot);
    Ok(CoreOutput { h: h2, h_dot: h2_dot })
}

/// `σ'(a) = σ(a)(1 - σ(a))` from the activation value.
fn sigmoid_slope(t: &mut Tape, s: Var) -> Var {
    let c = t.one_minus(s);
    t.mul(s, c)
}

/// Prior mean (N×K) and its time derivative.
pub fn mean_head(t: &mut Tape, vars: &ParamVars, core: CoreOutput) -> Result<(Var, Var)> {
    let w = vars.get("smoother.mean.w")?;
    let b = vars.get("smoother.mean.b")?;
    let m = t.matmul(core.h, w);
    let m = t.add_row(m, b);
    let m_dot = t.matmul(core.h_dot, w);
    Ok((m, m_dot))
}

/// Features of dimension `d` (N×3) and their time derivative.
pub fn feature_head(t: &mut Tape, vars: &ParamVars, core: CoreOutput, d: usize) -> Result<(Var, Var)> {
    let w = vars.get(&format!("smoother.feat{d}.w"))?;
    let b = vars.get(&format!("smoother.feat{d}.b"))?;
    let z = t.matmul(core.h, w);
    let z = t.add_row(z, b);
    let z_dot = t.matmul(core.h_dot, w);
    Ok((z, z_dot))
}

/// Feature head output divided by the ARD lengthscales of dimension `d`:
/// the unit-lengthscale kernel input `u = z / ℓ` and its time derivative.
pub fn scaled_feature_head(t: &mut Tape, vars: &ParamVars, core: CoreOutput, d: usize) -> Result<(Var, Var)> {
    let log_ls = vars.get(&format!("smoother.log_ls{d}"))?;
    let neg = t.neg(log_ls);
    let inv_ls = t.exp(neg);
    let (z, z_dot) = feature_head(t, vars, core, d)?;
    let u = t.mul_row(z, inv_ls);
    let u_dot = t.mul_row(z_dot, inv_ls);
    Ok((u, u_dot))
}

/// Plain evaluation of `(z, ∂z/∂t)` for dimension `d` at one point.
pub fn feature_map(
    params: &ParamVector,
    scaling: &InputScaling,
    x0: &[f64],
    t: f64,
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    eval_with(params, |tape, v| {
        let x = tape.constant(Matrix::row_vector(&scaling.row(x0, t)));
        let core = smoother_core(tape, v, x, scaling.time_scale)?;
        let (z, z_dot) = feature_head(tape, v, core, d)?;
        Ok((tape.value(z).as_slice().to_vec(), tape.value(z_dot).as_slice().to_vec()))
    })
}

/// Plain evaluation of the prior mean and its time derivative at one point
/// (standardized units).
pub fn smoother_mean(
    params: &ParamVector,
    scaling: &InputScaling,
    x0: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    eval_with(params, |tape, v| {
        let x = tape.constant(Matrix::row_vector(&scaling.row(x0, t)));
        let core = smoother_core(tape, v, x, scaling.time_scale)?;
        let (m, m_dot) = mean_head(tape, v, core)?;
        Ok((tape.value(m).as_slice().to_vec(), tape.value(m_dot).as_slice().to_vec()))
    })
}

/// How the dynamics mean is parametrized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMode {
    /// Trunk (20, 20, 2K): first K outputs are the mean, last K the variance.
    Neural,
    /// Known vector field with learnable coefficients, plus a (10, 10, K)
    /// variance network.
    Parametric,
    /// Mean `B₁⋯B_J x` with factor shapes `(K, a₁, …, a_{J-1}, K)`, plus a
    /// (10, 10, K) variance network.
    FactorizedLinear { inner: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsArch {
    pub mode: DynamicsMode,
    pub state_dim: usize,
    /// Ground-truth family for the parametric mode.
    pub system: Option<SystemSpec>,
    /// Standardization of the states the model sees. Parametric and linear
    /// means are evaluated in original units and converted back.
    pub scaling: StateScaling,
}

pub const DYNAMICS_TRUNK: [usize; 2] = [20, 20];
pub const VARIANCE_NET: [usize; 2] = [10, 10];

impl DynamicsArch {
    fn trunk(&self) -> MlpSpec {
        let k = self.state_dim;
        MlpSpec::new(k, &[DYNAMICS_TRUNK[0], DYNAMICS_TRUNK[1], 2 * k], OutputActivation::Identity)
    }

    fn variance_net(&self) -> MlpSpec {
        let k = self.state_dim;
        MlpSpec::new(k, &[VARIANCE_NET[0], VARIANCE_NET[1], k], OutputActivation::Identity)
    }

    /// Factor shapes from the outermost factor inwards.
    fn factor_shapes(&self, inner: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = vec![self.state_dim];
        dims.extend_from_slice(inner);
        dims.push(self.state_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scaling.dim() != self.state_dim {
            return Err(DgmError::Shape("dynamics scaling has the wrong dimension".into()));
        }
        match &self.mode {
            DynamicsMode::Parametric => {
                let sys = self.system.as_ref().ok_or_else(|| {
                    DgmError::Config("parametric dynamics need a system family".into())
                })?;
                if !matches!(sys.kind, SystemKind::LotkaVolterra | SystemKind::Lorenz) {
                    return Err(DgmError::Config(format!(
                        "parametric dynamics are available for Lotka-Volterra and Lorenz, not {:?}",
                        sys.kind
                    )));
                }
                if sys.state_dim() != self.state_dim {
                    return Err(DgmError::Shape("system and state dimension disagree".into()));
                }
            }
            DynamicsMode::FactorizedLinear { inner } => {
                if inner.contains(&0) {
                    return Err(DgmError::Config("factor widths must be positive".into()));
                }
            }
            DynamicsMode::Neural => {}
        }
        Ok(())
    }
}

/// Dynamics parameters. Parametric coefficients start at their nominal
/// values scaled by independent factors drawn from `[0.5, 1.5]`.
pub fn init_dynamics_params<R: Rng>(arch: &DynamicsArch, rng: &mut R) -> Result<Vec<NamedTensor>> {
    arch.validate()?;
    let mut out = Vec::new();
    match &arch.mode {
        DynamicsMode::Neural => {
            out.extend(init_mlp(&arch.trunk(), "dynamics.trunk", DecayGroup::Dynamics, rng));
        }
        DynamicsMode::Parametric => {
            let sys = arch.system.as_ref().expect("validated");
            let names = sys.kind.required_params();
            let theta: Vec<f64> = names
                .iter()
                .map(|n| sys.param(n) * rng.random_range(0.5..=1.5))
                .collect();
            out.push(NamedTensor::new("dynamics.theta", Matrix::row_vector(&theta), DecayGroup::Dynamics));
            out.extend(init_mlp(&arch.variance_net(), "dynamics.var", DecayGroup::Dynamics, rng));
        }
        DynamicsMode::FactorizedLinear { inner } => {
            for (j, (r, c)) in arch.factor_shapes(inner).into_iter().enumerate() {
                out.push(NamedTensor::new(format!("dynamics.factor{j}"), glorot(r, c, rng), DecayGroup::Dynamics));
            }
            out.extend(init_mlp(&arch.variance_net(), "dynamics.var", DecayGroup::Dynamics, rng));
        }
    }
    Ok(out)
}

/// Dynamics mean and standard deviation at every row of `x` (standardized
/// states); both S×K.
pub fn dynamics_tape(t: &mut Tape, vars: &ParamVars, arch: &DynamicsArch, x: Var) -> Result<(Var, Var)> {
    let k = arch.state_dim;
    if t.shape(x).1 != k {
        return Err(DgmError::Shape(format!("dynamics take {k} states, got {}", t.shape(x).1)));
    }
    let std_from = |t: &mut Tape, pre: Var| t.softplus(pre);
    match &arch.mode {
        DynamicsMode::Neural => {
            let out = mlp_tape(t, vars, &arch.trunk(), "dynamics.trunk", x)?;
            let mean = t.slice_cols(out, 0, k);
            let pre = t.slice_cols(out, k, k);
            let std = std_from(t, pre);
            Ok((mean, std))
        }
        DynamicsMode::Parametric | DynamicsMode::FactorizedLinear { .. } => {
            let shift = t.constant(Matrix::row_vector(&arch.scaling.shift));
            let scale = t.constant(Matrix::row_vector(&arch.scaling.scale));
            let inv_scale = t.constant(Matrix::row_vector(
                &arch.scaling.scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>(),
            ));
            let raw = t.mul_row(x, scale);
            let raw = t.add_row(raw, shift);
            let f = match &arch.mode {
                DynamicsMode::Parametric => {
                    parametric_field(t, vars, arch.system.as_ref().expect("validated"), raw)?
                }
                DynamicsMode::FactorizedLinear { inner } => {
                    let mut cur = raw;
                    for j in (0..arch.factor_shapes(inner).len()).rev() {
                        let b = vars.get(&format!("dynamics.factor{j}"))?;
                        cur = t.matmul_nt(cur, b);
                    }
                    cur
                }
                DynamicsMode::Neural => unreachable!(),
            };
            let mean = t.mul_row(f, inv_scale);
            let pre = mlp_tape(t, vars, &arch.variance_net(), "dynamics.var", x)?;
            let std = std_from(t, pre);
            Ok((mean, std))
        }
    }
}

/// Vector field of the system family on rows of `x` (original units) with
/// the coefficients in `dynamics.theta`.
fn parametric_field(t: &mut Tape, vars: &ParamVars, sys: &SystemSpec, x: Var) -> Result<Var> {
    let theta = vars.get("dynamics.theta")?;
    let th = |t: &mut Tape, i: usize| t.slice_cols(theta, i, 1);
    let col = |t: &mut Tape, j: usize| t.slice_cols(x, j, 1);
    match sys.kind {
        SystemKind::LotkaVolterra => {
            let (alpha, beta, gamma, delta) = (th(t, 0), th(t, 1), th(t, 2), th(t, 3));
            let (u, v) = (col(t, 0), col(t, 1));
            let uv = t.mul(u, v);
            let au = t.mul_scalar(u, alpha);
            let buv = t.mul_scalar(uv, beta);
            let du = t.sub(au, buv);
            let duv = t.mul_scalar(uv, delta);
            let gv = t.mul_scalar(v, gamma);
            let dv = t.sub(duv, gv);
            Ok(t.concat_cols(&[du, dv]))
        }
        SystemKind::Lorenz => {
            let (sigma, rho, tau) = (th(t, 0), th(t, 1), th(t, 2));
            let (a, b, c) = (col(t, 0), col(t, 1), col(t, 2));
            let ba = t.sub(b, a);
            let da = t.mul_scalar(ba, sigma);
            let ra = t.mul_scalar(a, rho);
            let ac = t.mul(a, c);
            let db = t.sub(ra, ac);
            let db = t.sub(db, b);
            let ab = t.mul(a, b);
            let damped = if sys.lorenz_z_uses_y { b } else { c };
            let tz = t.mul_scalar(damped, tau);
            let dc = t.sub(ab, tz);
            Ok(t.concat_cols(&[da, db, dc]))
        }
        other => Err(DgmError::Config(format!("no parametric form for {other:?}"))),
    }
}

/// Plain dynamics evaluation at one standardized state: `(mean, var_diag)`.
pub fn dynamics_forward(arch: &DynamicsArch, params: &ParamVector, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    eval_with(params, |t, v| {
        let xv = t.constant(Matrix::row_vector(x));
        let (mean, std) = dynamics_tape(t, v, arch, xv)?;
        let var = t.value(std).as_slice().iter().map(|s| s * s).collect();
        Ok((t.value(mean).as_slice().to_vec(), var))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, flatten_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zeroed(tensors: Vec<NamedTensor>) -> ParamVector {
        let p = flatten_params(&tensors);
        p.with_values(vec![0.0; p.len()])
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(3, &[4, 2], OutputActivation::Identity);
        let p = zeroed(init_mlp(&spec, "n", DecayGroup::Exempt, &mut rng()));
        assert_eq!(mlp_forward(&spec, &p, "n", &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_sigmoid_unit_at_zero() {
        // hidden layer of one unit followed by an identity readout of weight 1
        let spec = MlpSpec::new(1, &[1, 1], OutputActivation::Identity);
        let mut p = zeroed(init_mlp(&spec, "n", DecayGroup::Exempt, &mut rng()));
        p.set_segment("n.w1", &Matrix::scalar(1.0)).unwrap();
        assert_eq!(mlp_forward(&spec, &p, "n", &[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn softplus_square_at_zero() {
        let spec = MlpSpec::new(2, &[1], OutputActivation::SoftplusSquare);
        let p = zeroed(init_mlp(&spec, "n", DecayGroup::Exempt, &mut rng()));
        let y = mlp_forward(&spec, &p, "n", &[0.3, 0.4]).unwrap()[0];
        assert!((y - 2f64.ln().powi(2)).abs() < 1e-15);
        assert!((y - 0.480453).abs() < 1e-6);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let spec = MlpSpec::new(2, &[1], OutputActivation::Identity);
        let p = flatten_params(&init_mlp(&spec, "n", DecayGroup::Exempt, &mut rng()));
        assert!(matches!(mlp_forward(&spec, &p, "n", &[1.0]), Err(DgmError::Shape(_))));
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let spec = MlpSpec::new(5, &[7], OutputActivation::Identity);
        let ts = init_mlp(&spec, "n", DecayGroup::Smoother, &mut rng());
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(ts[0].value.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(ts[1].value.as_slice().iter().all(|b| *b == 0.0));
    }

    fn smoother(k: usize) -> ParamVector {
        flatten_params(&init_smoother_params(k, 0.1, &mut rng()))
    }

    #[test]
    fn features_have_length_three() {
        for k in [1, 2, 12] {
            let p = smoother(k);
            let (z, _) = feature_map(&p, &InputScaling::identity(k), &vec![0.2; k], 0.5, k - 1).unwrap();
            assert_eq!(z.len(), 3);
        }
    }

    #[test]
    fn zero_core_leaves_only_head_bias() {
        let mut p = smoother(2);
        for name in ["smoother.core.w0", "smoother.core.w1", "smoother.core.b0", "smoother.core.b1"] {
            let s = p.layout.get(name).unwrap().clone();
            p.set_segment(name, &Matrix::zeros(s.rows, s.cols)).unwrap();
        }
        p.set_segment("smoother.feat0.b", &Matrix::row_vector(&[1.0, 2.0, 3.0])).unwrap();
        p.set_segment("smoother.feat0.w", &Matrix::zeros(5, 3)).unwrap();
        let sc = InputScaling::identity(2);
        let (a, a_dot) = feature_map(&p, &sc, &[0.1, 0.2], 0.0, 0).unwrap();
        let (b, _) = feature_map(&p, &sc, &[5.0, -1.0], 3.0, 0).unwrap();
        assert_eq!(a, vec![1.0, 2.0, 3.0]);
        assert_eq!(a, b);
        assert_eq!(a_dot, vec![0.0; 3]);
    }

    #[test]
    fn time_derivatives_match_finite_differences() {
        let p = smoother(2);
        let sc = InputScaling {
            state: StateScaling { shift: vec![1.0, 1.0], scale: vec![0.5, 0.7] },
            time_scale: 10.0,
        };
        let (x0, t0, h) = ([0.8, 1.4], 3.2, 1e-5);
        let (_, z_dot) = feature_map(&p, &sc, &x0, t0, 1).unwrap();
        let (zp, _) = feature_map(&p, &sc, &x0, t0 + h, 1).unwrap();
        let (zm, _) = feature_map(&p, &sc, &x0, t0 - h, 1).unwrap();
        for i in 0..3 {
            let fd = (zp[i] - zm[i]) / (2.0 * h);
            assert!((z_dot[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", z_dot[i]);
        }
        let (m, m_dot) = smoother_mean(&p, &sc, &x0, t0).unwrap();
        assert_eq!(m.len(), 2);
        let (mp, _) = smoother_mean(&p, &sc, &x0, t0 + h).unwrap();
        let (mm, _) = smoother_mean(&p, &sc, &x0, t0 - h).unwrap();
        for i in 0..2 {
            let fd = (mp[i] - mm[i]) / (2.0 * h);
            assert!((m_dot[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_mean_head_gives_zero_mean() {
        let mut p = smoother(3);
        p.set_segment("smoother.mean.w", &Matrix::zeros(5, 3)).unwrap();
        let (m, m_dot) = smoother_mean(&p, &InputScaling::identity(3), &[1.0, 2.0, 3.0], 0.7).unwrap();
        assert_eq!(m, vec![0.0; 3]);
        assert_eq!(m_dot, vec![0.0; 3]);
    }

    fn neural_arch(k: usize) -> DynamicsArch {
        DynamicsArch {
            mode: DynamicsMode::Neural,
            state_dim: k,
            system: None,
            scaling: StateScaling::identity(k),
        }
    }

    #[test]
    fn neural_dynamics_variances_positive_and_zero_network_value() {
        let arch = neural_arch(3);
        let p = flatten_params(&init_dynamics_params(&arch, &mut rng()).unwrap());
        for x in [[0.0; 3], [50.0, -40.0, 9.0]] {
            let (mean, var) = dynamics_forward(&arch, &p, &x).unwrap();
            assert_eq!(mean.len(), 3);
            assert!(var.iter().all(|v| *v > 0.0));
        }
        let z = p.with_values(vec![0.0; p.len()]);
        let (_, var) = dynamics_forward(&arch, &z, &[1.0, 2.0, 3.0]).unwrap();
        assert!(var.iter().all(|v| (v - 0.480453).abs() < 1e-6));
    }

    #[test]
    fn parametric_lotka_volterra_mean() {
        let arch = DynamicsArch {
            mode: DynamicsMode::Parametric,
            state_dim: 2,
            system: Some(SystemSpec::lotka_volterra()),
            scaling: StateScaling::identity(2),
        };
        let mut p = flatten_params(&init_dynamics_params(&arch, &mut rng()).unwrap());
        p.set_segment("dynamics.theta", &Matrix::row_vector(&[1.0; 4])).unwrap();
        let (mean, _) = dynamics_forward(&arch, &p, &[1.0, 2.0]).unwrap();
        assert_eq!(mean, vec![-1.0, 0.0]);
    }

    #[test]
    fn parametric_mean_respects_state_scaling() {
        let arch = DynamicsArch {
            mode: DynamicsMode::Parametric,
            state_dim: 3,
            system: Some(SystemSpec::lorenz()),
            scaling: StateScaling { shift: vec![1.0, 0.5, -2.0], scale: vec![2.0, 0.25, 4.0] },
        };
        let mut p = flatten_params(&init_dynamics_params(&arch, &mut rng()).unwrap());
        p.set_segment("dynamics.theta", &Matrix::row_vector(&[10.0, 28.0, 8.0 / 3.0])).unwrap();
        let raw = [1.5, -0.5, 3.0];
        let truth = crate::odegen::eval_vector_field(&SystemSpec::lorenz(), &raw).unwrap();
        let (mean, _) = dynamics_forward(&arch, &p, &arch.scaling.normalize(&raw)).unwrap();
        for i in 0..3 {
            assert!((mean[i] * arch.scaling.scale[i] - truth[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn factorized_linear_mean_is_the_factor_product() {
        let arch = DynamicsArch {
            mode: DynamicsMode::FactorizedLinear { inner: vec![4, 2] },
            state_dim: 3,
            system: None,
            scaling: StateScaling::identity(3),
        };
        let p = flatten_params(&init_dynamics_params(&arch, &mut rng()).unwrap());
        let b = p
            .matrix("dynamics.factor0")
            .unwrap()
            .matmul(&p.matrix("dynamics.factor1").unwrap())
            .matmul(&p.matrix("dynamics.factor2").unwrap());
        assert_eq!(b.shape(), (3, 3));
        let x = [0.3, -1.0, 2.0];
        let (mean, _) = dynamics_forward(&arch, &p, &x).unwrap();
        let expect = b.matvec(&x);
        for i in 0..3 {
            assert!((mean[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn parametric_mode_rejects_unsupported_systems() {
        let arch = DynamicsArch {
            mode: DynamicsMode::Parametric,
            state_dim: 4,
            system: Some(SystemSpec::double_pendulum()),
            scaling: StateScaling::identity(4),
        };
        assert!(init_dynamics_params(&arch, &mut rng()).is_err());
    }

    #[test]
    fn dynamics_gradients_match_finite_differences() {
        for arch in [
            neural_arch(2),
            DynamicsArch {
                mode: DynamicsMode::Parametric,
                state_dim: 2,
                system: Some(SystemSpec::lotka_volterra()),
                scaling: StateScaling { shift: vec![1.0, 1.0], scale: vec![0.5, 0.5] },
            },
            DynamicsArch {
                mode: DynamicsMode::FactorizedLinear { inner: vec![3] },
                state_dim: 2,
                system: None,
                scaling: StateScaling::identity(2),
            },
        ] {
            let p = flatten_params(&init_dynamics_params(&arch, &mut rng()).unwrap());
            let xs = Matrix::from_rows(&[vec![0.3, -0.2], vec![1.1, 0.4]]);
            let loss = |t: &mut Tape, v: &ParamVars| -> Result<Var> {
                let x = t.constant(xs.clone());
                let (m, s) = dynamics_tape(t, v, &arch, x)?;
                let m2 = t.square(m);
                let a = t.sum(m2);
                let b = t.sum(s);
                Ok(t.add(a, b))
            };
            let err = finite_diff_check(loss, &p, 1e-6).unwrap();
            assert!(err < 1e-6, "{:?}: {err}", arch.mode);
        }
    }

    #[test]
    fn state_scaling_round_trip() {
        let s = StateScaling::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        assert_eq!(s.shift, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        let x = [0.3, 7.0];
        let back = s.denormalize(&s.normalize(&x));
        assert!((back[0] - x[0]).abs() < 1e-15 && (back[1] - x[1]).abs() < 1e-15);
    }
}
