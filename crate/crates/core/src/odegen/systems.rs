use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::linalg::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    LotkaVolterra,
    Lorenz,
    DoublePendulum,
    Quadrocopter,
    RandomLinear,
}

impl SystemKind {
    pub fn state_dim(self) -> usize {
        match self {
            SystemKind::LotkaVolterra => 2,
            SystemKind::Lorenz | SystemKind::RandomLinear => 3,
            SystemKind::DoublePendulum => 4,
            SystemKind::Quadrocopter => 12,
        }
    }

    /// Parameter names the vector field reads.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            SystemKind::LotkaVolterra => &["alpha", "beta", "gamma", "delta"],
            SystemKind::Lorenz => &["sigma", "rho", "tau"],
            SystemKind::DoublePendulum => &["g", "m", "l"],
            SystemKind::Quadrocopter => &[
                "f1", "f2", "f3", "f4", "m", "ixx", "iyy", "izz", "dx", "dy", "g",
            ],
            SystemKind::RandomLinear => &[
                "a00", "a01", "a02", "a10", "a11", "a12", "a20", "a21", "a22",
            ],
        }
    }
}

/// A ground-truth system: vector field parameters plus observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub params: BTreeMap<String, f64>,
    /// Per-dimension observation noise variances.
    pub noise_var: Vec<f64>,
    /// Lorenz only: use `xy - τy` for the third equation instead of the
    /// standard `xy - τz`.
    #[serde(default)]
    pub lorenz_z_uses_y: bool,
}

fn params_of(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl SystemSpec {
    pub fn lotka_volterra() -> Self {
        Self {
            kind: SystemKind::LotkaVolterra,
            params: params_of(&[("alpha", 1.0), ("beta", 1.0), ("gamma", 1.0), ("delta", 1.0)]),
            noise_var: vec![0.1 * 0.1; 2],
            lorenz_z_uses_y: false,
        }
    }

    pub fn lorenz() -> Self {
        Self {
            kind: SystemKind::Lorenz,
            params: params_of(&[("sigma", 10.0), ("rho", 28.0), ("tau", 8.0 / 3.0)]),
            noise_var: vec![1.0; 3],
            lorenz_z_uses_y: false,
        }
    }

    pub fn double_pendulum() -> Self {
        Self {
            kind: SystemKind::DoublePendulum,
            params: params_of(&[("g", 9.81), ("m", 1.0), ("l", 1.0)]),
            noise_var: vec![0.1 * 0.1; 4],
            lorenz_z_uses_y: false,
        }
    }

    pub fn quadrocopter() -> Self {
        Self {
            kind: SystemKind::Quadrocopter,
            params: params_of(&[
                ("f1", 0.496),
                ("f2", 0.495),
                ("f3", 0.4955),
                ("f4", 0.4955),
                ("m", 0.1),
                ("ixx", 0.62),
                ("iyy", 1.13),
                ("izz", 0.9),
                ("dx", 0.114),
                ("dy", 0.0825),
                ("g", 9.85),
            ]),
            noise_var: vec![1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0, 0.1, 0.1, 5.0, 5.0, 5.0],
            lorenz_z_uses_y: false,
        }
    }

    /// `ẋ = A x` with the given 3×3 matrix and noise std 0.1.
    pub fn linear(a: &Matrix) -> Self {
        assert_eq!(a.shape(), (3, 3));
        let mut params = BTreeMap::new();
        for i in 0..3 {
            for j in 0..3 {
                params.insert(format!("a{i}{j}"), a[(i, j)]);
            }
        }
        Self {
            kind: SystemKind::RandomLinear,
            params,
            noise_var: vec![0.1 * 0.1; 3],
            lorenz_z_uses_y: false,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn param(&self, name: &str) -> f64 {
        self.params[name]
    }

    /// Checks parameter completeness and noise positivity.
    pub fn validate(&self) -> Result<()> {
        for p in self.kind.required_params() {
            if !self.params.contains_key(*p) {
                return Err(DgmError::Config(format!(
                    "{:?} is missing parameter `{p}`",
                    self.kind
                )));
            }
        }
        if self.noise_var.len() != self.state_dim() {
            return Err(DgmError::Config(format!(
                "expected {} noise variances, got {}",
                self.state_dim(),
                self.noise_var.len()
            )));
        }
        if let Some(v) = self.noise_var.iter().find(|v| !(**v > 0.0)) {
            return Err(DgmError::Config(format!("noise variance {v} is not positive")));
        }
        Ok(())
    }

    /// The linear system matrix (RandomLinear only).
    pub fn linear_matrix(&self) -> Matrix {
        Matrix::from_fn(3, 3, |i, j| self.params[&format!("a{i}{j}")])
    }

    /// Substep used by the ground-truth integrator over `horizon`.
    pub fn integration_substep(&self, horizon: f64) -> f64 {
        let base = 1e-3 * horizon;
        match self.kind {
            SystemKind::DoublePendulum | SystemKind::Lorenz => base / 10.0,
            _ => base,
        }
    }
}

/// `f*(x)` for the given system.
pub fn eval_vector_field(system: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    let k = system.state_dim();
    if x.len() != k {
        return Err(DgmError::Shape(format!(
            "state has {} entries, {:?} needs {k}",
            x.len(),
            system.kind
        )));
    }
    let p = |n: &str| system.param(n);
    let out = match system.kind {
        SystemKind::LotkaVolterra => {
            let (u, v) = (x[0], x[1]);
            vec![
                p("alpha") * u - p("beta") * u * v,
                p("delta") * u * v - p("gamma") * v,
            ]
        }
        SystemKind::Lorenz => {
            let (a, b, c) = (x[0], x[1], x[2]);
            let damped = if system.lorenz_z_uses_y { b } else { c };
            vec![
                p("sigma") * (b - a),
                a * (p("rho") - c) - b,
                a * b - p("tau") * damped,
            ]
        }
        SystemKind::DoublePendulum => double_pendulum_field(p("g"), p("m"), p("l"), x),
        SystemKind::Quadrocopter => quadrocopter_field(system, x)?,
        SystemKind::RandomLinear => system.linear_matrix().matvec(x),
    };
    Ok(out)
}

/// Angular velocities of the double pendulum from its canonical coordinates.
fn pendulum_rates(m: f64, l: f64, x: &[f64]) -> (f64, f64) {
    let (t1, t2, p1, p2) = (x[0], x[1], x[2], x[3]);
    let c = (t1 - t2).cos();
    let denom = 16.0 - 9.0 * c * c;
    let pre = 6.0 / (m * l * l);
    (
        pre * (2.0 * p1 - 3.0 * c * p2) / denom,
        pre * (8.0 * p2 - 3.0 * c * p1) / denom,
    )
}

fn double_pendulum_field(g: f64, m: f64, l: f64, x: &[f64]) -> Vec<f64> {
    let (t1, t2) = (x[0], x[1]);
    let (d1, d2) = pendulum_rates(m, l, x);
    let s = (t1 - t2).sin();
    let pre = -0.5 * m * l * l;
    vec![
        d1,
        d2,
        pre * (d1 * d2 * s + 3.0 * g / l * t1.sin()),
        pre * (-d1 * d2 * s + g / l * t2.sin()),
    ]
}

/// Total mechanical energy of the double pendulum (uniform rods).
pub fn double_pendulum_energy(system: &SystemSpec, x: &[f64]) -> f64 {
    let (g, m, l) = (system.param("g"), system.param("m"), system.param("l"));
    let (t1, t2) = (x[0], x[1]);
    let (d1, d2) = pendulum_rates(m, l, x);
    let kinetic = m * l * l / 6.0 * (d2 * d2 + 4.0 * d1 * d1 + 3.0 * d1 * d2 * (t1 - t2).cos());
    let potential = -0.5 * m * g * l * (3.0 * t1.cos() + t2.cos());
    kinetic + potential
}

// State order: body velocities (u, v, w), body rates (p, q, r), Euler angles
// (φ, θ, ψ), position (x, y, z).
fn quadrocopter_field(system: &SystemSpec, s: &[f64]) -> Result<Vec<f64>> {
    let p = |n: &str| system.param(n);
    let (u, v, w) = (s[0], s[1], s[2]);
    let (pr, qr, rr) = (s[3], s[4], s[5]);
    let (phi, theta, psi) = (s[6], s[7], s[8]);
    let ct = theta.cos();
    if ct.abs() < 1e-12 {
        return Err(DgmError::Domain(format!(
            "pitch θ = {theta} makes sec(θ) singular"
        )));
    }
    let (f1, f2, f3, f4) = (p("f1"), p("f2"), p("f3"), p("f4"));
    let (m, g) = (p("m"), p("g"));
    let (ixx, iyy, izz) = (p("ixx"), p("iyy"), p("izz"));
    let (dx, dy) = (p("dx"), p("dy"));
    let fz = f1 + f2 + f3 + f4;
    let roll_torque = (f2 + f3) * dy - (f1 + f4) * dx;
    let pitch_torque = (f1 + f3) * dx - (f2 + f4) * dx;
    let (sphi, cphi) = phi.sin_cos();
    let (spsi, cpsi) = psi.sin_cos();
    let st = theta.sin();
    Ok(vec![
        -g * st + rr * v - qr * w,
        g * sphi * ct - rr * u + pr * w,
        -fz / m + g * cphi * ct + qr * u - pr * v,
        (roll_torque + (iyy - izz) * qr * rr) / ixx,
        (pitch_torque + (izz - ixx) * pr * rr) / iyy,
        (ixx - iyy) * pr * qr / izz,
        pr + (qr * sphi + rr * cphi) * st / ct,
        qr * cphi - rr * sphi,
        (qr * sphi + rr * cphi) / ct,
        ct * cpsi * u
            + (-cphi * spsi + sphi * st * cpsi) * v
            + (sphi * spsi + cphi * st * cpsi) * w,
        ct * spsi * u
            + (cphi * cpsi + sphi * st * spsi) * v
            + (-sphi * cpsi + cphi * st * spsi) * w,
        st * u - sphi * ct * v - cphi * ct * w,
    ])
}

/// Spectral radius of a square matrix.
fn spectral_radius_2x2_skew(s: &Matrix) -> f64 {
    // A real 2×2 skew-symmetric matrix has eigenvalues ±i·|s01|.
    s[(0, 1)].abs()
}

/// A 3×3 linear system with one stable mode (eigenvalue drawn from
/// `[-0.5, -0.1]`) and a marginally stable rotation block whose spectral
/// radius is normalized to π/2.
pub fn make_random_linear_system(seed: u64) -> SystemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stable = rng.random_range(-0.5..=-0.1);
    let skew = loop {
        let c = Matrix::from_fn(2, 2, |_, _| rng.random_range(0.0..1.0));
        let s = c.zip_map(&c.transpose(), |a, b| a - b);
        let rho = spectral_radius_2x2_skew(&s);
        if rho > 1e-12 {
            break s.map(|v| PI / (2.0 * rho) * v);
        }
    };
    let mut a = Matrix::zeros(3, 3);
    a[(0, 0)] = stable;
    for i in 0..2 {
        for j in 0..2 {
            a[(i + 1, j + 1)] = skew[(i, j)];
        }
    }
    SystemSpec::linear(&a)
}

/// Eigenvalue moduli of the rotation block, for checks.
pub fn linear_block_spectral_radius(system: &SystemSpec) -> f64 {
    let a = system.linear_matrix();
    let block = Matrix::from_fn(2, 2, |i, j| a[(i + 1, j + 1)]);
    // ρ(S) for skew S equals the square root of the largest eigenvalue of SᵀS.
    let sts = block.matmul_t(true, &block, false);
    linalg::symmetric_eigenvalues(&sts)
        .into_iter()
        .fold(0.0_f64, f64::max)
        .sqrt()
}
