//! Random Fourier feature approximation of the smoother kernel.
//!
//! With `ψ(u) = √(2/F) [cos(Ωᵀu), sin(Ωᵀu)]` the kernel factorizes as
//! `K ≈ ΨΨᵀ` (rows are points), and `ψ(u)ᵀψ(u) = 1` exactly. Conditioning
//! then only needs the F×F system `C = ΨᵀΨ + σ²I`:
//!
//! * `(K + σ²I)⁻¹ r = (r - Ψ C⁻¹ Ψᵀ r) / σ²`
//! * `logdet(K + σ²I) = logdet C + (N - F) log σ²`
//! * `Ψᵀ(K + σ²I)⁻¹Ψ = I - σ² C⁻¹`, so posterior variances at new points
//!   reduce to `σ² diag(Ψ_q C⁻¹ Ψ_qᵀ)`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Tape, Var};
use crate::error::{DgmError, Result};
use crate::linalg::{self, Matrix};
use crate::nets::{self, eval_with, InputScaling, FEATURE_DIM};
use crate::smoother::PointSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatureSpec {
    /// Total feature count F (cos and sin halves together).
    pub features: usize,
    /// `FEATURE_DIM × F/2` frequencies, already divided by the lengthscales.
    pub frequencies: Matrix,
}

impl FourierFeatureSpec {
    /// Standard normal frequencies scaled by `1/ℓ_d` per coordinate.
    pub fn sample(lengthscales: &[f64], features: usize, seed: u64) -> Result<Self> {
        if features < 2 || features % 2 != 0 {
            return Err(DgmError::Config(format!(
                "feature count must be even and at least 2, got {features}"
            )));
        }
        if lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(DgmError::Domain("lengthscales must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = features / 2;
        let mut frequencies = Matrix::zeros(lengthscales.len(), half);
        for j in 0..half {
            for (d, l) in lengthscales.iter().enumerate() {
                let w: f64 = rng.sample(StandardNormal);
                frequencies[(d, j)] = w / l;
            }
        }
        Ok(Self { features, frequencies })
    }

    /// Unit-lengthscale frequencies for state dimension `d` of a run seeded
    /// with `seed`.
    pub fn for_dimension(features: usize, seed: u64, d: usize) -> Result<Self> {
        let mixed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(d as u64 + 1));
        Self::sample(&[1.0; FEATURE_DIM], features, mixed)
    }

    pub fn amplitude(&self) -> f64 {
        (2.0 / self.features as f64).sqrt()
    }

    /// Plain feature rows (N×F) for feature rows `z` (N×FEATURE_DIM).
    pub fn features(&self, z: &Matrix) -> Matrix {
        let theta = z.matmul(&self.frequencies);
        let half = self.features / 2;
        let c = self.amplitude();
        Matrix::from_fn(z.rows(), self.features, |i, j| {
            if j < half {
                c * theta[(i, j)].cos()
            } else {
                c * theta[(i, j - half)].sin()
            }
        })
    }
}

/// `Ψ = c [cos(ZΩ), sin(ZΩ)]` on the tape.
pub fn features_tape(t: &mut Tape, spec: &FourierFeatureSpec, z: Var) -> Var {
    let omega = t.constant(spec.frequencies.clone());
    let theta = t.matmul(z, omega);
    let cos = t.cos(theta);
    let sin = t.sin(theta);
    let psi = t.concat_cols(&[cos, sin]);
    t.scale(psi, spec.amplitude())
}

/// `Ψ` and its time derivative `Ψ̇ = c [-sin(ZΩ) ⊙ ŻΩ, cos(ZΩ) ⊙ ŻΩ]`.
pub fn features_with_derivative_tape(t: &mut Tape, spec: &FourierFeatureSpec, z: Var, z_dot: Var) -> (Var, Var) {
    let omega = t.constant(spec.frequencies.clone());
    let theta = t.matmul(z, omega);
    let theta_dot = t.matmul(z_dot, omega);
    let cos = t.cos(theta);
    let sin = t.sin(theta);
    let psi = t.concat_cols(&[cos, sin]);
    let psi = t.scale(psi, spec.amplitude());
    let ds = t.mul(sin, theta_dot);
    let ds = t.neg(ds);
    let dc = t.mul(cos, theta_dot);
    let psi_dot = t.concat_cols(&[ds, dc]);
    let psi_dot = t.scale(psi_dot, spec.amplitude());
    (psi, psi_dot)
}

/// Conditioning state in feature space.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FeatureConditioned {
    pub nll: Var,
    /// `C⁻¹ Ψᵀ r`, F×1
    pub weights: Var,
    /// `C⁻¹`, F×F
    pub c_inverse: Var,
    pub noise_var: Var,
}

pub(crate) fn condition_features(t: &mut Tape, psi: Var, noise_var: Var, resid: Var) -> Result<FeatureConditioned> {
    let (n, f) = t.shape(psi);
    let gram = t.matmul_tn(psi, psi);
    let c = t.add_diag(gram, noise_var);
    let c_inverse = t.spd_inverse(c)?;
    let b = t.matmul_tn(psi, resid);
    let weights = t.matmul(c_inverse, b);
    let rr = t.square(resid);
    let rr = t.sum(rr);
    let bw = t.mul(b, weights);
    let bw = t.sum(bw);
    let diff = t.sub(rr, bw);
    let log_s2 = t.log(noise_var);
    let neg = t.neg(log_s2);
    let inv_s2 = t.exp(neg);
    let quad = t.mul(diff, inv_s2);
    let logdet_c = t.logdet(c, c_inverse);
    let rest = t.scale(log_s2, n as f64 - f as f64);
    let logdet = t.add(logdet_c, rest);
    let both = t.add(quad, logdet);
    let nll = t.scale(both, 0.5);
    Ok(FeatureConditioned { nll, weights, c_inverse, noise_var })
}

/// Posterior mean `m + Ψ_q w` and variance `σ² diag(Ψ_q C⁻¹ Ψ_qᵀ)` of any
/// linear functional whose features are `psi_q` (states or derivatives).
pub(crate) fn feature_moments(t: &mut Tape, c: &FeatureConditioned, psi_q: Var, mean_q: Var) -> (Var, Var) {
    let shift = t.matmul(psi_q, c.weights);
    let mu = t.add(mean_q, shift);
    let pc = t.matmul(psi_q, c.c_inverse);
    let prod = t.mul(pc, psi_q);
    let rs = t.row_sum(prod);
    let var = t.mul_scalar(rs, c.noise_var);
    (mu, var)
}

/// Φ (F×N) and its time derivative for dimension `d` at `points`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrices {
    pub phi: Matrix,
    pub phi_dot: Matrix,
}

pub fn feature_matrices(
    spec: &FourierFeatureSpec,
    params: &ParamVector,
    scaling: &InputScaling,
    d: usize,
    points: &PointSet,
) -> Result<FeatureMatrices> {
    eval_with(params, |t, v| {
        let x = t.constant(points.inputs(scaling));
        let core = nets::smoother_core(t, v, x, scaling.time_scale)?;
        let (u, u_dot) = nets::scaled_feature_head(t, v, core, d)?;
        let (psi, psi_dot) = features_with_derivative_tape(t, spec, u, u_dot);
        Ok(FeatureMatrices {
            phi: t.value(psi).transpose(),
            phi_dot: t.value(psi_dot).transpose(),
        })
    })
}

/// `(ΦᵀΦ + σ²I)⁻¹ v` through the F×F system, for Φ of shape F×N.
pub fn woodbury_solve(phi: &Matrix, noise_var: f64, v: &[f64]) -> Result<Vec<f64>> {
    assert!(noise_var > 0.0, "noise variance must be positive");
    assert_eq!(phi.cols(), v.len());
    let mut c = phi.matmul_t(false, phi, true);
    for i in 0..c.rows() {
        c[(i, i)] += noise_var;
    }
    let phi_v = Matrix::column(&phi.matvec(v));
    let w = linalg::spd_solve(&c, &phi_v)?;
    let back = phi.matmul_t(true, &w, false);
    Ok(v.iter()
        .zip(back.as_slice())
        .map(|(vi, bi)| (vi - bi) / noise_var)
        .collect())
}

/// `logdet(ΦᵀΦ + σ²I_N)` as `logdet(ΦΦᵀ + σ²I_F) + (N - F) log σ²`.
pub fn approx_logdet(phi: &Matrix, noise_var: f64, n: usize) -> Result<f64> {
    assert!(noise_var > 0.0, "noise variance must be positive");
    let mut c = phi.matmul_t(false, phi, true);
    for i in 0..c.rows() {
        c[(i, i)] += noise_var;
    }
    let inv = linalg::spd_inverse(&c)?;
    Ok(inv.logdet + (n as f64 - phi.rows() as f64) * noise_var.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoother::{condition_exact, derivative_moments, state_moments};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn dense_inverse(phi: &Matrix, s2: f64) -> linalg::SpdInverse {
        let mut a = phi.matmul_t(true, phi, false);
        for i in 0..a.rows() {
            a[(i, i)] += s2;
        }
        linalg::spd_inverse(&a).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn feature_rows_have_unit_norm() {
        let spec = FourierFeatureSpec::sample(&[0.5, 1.0, 2.0], 10, 3).unwrap();
        let psi = spec.features(&random_matrix(7, 3, 1));
        for i in 0..7 {
            let n: f64 = psi.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn features_approximate_the_kernel() {
        let ls = [0.8, 1.0, 1.3];
        let spec = FourierFeatureSpec::sample(&ls, 2048, 0).unwrap();
        let z = random_matrix(20, 3, 9).map(|v| 0.5 * v);
        let psi = spec.features(&z);
        let approx = psi.matmul_t(false, &psi, true);
        let exact = crate::smoother::kernel_matrix(&z, &z, &ls);
        let diff = approx.zip_map(&exact, |a, b| a - b);
        let mean = diff.as_slice().iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64;
        assert!(diff.max_abs() < 0.1, "max error {}", diff.max_abs());
        assert!(mean < 0.025, "mean error {mean}");
    }

    #[test]
    fn sampling_is_deterministic_and_validated() {
        let a = FourierFeatureSpec::sample(&[1.0; 3], 8, 5).unwrap();
        assert_eq!(a, FourierFeatureSpec::sample(&[1.0; 3], 8, 5).unwrap());
        assert!(FourierFeatureSpec::sample(&[1.0; 3], 7, 5).is_err());
        assert!(FourierFeatureSpec::sample(&[1.0; 3], 0, 5).is_err());
        assert_ne!(
            FourierFeatureSpec::for_dimension(8, 1, 0).unwrap(),
            FourierFeatureSpec::for_dimension(8, 1, 1).unwrap()
        );
    }

    #[test]
    fn woodbury_with_zero_features_is_a_scaling() {
        let v = [1.0, -2.0, 0.5];
        assert_eq!(woodbury_solve(&Matrix::zeros(2, 3), 0.5, &v).unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn woodbury_matches_dense_inverse_and_recovers_input() {
        let phi = random_matrix(3, 5, 2);
        let s2 = 0.37;
        let v = [0.3, -1.0, 2.0, 0.1, -0.4];
        let x = woodbury_solve(&phi, s2, &v).unwrap();
        let dense = dense_inverse(&phi, s2).inverse.matvec(&v);
        for i in 0..5 {
            assert!(rel(x[i], dense[i]) < 1e-10);
        }
        let mut a = phi.matmul_t(true, &phi, false);
        for i in 0..5 {
            a[(i, i)] += s2;
        }
        let back = a.matvec(&x);
        for i in 0..5 {
            assert!(rel(back[i], v[i]) < 1e-8);
        }
    }

    #[test]
    fn logdet_identity() {
        assert!((approx_logdet(&Matrix::zeros(3, 6), 0.5, 6).unwrap() - 6.0 * 0.5f64.ln()).abs() < 1e-12);
        let phi = random_matrix(3, 6, 4);
        let dense = dense_inverse(&phi, 0.2).logdet;
        assert!(rel(approx_logdet(&phi, 0.2, 6).unwrap(), dense) < 1e-10);
        // orthonormal rows scaled by c: eigenvalues 1 + c² (F times) and 1
        let c = 1.7;
        let mut rows = Matrix::zeros(2, 4);
        rows[(0, 1)] = c;
        rows[(1, 3)] = c;
        let got = approx_logdet(&rows, 1.0, 4).unwrap();
        assert!((got - 2.0 * (1.0 + c * c).ln()).abs() < 1e-12);
    }

    /// With features that factorize a kernel exactly, feature-space
    /// conditioning reproduces dense conditioning.
    #[test]
    fn exact_factorization_reproduces_dense_conditioning() {
        let (n, f, s) = (6, 3, 4);
        let mut psi_o = random_matrix(n, f, 10);
        let mut psi_s = random_matrix(s, f, 11);
        // unit-norm rows give the unit prior variance the dense path assumes
        for m in [&mut psi_o, &mut psi_s] {
            for i in 0..m.rows() {
                let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
            }
        }
        let psi_dot = random_matrix(s, f, 12);
        let resid = random_matrix(n, 1, 13);
        let mean_s = random_matrix(s, 1, 14);
        let s2 = 0.3;

        let mut t = Tape::new();
        let po = t.constant(psi_o.clone());
        let ps = t.constant(psi_s.clone());
        let pd = t.constant(psi_dot.clone());
        let r = t.constant(resid.clone());
        let ms = t.constant(mean_s.clone());
        let sv = t.constant(Matrix::scalar(s2));

        let fc = condition_features(&mut t, po, sv, r).unwrap();
        let (mu_f, var_f) = feature_moments(&mut t, &fc, ps, ms);
        let (dmu_f, dvar_f) = feature_moments(&mut t, &fc, pd, ms);

        let k_oo = t.constant(psi_o.matmul_t(false, &psi_o, true));
        let k_so = t.constant(psi_s.matmul_t(false, &psi_o, true));
        let k_dot = t.constant(psi_dot.matmul_t(false, &psi_o, true));
        let kdd = t.constant(Matrix::from_fn(s, 1, |i, _| psi_dot.row(i).iter().map(|v| v * v).sum()));
        let c = condition_exact(&mut t, k_oo, sv, r).unwrap();
        let (mu_e, var_e) = state_moments(&mut t, &c, k_so, ms);
        let (dmu_e, dvar_e) = derivative_moments(&mut t, &c, k_dot, kdd, ms);

        assert!(rel(t.scalar(fc.nll), t.scalar(c.nll)) < 1e-8);
        for (a, b) in [(mu_f, mu_e), (var_f, var_e), (dmu_f, dmu_e), (dvar_f, dvar_e)] {
            let (a, b) = (t.value(a).clone(), t.value(b).clone());
            for i in 0..s {
                assert!((a[(i, 0)] - b[(i, 0)]).abs() <= 1e-8 * b[(i, 0)].abs().max(1.0));
            }
        }
    }
}
