use crate::error::{DgmError, Result};

use super::systems::{eval_vector_field, SystemSpec};

/// One classical Runge-Kutta step of size `h`.
fn rk4_step<F>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(x)?;
    let shifted = |k: &[f64], c: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(xi, ki)| xi + c * h * ki).collect()
    };
    let k2 = f(&shifted(&k1, 0.5))?;
    let k3 = f(&shifted(&k2, 0.5))?;
    let k4 = f(&shifted(&k3, 1.0))?;
    Ok((0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates `ẋ = f(x)` from `x(0) = x0` and returns the states at each
/// query time.
///
/// Between consecutive query times the interval is split into equal substeps
/// no longer than `max_step`, so query times are hit exactly.
pub fn integrate_fn<F>(f: F, x0: &[f64], query_times: &[f64], max_step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    assert!(max_step > 0.0, "substep must be positive");
    if let Some(t) = query_times.iter().find(|t| !t.is_finite()) {
        return Err(DgmError::Domain(format!("query time {t} is not finite")));
    }
    if query_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(DgmError::Domain("query times must be sorted".into()));
    }
    if query_times.first().is_some_and(|t| *t < 0.0) {
        return Err(DgmError::Domain("query times must be non-negative".into()));
    }
    let mut out = Vec::with_capacity(query_times.len());
    let mut x = x0.to_vec();
    let mut t = 0.0;
    for &target in query_times {
        let span = target - t;
        if span > 0.0 {
            let n = (span / max_step).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for i in 0..n {
                x = rk4_step(&f, &x, h)?;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(DgmError::Divergence {
                        time: t + (i + 1) as f64 * h,
                    });
                }
            }
            t = target;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Ground-truth states of `system` at `query_times`, using the system's
/// production substep over the horizon ending at the last query time.
pub fn integrate(system: &SystemSpec, x0: &[f64], query_times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let horizon = query_times.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let h = system.integration_substep(horizon);
    integrate_fn(|x| eval_vector_field(system, x), x0, query_times, h)
}

/// `n` equidistant points covering `[start, end]` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
