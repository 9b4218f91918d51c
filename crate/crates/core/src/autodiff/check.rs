use std::collections::HashMap;

use crate::error::{DgmError, Result};

use super::params::ParamVector;
use super::tape::{Tape, Var};

/// Tape handles for every segment of a [`ParamVector`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl ParamVars {
    /// Registers each segment as a leaf (`trainable`) or as a constant.
    pub fn register(tape: &mut Tape, p: &ParamVector, trainable: bool) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for t in p.unflatten() {
            let v = if trainable {
                tape.leaf(t.value)
            } else {
                tape.constant(t.value)
            };
            vars.insert(t.name.clone(), v);
            order.push((t.name, v));
        }
        Self { vars, order }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DgmError::UnknownSegment(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Evaluates `loss` at `p` and differentiates it with respect to every
/// coordinate of `p`.
pub fn value_and_grad<F>(loss: F, p: &ParamVector) -> Result<GradResult>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, p, true);
    let out = loss(&mut tape, &vars)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(DgmError::NonFinite(format!("loss evaluated to {value}")));
    }
    let grads = tape.backward(out);
    let mut gradient = vec![0.0; p.len()];
    for (name, v) in &vars.order {
        if let Some(g) = grads.get(*v) {
            let seg = p.layout.get(name).expect("registered segment");
            gradient[seg.range()].copy_from_slice(g.as_slice());
        }
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(DgmError::NonFinite(format!(
            "gradient coordinate {i} is {} (loss {value})",
            gradient[i]
        )));
    }
    Ok(GradResult { value, gradient })
}

/// Forward evaluation only.
pub fn evaluate<F>(loss: F, p: &ParamVector) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, p, false);
    let out = loss(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Largest `|g_ad - g_fd| / max(1, |g_ad|)` over all coordinates, with
/// central differences of step `eps`.
pub fn finite_diff_check<F>(loss: F, p: &ParamVector, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let ad = value_and_grad(&loss, p)?;
    let mut worst = 0.0_f64;
    let mut probe = p.clone();
    for i in 0..p.len() {
        let orig = p.values[i];
        probe.values[i] = orig + eps;
        let plus = evaluate(&loss, &probe)?;
        probe.values[i] = orig - eps;
        let minus = evaluate(&loss, &probe)?;
        probe.values[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let g = ad.gradient[i];
        worst = worst.max((g - fd).abs() / g.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{flatten_params, DecayGroup, NamedTensor};
    use crate::linalg::Matrix;

    fn params(values: &[f64]) -> ParamVector {
        flatten_params(&[NamedTensor::new(
            "p",
            Matrix::row_vector(values),
            DecayGroup::Exempt,
        )])
    }

    fn sum_of_squares(t: &mut Tape, v: &ParamVars) -> Result<Var> {
        let p = v.get("p")?;
        let sq = t.square(p);
        Ok(t.sum(sq))
    }

    #[test]
    fn quadratic_value_and_gradient() {
        let r = value_and_grad(sum_of_squares, &params(&[1.0, 2.0])).unwrap();
        assert_eq!(r.value, 5.0);
        assert_eq!(r.gradient, vec![2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let loss = |t: &mut Tape, v: &ParamVars| -> Result<Var> {
            let p = v.get("p")?;
            let s = t.sigmoid(p);
            Ok(t.sum(s))
        };
        let r = value_and_grad(loss, &params(&[0.0])).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.gradient, vec![0.25]);
    }

    #[test]
    fn quadratic_finite_difference_error_is_tiny() {
        let err = finite_diff_check(sum_of_squares, &params(&[0.3, -1.2, 2.5]), 1e-6).unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn unused_parameter_has_exactly_zero_gradient() {
        let p = flatten_params(&[
            NamedTensor::new("p", Matrix::row_vector(&[1.5]), DecayGroup::Exempt),
            NamedTensor::new("unused", Matrix::row_vector(&[7.0, 8.0]), DecayGroup::Exempt),
        ]);
        let r = value_and_grad(sum_of_squares, &p).unwrap();
        assert_eq!(r.gradient, vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let loss = |t: &mut Tape, v: &ParamVars| -> Result<Var> {
            let p = v.get("p")?;
            let l = t.log(p);
            Ok(t.sum(l))
        };
        let err = value_and_grad(loss, &params(&[-1.0])).unwrap_err();
        assert!(matches!(err, DgmError::NonFinite(_)));
    }
}
