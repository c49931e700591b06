//! Central finite-difference checker for tape gradients.

use crate::autodiff::{Bound, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-12;

/// Evaluates `loss` on a fresh tape with `params` bound as constants.
pub fn eval_loss<F>(loss: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, false);
    let out = loss(&mut tape, &bound)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Reverse-mode gradient of `loss` with respect to every tensor in `params`.
pub fn analytic_grad<F>(loss: &F, params: &ParamSet) -> Result<ParamSet>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let out = loss(&mut tape, &bound)?;
    tape.backward_params(out)
}

/// Central-difference gradient, one coordinate at a time.
pub fn numeric_grad<F>(loss: &F, params: &ParamSet, step: f64) -> Result<ParamSet>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.len();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval_loss(loss, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval_loss(loss, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing `{name}`[{i}]"
                )));
            }
            out.get_mut(name)?.data_mut()[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Relative disagreement between two gradient tensors:
/// `|a - n| / max(|a|, |n|, REL_FLOOR)` with `|.|` the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(REL_FLOOR)
}

/// Maximum over named parameters of the relative error between the tape
/// gradient and a central finite difference with the given step.
pub fn grad_check<F>(loss: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let numeric = numeric_grad(&loss, params, step)?;
    let analytic = analytic_grad(&loss, params)?;
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let n = numeric.get(name)?;
        worst = worst.max(relative_error(a.data(), n.data()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn params(v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(v.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |t, b| {
                let x = b.get("x")?;
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &params(&[1.0, 2.0, 3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.2))),
            &params(&[1.0, -1.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let r = grad_check(|t, _| Ok(t.constant(Tensor::scalar(0.0))), &params(&[1.0]), 0.0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        // exp(1000 * x) overflows once x is nudged above 0.70978
        let r = grad_check(
            |t, b| {
                let x = b.get("x")?;
                let big = t.scale(x, 1000.0);
                let e = t.exp(big);
                Ok(t.sum(e))
            },
            &params(&[0.0, 0.70978]),
            1e-5,
        );
        match r {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("`x`[1]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
