//! Central-difference gradient checking against the tape.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over all checked entries.
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares tape gradients of `loss_fn` with central differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every entry of `params`.
///
/// `loss_fn` must be deterministic and build a single-element loss on the given tape.
/// Parameter values are restored afterwards; gradients of `params` are left holding the
/// analytic gradient.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(store, &mut tape)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(Error::dim("grad_check loss", v.shape(), &[1]));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss = {v}")));
        }
        Ok(v)
    };

    for &id in params {
        store.get_mut(id).zero_grad();
    }
    {
        let mut tape = Tape::new();
        let loss = loss_fn(store, &mut tape)?;
        tape.backward(loss, store)?;
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for &id in params {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[i];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let r = grad_check(&mut store, &[id], DEFAULT_EPS, |s, t| {
            let x = t.param(s, id);
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
        assert!(r.max_relative_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn independent_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let r = grad_check(&mut store, &[id], DEFAULT_EPS, |_, t| {
            let c = t.constant(Tensor::scalar(4.2));
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
        assert!(r.max_relative_error < 1e-9);
    }

    #[test]
    fn non_finite_loss_fails() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(1.0));
        let r = grad_check(&mut store, &[id], DEFAULT_EPS, |_, t| {
            Ok(t.constant(Tensor::scalar(f64::NAN)))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
