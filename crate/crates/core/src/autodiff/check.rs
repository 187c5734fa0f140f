//! Central-difference gradient oracle.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::tape::{GradientMap, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Named parameter values handed to the function under test.
pub type ParamSet = BTreeMap<ParamId, Tensor>;

/// Estimates `df/dp` for every coordinate of every tensor in `params` with
/// `(f(p + h) - f(p - h)) / 2h`.
///
/// `f` must be deterministic. Each coordinate is restored to its exact
/// original value before the next one is perturbed.
pub fn finite_diff_gradient<F>(mut f: F, params: &ParamSet, h: f64) -> Result<GradientMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let mut work = params.clone();
    let ids: Vec<ParamId> = work.keys().cloned().collect();
    let mut out = GradientMap::default();
    for id in ids {
        let len = work[&id].len();
        let mut grad = Tensor::zeros(work[&id].shape().to_vec());
        for i in 0..len {
            let orig = work[&id].data()[i];
            set(&mut work, &id, i, orig + h);
            let plus = f(&work)?;
            set(&mut work, &id, i, orig - h);
            let minus = f(&work)?;
            set(&mut work, &id, i, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "f evaluated to {plus} / {minus} while perturbing {id}[{i}]"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(id, grad);
    }
    Ok(out)
}

fn set(work: &mut ParamSet, id: &ParamId, i: usize, v: f64) {
    if let Some(t) = work.get_mut(id) {
        t.data_mut()[i] = v;
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is zero (or within
/// rounding of it) from dominating a relative comparison.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one(id: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(ParamId::new(id), t);
        p
    }

    #[test]
    fn square_at_three() {
        let p = one("x", Tensor::scalar(3.0));
        let g = finite_diff_gradient(
            |p| {
                let x = p[&ParamId::new("x")].data()[0];
                Ok(x * x)
            },
            &p,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g.get(&"x".into()).unwrap().data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = one("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap());
        let g = finite_diff_gradient(|_| Ok(1.25), &p, DEFAULT_STEP).unwrap();
        assert!(g.get(&"w".into()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let p = one("x", Tensor::scalar(1.0));
        assert!(matches!(
            finite_diff_gradient(|_| Ok(0.0), &p, 0.0),
            Err(Error::InvalidStep(_))
        ));
        assert!(matches!(
            finite_diff_gradient(|_| Ok(f64::INFINITY), &p, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-9) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-15, 0.0, 1e-9) < 1e-5);
    }
}
