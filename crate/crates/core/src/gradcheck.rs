//! Finite-difference gradient checking.
//!
//! `gradcheck` compares the tape's analytic gradient of a scalar-valued
//! tensor function against central differences, coordinate by coordinate.
//! It is the independent oracle behind the gradient test suites.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Max over coordinates of |analytic - central| / max(1, |central|) for a
/// scalar function `f` of one tensor, at `x`, with step `epsilon`.
///
/// `f` must build its computation on the provided graph and return the id of
/// a scalar node. Non-finite outputs are rejected.
pub fn gradcheck<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Contract(format!(
            "gradcheck: epsilon must be in (0, 1e-2], got {epsilon}"
        )));
    }

    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(point.clone());
        let out = f(&mut g, id)?;
        if !g.tensor(out).is_scalar() {
            return Err(Error::Contract(format!(
                "gradcheck: f must return a scalar, got shape {:?}",
                g.tensor(out).shape
            )));
        }
        let v = g.values(out)[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("gradcheck: f produced {v}")));
        }
        Ok(v)
    };

    // Analytic gradient at x.
    let analytic = {
        let mut g = Graph::new();
        let id = g.leaf(x.clone().with_requires_grad());
        let out = f(&mut g, id)?;
        if !g.tensor(out).is_scalar() {
            return Err(Error::Contract(format!(
                "gradcheck: f must return a scalar, got shape {:?}",
                g.tensor(out).shape
            )));
        }
        if !g.values(out)[0].is_finite() {
            return Err(Error::Numeric("gradcheck: f produced a non-finite value".into()));
        }
        g.backward(out)?;
        g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values[i];
        probe.values[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe.values[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe.values[i] = orig;
        let central = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
