use super::param::{Graph, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

/// Largest coordinate-wise relative error between the tape gradient of the
/// scalar function `f` at `x` and its central finite difference with step
/// `eps`: `max_i |a_i − c_i| / max(|a_i| + |c_i|, REL_FLOOR)`.
///
/// The floor keeps coordinates whose true gradient is zero (a key bias under
/// softmax, say) from turning rounding noise of order 1e-11 into a relative
/// error near 1.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.get_or_zeros(xv);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false)?;
        let out = f(&mut t, v)?;
        let val = t.value(out).data()[0];
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = relative_error(a, central);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every coordinate of every parameter in
/// `store`, for a scalar `f` recorded on a graph bound to the store.
pub fn finite_diff_check_params<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let y = f(&mut g)?;
        g.backward(y)?
    };
    let eval = |probe: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(probe);
        let out = f(&mut g)?;
        let val = g.value(out).data()[0];
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check_params" });
        }
        Ok(val)
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let central = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, central));
        }
    }
    Ok(worst)
}
