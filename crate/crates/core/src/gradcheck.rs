//! Central-difference gradient checking against the tape's backward pass.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max relative error between the tape gradient of `param` and central
/// differences of the loss.
///
/// `loss_fn` must deterministically rebuild the scalar loss from the store;
/// it runs once for the analytic gradient and twice per element for the
/// numeric one. The returned error is
/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    param: ParamId,
    eps: f64,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<VarId>,
{
    assert!(eps > 0.0, "eps must be positive");

    let was_trainable = store.get(param).trainable;
    store.set_trainable(param, true);
    store.zero_grads();

    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic = store.grad(param).data().to_vec();

    let mut max_rel = 0.0f64;
    for (i, &analytic_i) in analytic.iter().enumerate() {
        let orig = store.value(param).data()[i];

        store.value_mut(param).data_mut()[i] = orig + eps;
        let mut t_plus = Tape::new();
        let l_plus = loss_fn(store, &mut t_plus)?;
        let f_plus = t_plus.item(l_plus);

        store.value_mut(param).data_mut()[i] = orig - eps;
        let mut t_minus = Tape::new();
        let l_minus = loss_fn(store, &mut t_minus)?;
        let f_minus = t_minus.item(l_minus);

        store.value_mut(param).data_mut()[i] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let denom = 1.0f64.max(analytic_i.abs()).max(numeric.abs());
        max_rel = max_rel.max((analytic_i - numeric).abs() / denom);
    }

    store.set_trainable(param, was_trainable);
    store.zero_grads();
    Ok(max_rel)
}
