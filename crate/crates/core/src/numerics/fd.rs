//! Central finite differences, the numeric oracle for the tape.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::store::ParameterStore;
use crate::numerics::tensor::Tensor;

/// Numeric gradient of `f` for every scalar entry of every parameter,
/// via central differences (f(x+h) - f(x-h)) / 2h.
///
/// `f` must be deterministic: pin any seeds and disable dropout before
/// calling. The store is restored to its original values on return.
pub fn finite_difference_grad<F>(
    f: &mut F,
    store: &mut ParameterStore,
    h: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let (rows, cols) = store.value(&name)?.shape();
        let mut grad = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let original = store.value(&name)?.data()[i];
            store.value_mut(&name)?.data_mut()[i] = original + h;
            let plus = f(store)?;
            store.value_mut(&name)?.data_mut()[i] = original - h;
            let minus = f(store)?;
            store.value_mut(&name)?.data_mut()[i] = original;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Scale-aware relative error between an analytic and a numeric gradient
/// entry: |a - n| / max(1, |a|, |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}
