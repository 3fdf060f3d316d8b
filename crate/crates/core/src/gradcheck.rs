//! Finite-difference gradient checks shared by the model tests.

use crate::autograd::{Tape, Var};
use crate::params::{Bound, ParamStore};

/// Compares tape gradients of `loss` against central differences for every
/// entry of the named groups (all groups when `names` is empty).
pub(crate) fn assert_gradients(
    params: &ParamStore,
    names: &[&str],
    loss: impl for<'t, 'p> Fn(&Bound<'t, 'p>) -> Var<'t>,
    eps: f64,
    rel_tol: f64,
) {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params);
    let out = loss(&bound);
    let grads = tape.backward(out);
    let eval = |p: &ParamStore| {
        let t = Tape::new();
        let b = Bound::new(&t, p);
        loss(&b).item()
    };
    let all: Vec<String> = params.names().cloned().collect();
    let selected: Vec<String> =
        if names.is_empty() { all } else { names.iter().map(|s| s.to_string()).collect() };
    let mut checked = 0;
    for name in &selected {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let value = params.get(name).unwrap();
        for idx in ndarray::indices(value.dim()) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[idx] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[idx];
            let scale = a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() <= rel_tol * scale + 1e-7,
                "{name}{idx:?}: analytic {a} numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}
