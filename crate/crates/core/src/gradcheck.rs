//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{invalid, Result};

/// Largest relative error between the reverse-mode gradient of `f` with
/// respect to `param` and central differences with step `h`.
///
/// `f` builds the scalar loss on a fresh graph from a leaf holding the
/// parameter value; it must be deterministic (reseed any RNG inside).
/// The relative error of one coordinate is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, param: &Parameter<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {}", h));
    }
    let mut g = Graph::new();
    let p = g.leaf(param.value.clone(), true);
    let loss = f(&mut g, p)?;
    g.backward(loss)?;
    let analytic = match g.grad(p) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; param.value.len()],
    };

    let eval = |value: &crate::Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.leaf(value.clone(), true);
        let loss = f(&mut g, p)?;
        g.value(loss).item()
    };
    let mut worst = 0.0f64;
    let mut probe = param.value.clone();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
