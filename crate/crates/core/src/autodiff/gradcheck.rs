use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// `(parameter, max relative error)`, sorted by name.
    pub per_param: Vec<(String, f64)>,
    /// Labels of non-differentiable nodes the loss depends on.
    pub nondifferentiable: Vec<String>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

/// Checks every parameter of `store` against central finite differences.
///
/// The error for one parameter is `max_i |a_i - n_i| / max(max|a|, max|n|)`
/// (zero when both gradients vanish). A loss that depends on a
/// non-differentiable node fails regardless of the numbers.
pub fn grad_check<T, F>(store: &ParamStore<T>, step: f64, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let analytic = tape.gradients(loss, store)?;
    let nondifferentiable = tape.nondifferentiable_nodes(loss);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        Ok(t.value(l).item().as_f64())
    };

    let mut probe = store.clone();
    let mut per_param = Vec::new();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let a = analytic.get(&name).expect("gradient per parameter").to_f64_vec();
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + T::of(step);
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - T::of(step);
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let err = if scale == 0.0 { 0.0 } else { diff / scale };
        per_param.push((name, err));
    }
    let passed = nondifferentiable.is_empty()
        && per_param.iter().all(|(_, e)| e.is_finite() && *e < tolerance);
    Ok(GradCheckReport {
        tolerance,
        per_param,
        nondifferentiable,
        passed,
    })
}
