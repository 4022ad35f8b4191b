//! Central finite-difference checks for tape-built functions.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error with a unit floor on the denominator, so tiny gradients
/// are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares analytic gradients of `f` with respect to every input against
/// central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut scratch = ParamStore::new();
    let grads = tape.backward(out, &mut scratch)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut values = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[which].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[which].numel() {
            let orig = values[which].data()[i];
            values[which].data_mut()[i] = orig + h;
            let plus = eval(&values)?;
            values[which].data_mut()[i] = orig - h;
            let minus = eval(&values)?;
            values[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Same check, but perturbing the named parameters of a store.
pub fn check_param_gradients<F>(store: &mut ParamStore, ids: &[ParamId], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out, store)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            store
                .grad(id)
                .cloned()
                .ok_or_else(|| Error::MissingGradient(store.get(id).name.clone()))
        })
        .collect::<Result<_>>()?;
    store.zero_grad();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, store)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (&id, a) in ids.iter().zip(&analytic) {
        for i in 0..a.numel() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.max_abs_error = report.max_abs_error.max((a.data()[i] - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a.data()[i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
