//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::AutodiffError;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// False when two evaluations at the same point disagreed, which means
    /// `f` draws fresh noise per call; `max_rel_error` is then infinite.
    pub deterministic: bool,
    pub coordinates: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences with step
/// `h` on every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var, AutodiffError>,
{
    let eval = |p: &ParamStore| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item().ok_or_else(|| AutodiffError::NotScalar(tape.shape(loss).to_vec()))
    };

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item().ok_or_else(|| AutodiffError::NotScalar(tape.shape(loss).to_vec()))?;
    let grads = tape.backward(loss)?.into_named();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, deterministic: true, coordinates: 0 };
    if eval(params)?.to_bits() != base.to_bits() {
        report.deterministic = false;
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }

    let mut p = params.clone();
    for (name, g) in &grads {
        for k in 0..g.numel() {
            let orig = p.get(name).unwrap().data()[k];
            p.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let up = eval(&p)?;
            p.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let down = eval(&p)?;
            p.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(g.data()[k], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}
