//! Central-difference gradient checking.

use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// `(tensor index, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares supplied analytic gradients against central differences of `eval`.
///
/// `eval` is called twice at the unperturbed point first; differing results
/// are reported as [`NumError::NonDeterministic`].
pub fn compare_gradients<F>(params: &[Tensor], analytic: &[Tensor], h: f64, mut eval: F) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(NumError::Invalid(format!("perturbation h must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(NumError::Invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        p.check_same(g, "compare_gradients")?;
    }
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumError::NonDeterministic { first, second });
    }

    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for ti in 0..work.len() {
        for ci in 0..work[ti].len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[ti].data()[ci], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (ti, ci);
            }
        }
    }
    Ok(report)
}

/// Checks the tape gradient of `f` against central differences with step `h`.
///
/// `f` builds a scalar loss on the given tape from the bound parameters.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, f: F) -> Result<FdReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let adj = tape.backward(loss)?;
        vars.iter().map(|&v| adj.get(v)).collect::<Vec<_>>()
    };
    compare_gradients(params, &analytic, h, |ps| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    })
}
