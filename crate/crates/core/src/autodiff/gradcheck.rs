//! Central-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative errors below this magnitude of gradient are measured against
/// the floor instead, so that entries whose true gradient is ~0 do not
/// turn rounding noise into huge relative errors.
pub const DEFAULT_DENOMINATOR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-6,
            denominator_floor: DEFAULT_DENOMINATOR_FLOOR,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar program `f` against central
/// differences, entry by entry, for every tensor in `params`.
///
/// `f` is re-run from scratch for each perturbation, so it must be a pure
/// function of the parameter values.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let mut values = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    let mut evaluations = 1;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut report = ParamReport {
            index: pi,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..values[pi].numel() {
            let orig = values[pi].data()[k];
            values[pi].data_mut()[k] = orig + opts.step;
            let plus = eval(&values)?;
            values[pi].data_mut()[k] = orig - opts.step;
            let minus = eval(&values)?;
            values[pi].data_mut()[k] = orig;
            evaluations += 2;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[k];
            let err = relative_error(a, numeric, opts.denominator_floor);
            if err > report.max_rel_error || err.is_nan() {
                report = ParamReport {
                    index: pi,
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    worst_entry: k,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        params: reports,
        tolerance: opts.tolerance,
        evaluations,
    })
}
