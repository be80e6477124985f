use super::array::Array;
use super::tape::{Tape, Var};
use super::NumericsError;

/// Worst disagreement found for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol_rel
    }

    /// The report itself when within tolerance, otherwise an error naming the
    /// worst coordinate.
    pub fn into_result(self) -> Result<Self, NumericsError> {
        if self.passed() {
            return Ok(self);
        }
        let worst = self
            .params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("failing report has at least one parameter");
        Err(NumericsError::GradCheck {
            param: worst.param,
            index: worst.worst_index,
            analytic: worst.analytic,
            numeric: worst.numeric,
            rel_err: worst.max_rel_err,
            tol: self.tol_rel,
        })
    }
}

/// Options for [`finite_difference_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol_rel: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on an absolute scale.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            tol_rel: 1e-3,
            abs_floor: 1e-6,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(p+eps) - f(p-eps)) / 2eps`, coordinate by coordinate.
///
/// `f` receives a fresh tape and the parameters registered on it, and must
/// return a one-element output. Always evaluated in 64-bit.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Array<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, NumericsError>,
{
    let analytic: Vec<Array<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    };

    let eval = |ps: &[Array<f64>]| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(NumericsError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut work: Vec<Array<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tol_rel: opts.tol_rel,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            param: pi,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_rel_err: 0.0,
        };
        for i in 0..work[pi].len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, opts.abs_floor);
            if err > check.max_rel_err || i == 0 {
                check = ParamCheck {
                    param: pi,
                    worst_index: i,
                    analytic: a,
                    numeric,
                    max_rel_err: err,
                };
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
