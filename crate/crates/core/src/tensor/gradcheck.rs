use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between autodiff and central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar function with central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` coordinate by coordinate.
///
/// Relative error per coordinate is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(input), eps)
        .map(|r| r.max_relative_error)
}

/// [`grad_check`] over several inputs at once; every input is differentiated.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(true);
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::shape("grad_check", "function must return a scalar"));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (coord, &g_ad) in grads.iter().enumerate() {
            let orig = probe[which].values()[coord];
            probe[which].values_mut()[coord] = orig + eps;
            let (t, _, o) = eval(&probe)?;
            let plus = t.value(o)[0];
            probe[which].values_mut()[coord] = orig - eps;
            let (t, _, o) = eval(&probe)?;
            let minus = t.value(o)[0];
            probe[which].values_mut()[coord] = orig;

            let g_fd = (plus - minus) / (2.0 * eps);
            let err = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient check at input {which}, coordinate {coord}")));
            }
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (which, coord);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
