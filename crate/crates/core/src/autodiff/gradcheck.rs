use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares tape gradients of a scalar function against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, returning the largest relative error
/// over every element of every input.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(
            "finite-difference step must be positive".into(),
        ));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let tracked: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = tracked;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; probe[ti].numel()]);
        for (i, a) in analytic.iter().enumerate() {
            let original = probe[ti].data()[i];
            probe[ti].data_mut()[i] = original + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = original - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(*a, numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}
