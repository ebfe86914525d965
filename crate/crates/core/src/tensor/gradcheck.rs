use alloc::vec;

use super::{Real, Tape, Tensor, TensorError, Var};

fn evaluate<T: Real, F>(f: &F, input: Tensor<T>) -> Result<T, TensorError>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = f(&mut tape, x)?;
    tape.value(y).item().ok_or_else(|| TensorError::NonScalarLoss { shape: tape.shape(y).to_vec() })
}

/// Compares the tape gradient of a scalar function with central
/// differences.
///
/// Returns the largest componentwise
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T: Real, F>(f: F, input: &Tensor<T>, step: T) -> Result<T, TensorError>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var, TensorError>,
{
    if !(step > T::zero()) {
        return Err(TensorError::InvalidArgument("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().requiring_grad());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); input.len()]);

    let floor = T::of(1e-8);
    let two = T::of(2.0);
    let mut worst = T::zero();
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (evaluate(&f, plus)? - evaluate(&f, minus)?) / (two * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
