//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to check.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NumericsError, Tape, Tensor, Var};

/// Gaussian tensor with the given standard deviation.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Relative error between an analytic and a numeric derivative.
///
/// Entries much smaller than the largest gradient component are compared on
/// the scale of `floor` rather than their own magnitude.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference derivative of `f` with respect to every element of every input.
pub fn numeric_gradient<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<Vec<Tensor>, NumericsError>
where
    F: FnMut(&[Tensor]) -> Result<f64, NumericsError>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for k in 0..inputs[t].len() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let plus = f(&work)?;
            work[t].data_mut()[k] = orig - h;
            let minus = f(&work)?;
            work[t].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences and returns the maximum relative error.
pub fn check_gradient<F>(inputs: &[Tensor], h: f64, mut build: F) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    let numeric = numeric_gradient(inputs, h, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).item())
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Maximum relative error over paired gradient tensors, with the floor set
/// to 1e-3 of the largest magnitude seen.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
