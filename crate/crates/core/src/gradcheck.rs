//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference estimates of `∂f/∂x` at the given flat coordinates.
pub fn central_differences<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&c| {
            let orig = x.data()[c];
            probe.data_mut()[c] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[c] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[c] = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Evaluates `f` on a fresh tape and returns (value, gradient w.r.t. `x`).
pub fn value_and_grad<F>(f: &F, x: &Tensor) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().requires_grad(true))?;
    let y = f(&mut tape, xv)?;
    let value = tape.value(y).item()?;
    tape.backward(y)?;
    let grad = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((value, grad))
}

fn value_only<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let y = f(&mut tape, xv)?;
    tape.value(y).item()
}

/// Checks every coordinate of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, h, &coords)
}

/// Checks only the listed flat coordinates of `x`.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.numel()) {
        return Err(Error::Index(format!("coordinate {bad} outside {} elements", x.numel())));
    }
    let (_, grad) = value_and_grad(&f, x)?;
    let analytic: Vec<f64> = coords.iter().map(|&c| grad[c]).collect();
    let numeric = central_differences(|p| value_only(&f, p), x, h, coords)?;
    Ok(max_relative_error(&analytic, &numeric))
}
