//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used, so these estimates are independent of
//! the backward implementations they are compared against.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic against numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per checked input.
    pub per_input: Vec<f64>,
    /// `‖analytic − numerical‖₂` per checked input.
    pub abs_error: Vec<f64>,
    /// Number of coordinates compared in total.
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    /// Worst relative error among inputs whose absolute discrepancy exceeds
    /// `abs_floor`. Inputs with an identically vanishing gradient (where
    /// the relative error only measures finite-difference round-off) are
    /// judged by the absolute discrepancy alone.
    pub fn max_rel_error_above(&self, abs_floor: f64) -> f64 {
        self.per_input
            .iter()
            .zip(&self.abs_error)
            .filter(|(_, &a)| a > abs_floor)
            .map(|(&r, _)| r)
            .fold(0.0, f64::max)
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("gradcheck", "objective must be a scalar"));
    }
    Ok(v.item())
}

/// Analytic gradients of the scalar objective `f` at `inputs`.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

/// Central-difference estimate of `∂f/∂inputs[i][j]` for each `(i, j)`.
pub fn numerical_gradient<F>(
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    step: f64,
    f: &F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    coords
        .iter()
        .map(|&(i, j)| {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Compares analytic and central-difference gradients on every coordinate of
/// every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_gradients_at(inputs, &all, step, f)
}

/// Like [`check_gradients`], restricted to `coords[i]` of input `i`.
pub fn check_gradients_at<F>(
    inputs: &[Tensor<f64>],
    coords: &[Vec<usize>],
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut abs_error = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    for (i, idx) in coords.iter().enumerate() {
        let pairs: Vec<(usize, usize)> = idx.iter().map(|&j| (i, j)).collect();
        let numeric = numerical_gradient(inputs, &pairs, step, &f)?;
        let a: Vec<f64> = idx.iter().map(|&j| analytic[i][j]).collect();
        per_input.push(relative_error(&a, &numeric));
        abs_error.push(a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        coordinates += idx.len();
    }
    Ok(GradCheckReport {
        per_input,
        abs_error,
        coordinates,
    })
}
