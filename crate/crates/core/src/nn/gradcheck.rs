//! Central finite-difference verification of the tape's gradients.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

/// Below this magnitude the absolute difference is reported instead of a
/// relative one.
const SMALL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                if with_grad {
                    g.variable(t.shape().to_vec(), t.data().to_vec())
                } else {
                    g.constant(t.shape().to_vec(), t.data().to_vec())
                }
            })
            .collect::<Result<_>>()?;
        let loss = f(&mut g, &vars)?;
        if g.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::shape("check_gradients", "function must return a scalar"));
        }
        let value = g.value(loss)[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (j, &x) in input.data().iter().enumerate() {
            probe[i].data_mut()[j] = x + h;
            let (up, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = x - h;
            let (down, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < SMALL {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
