//! Finite-difference gradient oracle.
//!
//! Recomputes the loss with each parameter component nudged by `±h` and
//! compares the central difference against the analytic gradient from
//! [`Tape::backward`]. The oracle only ever calls the forward path, so it
//! stays independent of the backward implementation it checks.

use super::tape::{Tape, Var};
use super::tensor::Params;
use super::Result;

/// Largest relative disagreement between analytic and numeric gradients.
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

/// Runs `forward` once for the analytic gradients and `2 * numel` more times
/// for central differences with step `h`. Gradients in `params` are left
/// cleared.
pub fn check<F>(params: &mut Params<f64>, h: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&Params<f64>, &mut Tape<f64>) -> Result<Var>,
{
    params.clear_grads();
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.tensor.grad().expect("populated by backward").to_vec())
        .collect();
    params.clear_grads();

    let eval = |params: &Params<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(params, &mut tape)?;
        Ok(tape.scalar_value(loss))
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let n_params = params.len();
    for idx in 0..n_params {
        let numel = {
            let p = params.iter().nth(idx).expect("in range").1;
            p.tensor.numel()
        };
        for j in 0..numel {
            let orig = {
                let p = params.iter_mut().nth(idx).expect("in range").1;
                let v = p.tensor.data()[j];
                p.tensor.data_mut()[j] = v + h;
                v
            };
            let up = eval(params)?;
            {
                let p = params.iter_mut().nth(idx).expect("in range").1;
                p.tensor.data_mut()[j] = orig - h;
            }
            let down = eval(params)?;
            {
                let p = params.iter_mut().nth(idx).expect("in range").1;
                p.tensor.data_mut()[j] = orig;
            }
            let numeric = (up - down) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[idx][j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}
