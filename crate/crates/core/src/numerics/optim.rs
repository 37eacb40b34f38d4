//! Adam optimizer state/update and the warmup-then-linear-decay schedule.

use super::tensor::{Params, Real};
use super::{NumericsError, Result};
use crate::par;

/// First/second moment buffers per parameter, aligned with the registry's
/// iteration order, plus the update counter.
#[derive(Clone, Debug)]
pub struct AdamState<R: Real> {
    pub step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &Params<R>) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![R::zero(); p.tensor.numel()])
            .collect::<Vec<_>>();
        AdamState {
            step: 0,
            m: m.clone(),
            v: m,
        }
    }

    pub fn moments(&self, idx: usize) -> (&[R], &[R]) {
        (&self.m[idx], &self.v[idx])
    }

    pub fn moments_mut(&mut self, idx: usize) -> (&mut Vec<R>, &mut Vec<R>) {
        (&mut self.m[idx], &mut self.v[idx])
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }
}

/// One bias-corrected Adam update over every parameter. Requires gradients on
/// all parameters (a backward pass populates them, with zeros for unreached
/// ones); clears gradients afterwards.
pub fn adam_step<R: Real>(
    params: &mut Params<R>,
    state: &mut AdamState<R>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if state.n_params() != params.len() {
        return Err(NumericsError::Contract(format!(
            "optimizer state covers {} parameters, model has {}",
            state.n_params(),
            params.len()
        )));
    }
    for (id, p) in params.iter() {
        if p.tensor.grad().is_none() {
            return Err(NumericsError::MissingGrad(p.name.clone()));
        }
        let _ = id;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    let (b1, b2) = (R::from_f64(beta1), R::from_f64(beta2));
    let (ob1, ob2) = (R::from_f64(1.0 - beta1), R::from_f64(1.0 - beta2));
    for (id, p) in params.iter_mut() {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = state.moments_mut(id.index());
        let data = p.tensor.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + ob1 * g;
            v[j] = b2 * v[j] + ob2 * g * g;
            let m_hat = m[j].as_f64() / bc1;
            let v_hat = v[j].as_f64() / bc2;
            let upd = lr * m_hat / (v_hat.sqrt() + eps);
            data[j] = R::from_f64(data[j].as_f64() - upd);
        }
        p.tensor.clear_grad();
    }
    Ok(())
}

/// Linear warmup to `peak_lr` over the first `warmup_fraction` of
/// `total_steps`, then linear decay back to zero at `total_steps`. Steps past
/// the end clamp to zero.
pub fn warmup_linear_lr(step: u64, total_steps: u64, peak_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 || step > total_steps {
        return 0.0;
    }
    let warmup = warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        peak_lr * s / warmup
    } else if warmup >= total_steps as f64 {
        peak_lr
    } else {
        peak_lr * (total_steps as f64 - s) / (total_steps as f64 - warmup)
    }
}

/// Mean loss over a batch with per-example tapes evaluated in parallel on
/// frozen parameters; gradients are folded into the registry in batch order,
/// so the result is identical to a sequential pass. The per-example closure
/// builds a scalar loss on its tape.
pub fn accumulate_batch<R, T, F>(params: &mut Params<R>, examples: &[T], forward: F) -> Result<f64>
where
    R: Real,
    T: Sync,
    F: Fn(&Params<R>, &mut super::tape::Tape<R>, &T) -> Result<super::tape::Var> + Sync + Send,
{
    if examples.is_empty() {
        return Err(NumericsError::Contract("empty batch".into()));
    }
    let frozen: &Params<R> = params;
    let results = par::map(examples, |ex| {
        let mut tape = super::tape::Tape::new();
        let loss = forward(frozen, &mut tape, ex)?;
        let loss_val = tape.scalar_value(loss).as_f64();
        let grads = tape.backward_collect(loss)?;
        Ok::<_, NumericsError>((loss_val, grads))
    });
    let scale = R::from_f64(1.0 / examples.len() as f64);
    let mut total = 0.0;
    params.ensure_grads();
    for r in results {
        let (loss_val, grads) = r?;
        total += loss_val;
        for (pid, g) in grads {
            let scaled: Vec<R> = g.iter().map(|&x| x * scale).collect();
            params.get_mut(pid).tensor.accumulate_grad(&scaled);
        }
    }
    Ok(total / examples.len() as f64)
}
