use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One AdamW update at 1-based `step` with learning rate `lr` (already scheduled).
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    opt: &AdamW,
    lr: f64,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("parameter, gradient and state counts differ"));
    }
    if step == 0 {
        return Err(Error::pre("AdamW steps are 1-based"));
    }
    let bc1 = 1.0 - opt.beta1.powi(step as i32);
    let bc2 = 1.0 - opt.beta2.powi(step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (pd, gd) = (p.data_mut(), g.data());
        for i in 0..pd.len() {
            let mi = &mut m.data_mut()[i];
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gd[i];
            let m_hat = *mi / bc1;
            let vi = &mut v.data_mut()[i];
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gd[i] * gd[i];
            let v_hat = *vi / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * pd[i]);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::pre("max_norm must be positive"));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// `lr · min(1, step / warmup)`.
pub fn lr_at(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

/// `ema ← decay·ema + (1 − decay)·params`
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::shape("EMA and parameter counts differ"));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        p.check_same(e, "ema")?;
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
