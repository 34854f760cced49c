use crate::nn::{ParamGroup, ParamStore};
use crate::{Real, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamSlot<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based index of this update.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    lr: f64,
    cfg: &AdamConfig,
    slot: &mut AdamSlot<T>,
    step: u64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(TensorError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || slot.m.len() != params.len() || slot.v.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), slot.m.len()],
        });
    }
    if step == 0 {
        return Err(TensorError::InvalidArgument("adam step index starts at 1".into()));
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::from_f64(cfg.eps);
    let lr = T::from_f64(lr);
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
        slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
        let mh = slot.m[i] / c1;
        let vh = slot.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`], with a learning rate per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub slots: Vec<AdamSlot<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            slots: store.iter().map(|p| AdamSlot::new(p.tensor.numel())).collect(),
            step: 0,
        }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`,
    /// `None` meaning no gradient reached it (treated as zero).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.slots.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                lhs: vec![store.len()],
                rhs: vec![grads.len(), self.slots.len()],
            });
        }
        self.step += 1;
        for (i, entry) in store.iter_mut().enumerate() {
            let n = entry.tensor.numel();
            let zeros;
            let g = match &grads[i] {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![T::zero(); n];
                    &zeros
                }
            };
            adam_step(
                entry.tensor.data_mut(),
                g,
                lr(entry.group),
                &self.config,
                &mut self.slots[i],
                self.step,
            )?;
        }
        Ok(())
    }
}
