use serde::{Deserialize, Serialize};

use crate::numkernel::params::{Moments, ParameterStore};
use crate::numkernel::tape::Grads;
use crate::numkernel::tensor::Tensor;
use crate::scalar::Scalar;

/// Decoupled-weight-decay Adam with a linear warm-up / linear decay schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            warmup: 2000,
            total: 150_000,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

impl AdamW {
    /// Learning rate applied at optimizer step `step` (0-based).
    pub fn effective_lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        self.lr * (self.total - step) as f64 / span as f64
    }

    /// Applies one update. Parameters without a gradient entry are treated as
    /// having zero gradient. Returns `false` (and counts a skipped update) when
    /// any gradient is non-finite.
    pub fn step<T: Scalar>(&self, params: &mut ParameterStore<T>, grads: &Grads<T>) -> bool {
        if !grads.all_finite() {
            params.skipped_updates += 1;
            return false;
        }
        let norm = grads.global_norm();
        let clip_scale = match self.clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let lr = self.effective_lr(params.step);
        let t = (params.step + 1) as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let grad = grads.get(&name);
            let p = params.get(&name).expect("listed").clone();
            let moments = params
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: Tensor::zeros(p.shape()), v: Tensor::zeros(p.shape()) });
            let mut updated = p;
            let (b1, b2) = (self.beta1, self.beta2);
            for i in 0..updated.len() {
                let g = grad.map(|g| g.data()[i].as_f64() * clip_scale).unwrap_or(0.0);
                let m = b1 * moments.m.data()[i].as_f64() + (1.0 - b1) * g;
                let v = b2 * moments.v.data()[i].as_f64() + (1.0 - b2) * g * g;
                moments.m.data_mut()[i] = T::of(m);
                moments.v.data_mut()[i] = T::of(v);
                let w = updated.data()[i].as_f64();
                let mhat = m / bc1;
                let vhat = v / bc2;
                let next = w - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w);
                updated.data_mut()[i] = T::of(next);
            }
            *params.get_mut(&name).expect("listed") = updated;
        }
        params.step += 1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::tape::Tape;

    #[test]
    fn warmup_starts_at_lr_over_warmup() {
        let opt = AdamW { lr: 1e-5, warmup: 2000, total: 150_000, ..AdamW::default() };
        assert!((opt.effective_lr(0) - 1e-5 / 2000.0).abs() < 1e-20);
        assert!((opt.effective_lr(1999) - 1e-5).abs() < 1e-20);
        assert!(opt.effective_lr(150_000) == 0.0);
        assert!(opt.effective_lr(76_000) < 1e-5);
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.get("w").unwrap().clone();
        let mut grads = Grads::default();
        grads.map.insert("w".into(), Tensor::zeros(&[1, 3]));
        let opt = AdamW { lr: 0.1, warmup: 0, total: 10, weight_decay: 0.0, ..AdamW::default() };
        assert!(opt.step(&mut store, &grads));
        assert_eq!(store.get("w").unwrap(), &before);
        assert_eq!(store.step, 1);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut grads = Grads::default();
        grads.map.insert("w".into(), Tensor::scalar(f64::NAN));
        let opt = AdamW::default();
        assert!(!opt.step(&mut store, &grads));
        assert_eq!(store.skipped_updates, 1);
        assert_eq!(store.step, 0);
        assert_eq!(store.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::matrix(1, 4, vec![1.5, -2.0, 0.7, 3.0]).unwrap());
        let zero = Tensor::zeros(&[1, 4]);
        let opt = AdamW { lr: 0.05, warmup: 10, total: 2000, weight_decay: 0.0, clip: None, ..AdamW::default() };
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let (l, grads) = {
                let mut tape = Tape::eval();
                let x = tape.param("x", store.get("x").unwrap(), true);
                let l = tape.mse(x, &zero).unwrap();
                (tape.value(l).item(), tape.backward(l).unwrap())
            };
            loss = l;
            if loss < 1e-6 {
                break;
            }
            opt.step(&mut store, &grads);
        }
        assert!(loss < 1e-6, "loss {loss}");
    }
}
