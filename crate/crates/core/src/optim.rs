//! AdamW with decoupled weight decay, global-norm clipping and the cosine
//! warmup schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Linear warmup from 0 to `peak` over `⌈warmup_ratio · total⌉` steps, then
/// cosine decay to 0 at `total`.
pub fn cosine_with_warmup(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm<F: Real>(grads: &[&Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before and after clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [&mut Tensor<F>], max_norm: f64) -> (f64, f64) {
    let pre = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if pre > max_norm && pre > 0.0 {
        let s = F::lit(max_norm / (pre + 1e-12));
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    let post = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    (pre, post)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW<F = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    /// Moment buffers shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>, weight_decay: f64) -> Self {
        let m: Vec<Tensor<F>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update. `decay[i]` selects which tensors get weight decay.
    pub fn update(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>], decay: &[bool], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (fb1, fb2) = (F::lit(b1), F::lit(b2));
        let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let step_size = F::lit(lr / bc1);
        let bc2_sqrt = F::lit(bc2.sqrt());
        let eps = F::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { F::lit(lr * self.weight_decay) } else { F::zero() };
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = fb1 * m[j] + one_b1 * g[j];
                v[j] = fb2 * v[j] + one_b2 * g[j] * g[j];
                *w -= wd * *w;
                *w -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
