//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state; moment tensors are aligned with the store's order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Missing gradients count as zero; frozen parameters are skipped.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient list not aligned with store");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let decay = T::lit(lr * c.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            let g = grads[i].as_ref();
            for (j, ((pw, mw), vw)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .enumerate()
            {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                *mw = b1 * *mw + (T::one() - b1) * gj;
                *vw = b2 * *vw + (T::one() - b2) * gj * gj;
                let mhat = *mw / bc1;
                let vhat = *vw / bc2;
                if c.weight_decay != 0.0 {
                    *pw -= decay * *pw;
                }
                *pw -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all present gradients.
pub fn global_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> T {
    grads
        .iter()
        .flatten()
        .map(|g| g.sum_sq())
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> T {
    let norm = global_norm(grads);
    let max = T::lit(max_norm);
    if norm > max {
        let s = max / (norm + T::lit(1e-6));
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let g = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        opt.update(&mut store, &[Some(g)], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_leaves_param_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::from_vec(&[1], vec![0.25]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.update(&mut store, &[None], 0.1);
        assert_eq!(store.get(id).data(), &[0.25]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = vec![Some(Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap()), None];
        let before = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-5);
    }
}
