use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::real::Real;

/// Adam with bias correction; moments live in the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every trainable tensor.
    ///
    /// Trainable tensors without an entry in `grads` are treated as having a
    /// zero gradient: their moments still decay and their step count advances.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let grad = grads.get(id);
            if let Some(g) = grad {
                if g.shape() != store.value(id).shape() {
                    return Err(Error::InvalidShape {
                        op: "adam_step",
                        detail: format!(
                            "gradient {:?} for `{}` of shape {:?}",
                            g.shape(),
                            store.name(id),
                            store.value(id).shape()
                        ),
                    });
                }
            }
            let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
            let eps = T::from_f64(self.eps);
            let (value, moments) = store.adam_mut(id);
            moments.step += 1;
            let t = moments.step as i32;
            let lr_t = T::from_f64(self.lr);
            let c1 = T::from_f64(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64(1.0 - self.beta2.powi(t));
            let one = T::one();
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g.data()[i]);
                let m = b1 * moments.m[i] + (one - b1) * g;
                let v = b2 * moments.v[i] + (one - b2) * g * g;
                moments.m[i] = m;
                moments.v[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
