//! Adam with bias correction over the trainable entries of a [`ParamStore`].

use vf_tensor::{Scalar, Tensor};

use crate::config::AdamConfig;
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    step: u64,
    /// First and second moments in `f64`, allocated on first use.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` pairs parameter ids with their gradients;
    /// frozen parameters are skipped.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, grad) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let idx = id.index();
            let n = grad.numel();
            let (m, v) = self.moments[idx].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let value = store.value_mut(*id).data_mut();
            for (j, gv) in grad.data().iter().enumerate() {
                let gv = gv.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                value[j] = T::lit(value[j].as_f64() - update);
            }
        }
    }
}
