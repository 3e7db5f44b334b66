use super::tape::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

/// Adam with bias correction. Learning rates are resolved per parameter so
/// grids and MLPs can step at different speeds.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr_for: impl Fn(ParamId, &str) -> f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let lr = lr_for(id, store.name(id));
            let g = g.data().to_vec();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
