use crate::{ParamStore, Tensor};

/// Adam with bias correction; moment buffers are laid out like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(lr: f32, (beta1, beta2): (f32, f32), step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Parameters without a gradient are left untouched, and a
    /// zero learning rate leaves every parameter bit-identical.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            if self.lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
