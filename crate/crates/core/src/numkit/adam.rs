use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(lr: f64, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Adam {
            step,
            m,
            v,
            ..Adam::new(lr)
        }
    }

    fn ensure_buffers(&mut self, store: &ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.ensure_buffers(store);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get(id);
            let mut next = p.value.to_vec();
            for j in 0..next.len() {
                let g = p.grad[j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                next[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam_step"));
            }
            let dims = p.value.dims().to_vec();
            store.set_value(id, Tensor::new(dims, next)?)?;
        }
        Ok(())
    }
}
