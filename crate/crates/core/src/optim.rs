//! Adam with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    /// First and second moment estimates, in parameter order.
    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// Restores moment estimates saved from an optimizer over the same parameters.
    pub fn set_moments(&mut self, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        let same = |a: &[Matrix], b: &[Matrix]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Shape("optimizer moments do not match the parameters".into()));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from a full set of gradients (missing entries count as zero).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut dense: Vec<Option<&Matrix>> = vec![None; store.len()];
        for (id, g) in grads {
            dense[id.index()] = Some(g);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let k = id.index();
            let p = store.value_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = dense[k];
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let w = &mut p.data_mut()[i];
                *w -= self.lr * (self.weight_decay * *w + (mi / bc1) / ((vi / bc2).sqrt() + self.eps));
            }
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    n
}
