//! Adam with bias correction; embedding tables use the lazy (touched-rows) variant.

use dpn_tensor::{Float, ParamId, ParamKind, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{DpnError, Result};

fn b1() -> f64 {
    0.9
}
fn b2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "b1")]
    pub beta1: f64,
    #[serde(default = "b2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: b1(), beta2: b2(), eps: eps() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(DpnError::config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    /// First and second moments, one slot per store entry (empty for buffers).
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let slots = |id: ParamId| {
            if store.kind(id).trainable() {
                vec![T::zero(); store.get(id).numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            cfg,
            step: 0,
            m: store.ids().map(slots).collect(),
            v: store.ids().map(slots).collect(),
        }
    }

    /// One update from the gradients accumulated in `store`.
    ///
    /// Dense tensors always update (a missing gradient counts as zero);
    /// embedding rows update only when touched in this step, sharing the
    /// global step count for bias correction.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            match store.kind(id) {
                ParamKind::Buffer => {}
                ParamKind::Dense => {
                    let (data, grad) = store.data_and_grad_mut(id);
                    for k in 0..data.len() {
                        let gk = grad.map_or(0.0, |g| g[k].as_f64());
                        update(&mut data[k], &mut self.m[i][k], &mut self.v[i][k], gk, &c, bc1, bc2);
                    }
                }
                ParamKind::Embedding => {
                    let (data, rows) = store.data_and_sparse_grad_mut(id);
                    for (&row, g) in rows {
                        let dim = g.len();
                        for (j, gj) in g.iter().enumerate() {
                            let k = row * dim + j;
                            update(&mut data[k], &mut self.m[i][k], &mut self.v[i][k], gj.as_f64(), &c, bc1, bc2);
                        }
                    }
                }
            }
        }
    }
}

fn update<T: Float>(p: &mut T, m: &mut T, v: &mut T, g: f64, c: &AdamConfig, bc1: f64, bc2: f64) {
    let mn = c.beta1 * m.as_f64() + (1.0 - c.beta1) * g;
    let vn = c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g;
    *m = T::of(mn);
    *v = T::of(vn);
    let mhat = mn / bc1;
    let vhat = vn / bc2;
    *p = T::of(p.as_f64() - c.lr * mhat / (vhat.sqrt() + c.eps));
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpn_tensor::{Graph, Tensor};

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", ParamKind::Dense, Tensor::new(&[2], vec![0.3, -0.2]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.1), &s);
        adam.step(&mut s);
        assert_eq!(s.get(id).data(), &[0.3, -0.2]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", ParamKind::Dense, Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.01), &s);
        {
            let mut g = Graph::new(&s);
            let w = g.param(id);
            let l = g.scale(w, -3.0).unwrap();
            let grads = g.backward(l).unwrap();
            drop(g);
            s.accumulate(&grads);
        }
        adam.step(&mut s);
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let want = 1.0 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((s.get(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn untouched_rows_keep_state() {
        let mut s = ParamStore::<f64>::new();
        let e = s.add("emb", ParamKind::Embedding, Tensor::new(&[3, 2], vec![1.0; 6]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.1), &s);
        let grads = {
            let mut g = Graph::new(&s);
            let x = g.gather(e, &[1], &[1], "f").unwrap();
            let l = g.sum_all(x).unwrap();
            g.backward(l).unwrap()
        };
        s.accumulate(&grads);
        adam.step(&mut s);
        let d = s.get(e).data();
        assert_eq!(&d[0..2], &[1.0, 1.0]);
        assert_eq!(&d[4..6], &[1.0, 1.0]);
        assert!(d[2] < 1.0);
        assert_eq!(adam.m[e.index()][0], 0.0);
        assert!(adam.m[e.index()][2] != 0.0);
    }
}
