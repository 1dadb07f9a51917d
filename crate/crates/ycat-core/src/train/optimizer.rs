//! AdamW with decoupled weight decay; update arithmetic in f64.

use crate::params::ParamStore;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct AdamW<E: Elem> {
    pub cfg: AdamWConfig,
    step: usize,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Elem> AdamW<E> {
    pub fn new(store: &ParamStore<E>, cfg: AdamWConfig) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.tensor(id).shape()))
            .collect();
        let v = store
            .ids()
            .map(|id| Tensor::zeros(store.tensor(id).shape()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore<E>) {
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for id in store.ids().collect::<Vec<_>>() {
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for (i, gref) in grad.iter().enumerate() {
                let g = gref.to_f64();
                let mi = c.beta1 * m.data()[i].to_f64() + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i].to_f64() + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = E::from_f64(mi);
                v.data_mut()[i] = E::from_f64(vi);
            }
            let mdata = m.data().to_vec();
            let vdata = v.data().to_vec();
            let p = store.tensor_mut(id);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let mhat = mdata[i].to_f64() / bc1;
                let vhat = vdata[i].to_f64() / bc2;
                let old = x.to_f64();
                let upd = mhat / (vhat.sqrt() + c.eps) + c.weight_decay * old;
                *x = E::from_f64(old - c.lr * upd);
            }
        }
        store.zero_grads();
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamGroup};

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut store = ParamStore::<f32>::with_seed(1);
        let id = store.register("p", ParamGroup::Decoder, &[4], Init::Normal { std: 1.0 });
        let before = store.tensor(id).data().to_vec();
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..5 {
            store.accumulate_grad(id, &Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 4.0]));
            opt.step(&mut store);
        }
        assert_eq!(store.tensor(id).data(), before.as_slice());
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (p - 3)^2 via its gradient 2(p-3)
        let mut store = ParamStore::<f64>::with_seed(2);
        let id = store.register("p", ParamGroup::Decoder, &[1], Init::Zeros);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..400 {
            let p = store.tensor(id).data()[0];
            store.accumulate_grad(id, &Tensor::from_vec(&[1], vec![2.0 * (p - 3.0)]));
            opt.step(&mut store);
        }
        let p = store.tensor(id).data()[0];
        assert!((p - 3.0).abs() < 1e-2, "p = {p}");
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut store = ParamStore::<f64>::with_seed(3);
        let id = store.register("p", ParamGroup::Decoder, &[1], Init::Ones);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.01,
                weight_decay: 0.5,
                ..Default::default()
            },
        );
        for _ in 0..10 {
            opt.step(&mut store);
        }
        let p = store.tensor(id).data()[0];
        assert!(p < 1.0 && p > 0.9, "p = {p}");
    }
}
