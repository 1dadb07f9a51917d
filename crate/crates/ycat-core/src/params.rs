//! Named parameter store shared by the model, optimizer, and checkpoints.
//!
//! Initialization draws from a per-parameter RNG stream keyed by the
//! parameter's name, so init values do not depend on registration order.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Which architectural component a parameter belongs to; used for gradient
/// coverage reporting and stratified gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    LocalEncoder,
    GlobalEncoder,
    Mixer,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::LocalEncoder,
        ParamGroup::GlobalEncoder,
        ParamGroup::Mixer,
        ParamGroup::Decoder,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::LocalEncoder => "local_encoder",
            ParamGroup::GlobalEncoder => "global_encoder",
            ParamGroup::Mixer => "mixer",
            ParamGroup::Decoder => "decoder",
        }
    }
}

/// How a tensor should be filled at registration time.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal over the given fan-in (conv / relu layers).
    HeNormal { fan_in: usize },
    /// Plain normal with fixed std (transformer weights, positional embs).
    Normal { std: f64 },
}

#[derive(Clone)]
struct Entry<E: Elem> {
    name: String,
    group: ParamGroup,
    value: Rc<Tensor<E>>,
    grad: Tensor<E>,
}

#[derive(Clone)]
pub struct ParamStore<E: Elem> {
    entries: Vec<Entry<E>>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let value = init_tensor::<E>(self.seed, &name, shape, init);
        let grad = Tensor::zeros(shape);
        self.entries.push(Entry {
            name: name.clone(),
            group,
            value: Rc::new(value),
            grad,
        });
        let id = ParamId(self.entries.len() - 1);
        self.by_name.insert(name, id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub(crate) fn tensor_rc(&self, id: ParamId) -> Rc<Tensor<E>> {
        Rc::clone(&self.entries[id.0].value)
    }

    /// Mutable access to a parameter tensor. Panics if a graph still holds a
    /// reference (forward graphs must be dropped before mutating).
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Rc::get_mut(&mut self.entries[id.0].value)
            .expect("parameter is still borrowed by a live graph")
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<E>) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.shape(), g.shape());
        for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *a += *b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for v in e.grad.data_mut() {
                *v = E::ZERO;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Global L2 norm of all accumulated gradients (diagnostics).
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            for &v in e.grad.data() {
                let v = v.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

fn init_tensor<E: Elem>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<E> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, E::ONE),
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            sample_normal(seed, name, shape, std)
        }
        Init::Normal { std } => sample_normal(seed, name, shape, std),
    }
}

fn sample_normal<E: Elem>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name));
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(dist.sample(&mut rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// FNV-1a hash of the parameter name folded with the model seed.
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded stream for non-parameter randomness (data order, augmentation),
/// keyed by a tag and an index so parallel call sites stay independent.
pub fn seeded_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag).wrapping_add(index.wrapping_mul(0x9e37)))
}

/// Uniform in [lo, hi) from a dedicated stream (helper for tests).
pub fn uniform_vec(seed: u64, tag: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, tag, 0);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::<f32>::with_seed(7);
        let ida1 = a.register("w1", ParamGroup::Decoder, &[4, 4], Init::HeNormal { fan_in: 4 });
        let ida2 = a.register("w2", ParamGroup::Decoder, &[4], Init::Normal { std: 0.02 });

        let mut b = ParamStore::<f32>::with_seed(7);
        let idb2 = b.register("w2", ParamGroup::Decoder, &[4], Init::Normal { std: 0.02 });
        let idb1 = b.register("w1", ParamGroup::Decoder, &[4, 4], Init::HeNormal { fan_in: 4 });

        assert_eq!(a.tensor(ida1).data(), b.tensor(idb1).data());
        assert_eq!(a.tensor(ida2).data(), b.tensor(idb2).data());
    }

    #[test]
    fn grad_accumulation() {
        let mut s = ParamStore::<f64>::with_seed(1);
        let id = s.register("p", ParamGroup::Mixer, &[2], Init::Ones);
        s.accumulate_grad(id, &Tensor::from_vec(&[2], vec![1.0, 2.0]));
        s.accumulate_grad(id, &Tensor::from_vec(&[2], vec![0.5, 0.5]));
        assert_eq!(s.grad(id).data(), &[1.5, 2.5]);
        s.zero_grads();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }
}
