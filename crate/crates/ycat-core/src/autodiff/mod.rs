//! Reverse-mode autodiff over a per-forward tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Ops append nodes and,
//! when gradients are enabled, a backward closure capturing `Rc` clones of
//! whatever tensors it needs. [`Graph::backward`] walks the tape in reverse
//! and accumulates parameter gradients into the [`ParamStore`].
//!
//! Everything is single-threaded and allocation order is fixed, so a given
//! seed reproduces runs bit for bit.

mod attention;
mod conv;
mod elementwise;
mod linear;
mod norm;
mod reduce;
mod shape;

pub use norm::channel_softmax;

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Elem, Tensor};

/// Handle to a node in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &mut GradBuf<E>)>;

struct Node<E: Elem> {
    value: Rc<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradient slots used during the backward sweep.
pub struct GradBuf<E: Elem> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> GradBuf<E> {
    /// Accumulate `g` into the slot for node `id`.
    pub fn add(&mut self, id: usize, g: Tensor<E>) {
        match &mut self.slots[id] {
            None => self.slots[id] = Some(g),
            Some(t) => {
                debug_assert_eq!(t.shape(), g.shape());
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }

    /// Mutable access to the slot for node `id`, initializing it to zeros of
    /// `shape` if empty. Lets ops accumulate in place without a temporary.
    pub fn slot_mut(&mut self, id: usize, shape: &[usize]) -> &mut Tensor<E> {
        if self.slots[id].is_none() {
            self.slots[id] = Some(Tensor::zeros(shape));
        }
        self.slots[id].as_mut().unwrap()
    }
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
}

impl<E: Elem> Graph<E> {
    pub fn new(grad_enabled: bool) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            grad_enabled,
        }
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn value_rc(&self, v: Var) -> Rc<Tensor<E>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    #[inline]
    pub fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    #[inline]
    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.grad_enabled && self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<E>,
        needs_grad: bool,
        backward: Option<BackwardFn<E>>,
    ) -> Var {
        self.push_rc(Rc::new(value), needs_grad, backward)
    }

    /// Like [`Graph::push`] but takes an `Rc` so a backward closure can share
    /// the output value (softmax-style ops differentiate via their output).
    pub(crate) fn push_rc(
        &mut self,
        value: Rc<Tensor<E>>,
        needs_grad: bool,
        backward: Option<BackwardFn<E>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            backward: if self.grad_enabled { backward } else { None },
            needs_grad: self.grad_enabled && needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, None)
    }

    /// Input leaf that participates in gradients (used by tests probing
    /// input sensitivity).
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push(value, true, None)
    }

    /// Parameter leaf; shares the store's buffer, no copy.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.tensor_rc(id),
            backward: None,
            needs_grad: self.grad_enabled,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root` (must be scalar). Parameter gradients are
    /// accumulated into `store`; returns the gradient tensors of any
    /// requested non-param nodes (e.g. inputs).
    pub fn backward(
        &self,
        root: Var,
        store: &mut ParamStore<E>,
        want: &[Var],
    ) -> Vec<Option<Tensor<E>>> {
        assert!(
            self.grad_enabled,
            "backward() on a graph built without gradients"
        );
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut buf = GradBuf {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
        };
        buf.slots[root.0] = Some(Tensor::full(self.value(root).shape(), E::ONE));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                buf.slots[id] = None;
                continue;
            }
            let Some(g) = buf.slots[id].take() else {
                continue;
            };
            if let Some(bw) = &self.nodes[id].backward {
                bw(&g, &mut buf);
            }
            if let Some(pid) = self.nodes[id].param {
                store.accumulate_grad(pid, &g);
            }
            if want.iter().any(|w| w.0 == id) {
                buf.slots[id] = Some(g);
            }
        }
        want.iter().map(|w| buf.slots[w.0].take()).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Finite-difference checking harness for individual ops.

    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Compare analytic input-gradients of `f` against central differences.
    /// `f` maps input leaves to a scalar Var.
    pub fn check_input_grads(
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        check_input_grads_with_store(&mut ParamStore::<f64>::new(), inputs, f, tol)
    }

    /// Variant for closures whose ops hold parameters in `store`.
    pub fn check_input_grads_with_store(
        store: &mut ParamStore<f64>,
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let store = &mut *store;
        let mut g = Graph::new(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss, store, &vars);
        drop(g);

        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads[i]
                .as_ref()
                .unwrap_or_else(|| panic!("no gradient for input {i}"));
            for e in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[e] -= h;
                let lp = eval(&plus, &f);
                let lm = eval(&minus, &f);
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic.data()[e];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {i} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn eval(inputs: &[Tensor<f64>], f: &impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new(false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    }
}
