//! Reductions.

use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

impl<E: Elem> Graph<E> {
    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.value_rc(a);
        let mut acc = E::ZERO;
        for &x in ta.data() {
            acc += x;
        }
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            let shape = ta.shape().to_vec();
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                buf.add(ia, Tensor::full(&shape, gout.item()));
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::scalar(acc), na, bw)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[C, ...]` -> `[C]`, summing over everything but the leading axis.
    pub fn sum_per_channel(&mut self, a: Var) -> Var {
        let ta = self.value_rc(a);
        let c = ta.shape()[0];
        let inner: usize = ta.shape()[1..].iter().product();
        let mut out = vec![E::ZERO; c];
        for ch in 0..c {
            let mut acc = E::ZERO;
            for &x in &ta.data()[ch * inner..(ch + 1) * inner] {
                acc += x;
            }
            out[ch] = acc;
        }
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            let shape = ta.shape().to_vec();
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let mut g = vec![E::ZERO; c * inner];
                for ch in 0..c {
                    let gv = gout.data()[ch];
                    for x in &mut g[ch * inner..(ch + 1) * inner] {
                        *x = gv;
                    }
                }
                buf.add(ia, Tensor::from_vec(&shape, g));
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[c], out), na, bw)
    }
}
