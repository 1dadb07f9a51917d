//! Same-shape binary ops, scalar ops, and pointwise activations.

use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

impl<E: Elem> Graph<E> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, AddLike::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, AddLike::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let bw = (na || nb).then(|| {
            let (ia, ib) = (a.0, b.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                if na {
                    let g = Tensor::from_vec(
                        gout.shape(),
                        gout.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&g, &y)| g * y)
                            .collect(),
                    );
                    buf.add(ia, g);
                }
                if nb {
                    let g = Tensor::from_vec(
                        gout.shape(),
                        gout.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&g, &x)| g * x)
                            .collect(),
                    );
                    buf.add(ib, g);
                }
            }) as super::BackwardFn<E>
        });
        self.push(out, na || nb, bw)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x / y)
                .collect(),
        );
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let bw = (na || nb).then(|| {
            let (ia, ib) = (a.0, b.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                if na {
                    let g = Tensor::from_vec(
                        gout.shape(),
                        gout.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&g, &y)| g / y)
                            .collect(),
                    );
                    buf.add(ia, g);
                }
                if nb {
                    let data: Vec<E> = gout
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    buf.add(ib, Tensor::from_vec(gout.shape(), data));
                }
            }) as super::BackwardFn<E>
        });
        self.push(out, na || nb, bw)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value_rc(a);
        let cc = E::from_f64(c);
        let out = ta.map(|x| x * cc);
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                buf.add(ia, gout.map(|g| g * cc));
            }) as super::BackwardFn<E>
        });
        self.push(out, na, bw)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value_rc(a);
        let cc = E::from_f64(c);
        let out = ta.map(|x| x + cc);
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                buf.add(ia, gout.clone());
            }) as super::BackwardFn<E>
        });
        self.push(out, na, bw)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value_rc(a);
        let out = ta.map(|x| x.max(E::ZERO));
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            let saved = ta;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let data: Vec<E> = gout
                    .data()
                    .iter()
                    .zip(saved.data())
                    .map(|(&g, &x)| if x > E::ZERO { g } else { E::ZERO })
                    .collect();
                buf.add(ia, Tensor::from_vec(gout.shape(), data));
            }) as super::BackwardFn<E>
        });
        self.push(out, na, bw)
    }

    /// GELU with the tanh approximation (used consistently in both passes).
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value_rc(a);
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| gelu_val(x)).collect());
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            let saved = ta;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let data: Vec<E> = gout
                    .data()
                    .iter()
                    .zip(saved.data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                buf.add(ia, Tensor::from_vec(gout.shape(), data));
            }) as super::BackwardFn<E>
        });
        self.push(out, na, bw)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E, kind: AddLike) -> Var {
        let (ta, tb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(ta.shape(), tb.shape(), "binary op shape mismatch");
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        );
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let bw = (na || nb).then(|| {
            let (ia, ib) = (a.0, b.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                if na {
                    buf.add(ia, gout.clone());
                }
                if nb {
                    match kind {
                        AddLike::Add => buf.add(ib, gout.clone()),
                        AddLike::Sub => buf.add(ib, gout.map(|g| -g)),
                    }
                }
            }) as super::BackwardFn<E>
        });
        self.push(out, na || nb, bw)
    }
}

#[derive(Clone, Copy)]
enum AddLike {
    Add,
    Sub,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_val<E: Elem>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

#[inline]
fn gelu_grad<E: Elem>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}
