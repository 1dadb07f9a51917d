//! Token-wise linear layer.

use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

impl<E: Elem> Graph<E> {
    /// `x [N, in] @ w [in, out] + b [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let (n, din) = (tx.shape()[0], tx.shape()[1]);
        let (win, dout) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(din, win, "linear: input dim mismatch");
        assert_eq!(tb.shape(), &[dout], "linear: bias dim mismatch");
        let mut out = vec![E::ZERO; n * dout];
        E::gemm(n, din, dout, E::ONE, tx.data(), tw.data(), E::ZERO, &mut out);
        for r in 0..n {
            for c in 0..dout {
                out[r * dout + c] += tb.data()[c];
            }
        }
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        let any = nx || nw || nb;
        let bw = any.then(|| {
            let (ix, iw, ib) = (x.0, w.0, b.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let g = gout.data();
                if nx {
                    // dx = g @ w^T
                    let mut dx = vec![E::ZERO; n * din];
                    E::gemm_strided(
                        n,
                        dout,
                        din,
                        E::ONE,
                        g,
                        dout as isize,
                        1,
                        tw.data(),
                        1,
                        dout as isize,
                        E::ZERO,
                        &mut dx,
                        din as isize,
                        1,
                    );
                    buf.add(ix, Tensor::from_vec(&[n, din], dx));
                }
                if nw {
                    // dw += x^T @ g
                    let slot = buf.slot_mut(iw, &[din, dout]);
                    E::gemm_strided(
                        din,
                        n,
                        dout,
                        E::ONE,
                        tx.data(),
                        1,
                        din as isize,
                        g,
                        dout as isize,
                        1,
                        E::ONE,
                        slot.data_mut(),
                        dout as isize,
                        1,
                    );
                }
                if nb {
                    let slot = buf.slot_mut(ib, &[dout]);
                    let sd = slot.data_mut();
                    for r in 0..n {
                        for c in 0..dout {
                            sd[c] += g[r * dout + c];
                        }
                    }
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[n, dout], out), any, bw)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_input_grads, rand_tensor};

    #[test]
    fn grads_linear() {
        let x = rand_tensor(&[5, 3], 21);
        let w = rand_tensor(&[3, 4], 22);
        let b = rand_tensor(&[4], 23);
        check_input_grads(
            &[x, w, b],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-6,
        );
    }
}
