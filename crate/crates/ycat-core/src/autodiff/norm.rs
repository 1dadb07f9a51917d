//! Normalization layers and channel softmax.
//!
//! Statistics are accumulated in f64 regardless of element type so that the
//! f32 path stays stable on large spatial extents.

use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

impl<E: Elem> Graph<E> {
    /// Instance norm over `[C, D, H, W]`: per-channel spatial statistics,
    /// affine `gamma`/`beta` of shape `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (
            self.value_rc(x),
            self.value_rc(gamma),
            self.value_rc(beta),
        );
        let c = tx.shape()[0];
        let n: usize = tx.shape()[1..].iter().product();
        let x_shape = tx.shape().to_vec();
        assert_eq!(tg.shape(), &[c]);
        assert_eq!(tb.shape(), &[c]);
        let mut out = vec![E::ZERO; c * n];
        let mut inv_std = vec![E::ZERO; c];
        let mut means = vec![E::ZERO; c];
        for ch in 0..c {
            let xs = &tx.data()[ch * n..(ch + 1) * n];
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for &v in xs {
                let v = v.to_f64();
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let var = (sumsq / n as f64 - mean * mean).max(0.0);
            let inv = 1.0 / (var + eps).sqrt();
            means[ch] = E::from_f64(mean);
            inv_std[ch] = E::from_f64(inv);
            let (g, b) = (tg.data()[ch], tb.data()[ch]);
            let (m, iv) = (means[ch], inv_std[ch]);
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = g * (v - m) * iv + b;
            }
        }
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let any = nx || ng || nb;
        let bw = any.then(|| {
            let (ix, ig, ib) = (x.0, gamma.0, beta.0);
            let shape = tx.shape().to_vec();
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let gd = gout.data();
                let mut dx = nx.then(|| vec![E::ZERO; c * n]);
                for ch in 0..c {
                    let xs = &tx.data()[ch * n..(ch + 1) * n];
                    let gs = &gd[ch * n..(ch + 1) * n];
                    let (m, iv) = (means[ch], inv_std[ch]);
                    // accumulate sums in f64
                    let mut sum_g = 0.0f64;
                    let mut sum_gx = 0.0f64;
                    for (&gv, &xv) in gs.iter().zip(xs) {
                        let xhat = ((xv - m) * iv).to_f64();
                        sum_g += gv.to_f64();
                        sum_gx += gv.to_f64() * xhat;
                    }
                    if ng {
                        let slot = buf.slot_mut(ig, &[c]);
                        slot.data_mut()[ch] += E::from_f64(sum_gx);
                    }
                    if nb {
                        let slot = buf.slot_mut(ib, &[c]);
                        slot.data_mut()[ch] += E::from_f64(sum_g);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let gch = tg.data()[ch];
                        let mean_g = E::from_f64(sum_g / n as f64);
                        let mean_gx = E::from_f64(sum_gx / n as f64);
                        for ((d, &gv), &xv) in
                            dx[ch * n..(ch + 1) * n].iter_mut().zip(gs).zip(xs)
                        {
                            let xhat = (xv - m) * iv;
                            *d = gch * iv * (gv - mean_g - xhat * mean_gx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    buf.add(ix, Tensor::from_vec(&shape, dx));
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&x_shape, out), any, bw)
    }

    /// Layer norm over the last axis of `[N, K]` tokens.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (
            self.value_rc(x),
            self.value_rc(gamma),
            self.value_rc(beta),
        );
        let (n, k) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(tg.shape(), &[k]);
        assert_eq!(tb.shape(), &[k]);
        let mut out = vec![E::ZERO; n * k];
        let mut means = vec![E::ZERO; n];
        let mut invs = vec![E::ZERO; n];
        for r in 0..n {
            let xs = &tx.data()[r * k..(r + 1) * k];
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for &v in xs {
                let v = v.to_f64();
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / k as f64;
            let var = (sumsq / k as f64 - mean * mean).max(0.0);
            means[r] = E::from_f64(mean);
            invs[r] = E::from_f64(1.0 / (var + eps).sqrt());
            let (m, iv) = (means[r], invs[r]);
            for ((o, &v), (&g, &b)) in out[r * k..(r + 1) * k]
                .iter_mut()
                .zip(xs)
                .zip(tg.data().iter().zip(tb.data()))
            {
                *o = g * (v - m) * iv + b;
            }
        }
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let any = nx || ng || nb;
        let bw = any.then(|| {
            let (ix, ig, ib) = (x.0, gamma.0, beta.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let gd = gout.data();
                let mut dx = nx.then(|| vec![E::ZERO; n * k]);
                let mut dgamma = ng.then(|| vec![E::ZERO; k]);
                let mut dbeta = nb.then(|| vec![E::ZERO; k]);
                for r in 0..n {
                    let xs = &tx.data()[r * k..(r + 1) * k];
                    let gs = &gd[r * k..(r + 1) * k];
                    let (m, iv) = (means[r], invs[r]);
                    let mut sum_gg = 0.0f64; // sum of g*gamma
                    let mut sum_ggx = 0.0f64; // sum of g*gamma*xhat
                    for (j, (&gv, &xv)) in gs.iter().zip(xs).enumerate() {
                        let xhat = (xv - m) * iv;
                        if let Some(dg) = dgamma.as_mut() {
                            dg[j] += gv * xhat;
                        }
                        if let Some(db) = dbeta.as_mut() {
                            db[j] += gv;
                        }
                        let gg = gv * tg.data()[j];
                        sum_gg += gg.to_f64();
                        sum_ggx += (gg * xhat).to_f64();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mean_gg = E::from_f64(sum_gg / k as f64);
                        let mean_ggx = E::from_f64(sum_ggx / k as f64);
                        for (j, (&gv, &xv)) in gs.iter().zip(xs).enumerate() {
                            let xhat = (xv - m) * iv;
                            let gg = gv * tg.data()[j];
                            dx[r * k + j] = iv * (gg - mean_gg - xhat * mean_ggx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    buf.add(ix, Tensor::from_vec(&[n, k], dx));
                }
                if let Some(dg) = dgamma {
                    buf.add(ig, Tensor::from_vec(&[k], dg));
                }
                if let Some(db) = dbeta {
                    buf.add(ib, Tensor::from_vec(&[k], db));
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[n, k], out), any, bw)
    }

    /// Softmax over the leading (class) axis of `[J, ...]`.
    pub fn softmax_channel(&mut self, x: Var) -> Var {
        let tx = self.value_rc(x);
        let out = channel_softmax(&tx);
        let out_rc = Rc::new(out);
        let na = self.needs_grad(x);
        let bw = na.then(|| {
            let ix = x.0;
            let p = Rc::clone(&out_rc);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let j = p.shape()[0];
                let n: usize = p.shape()[1..].iter().product();
                let mut dx = vec![E::ZERO; j * n];
                let pd = p.data();
                let gd = gout.data();
                let mut dot = vec![E::ZERO; n];
                for cls in 0..j {
                    for v in 0..n {
                        dot[v] += gd[cls * n + v] * pd[cls * n + v];
                    }
                }
                for cls in 0..j {
                    for v in 0..n {
                        dx[cls * n + v] = pd[cls * n + v] * (gd[cls * n + v] - dot[v]);
                    }
                }
                buf.add(ix, Tensor::from_vec(p.shape(), dx));
            }) as super::BackwardFn<E>
        });
        self.push_rc(out_rc, na, bw)
    }

    /// Log-softmax over the leading (class) axis of `[J, ...]`.
    pub fn log_softmax_channel(&mut self, x: Var) -> Var {
        let tx = self.value_rc(x);
        let j = tx.shape()[0];
        let n: usize = tx.shape()[1..].iter().product();
        let xd = tx.data();
        let mut maxv = vec![E::from_f64(f64::NEG_INFINITY); n];
        for cls in 0..j {
            for v in 0..n {
                maxv[v] = maxv[v].max(xd[cls * n + v]);
            }
        }
        let mut sum = vec![E::ZERO; n];
        for cls in 0..j {
            for v in 0..n {
                sum[v] += (xd[cls * n + v] - maxv[v]).exp();
            }
        }
        let lse: Vec<E> = sum.iter().zip(&maxv).map(|(&s, &m)| s.ln() + m).collect();
        let mut out = vec![E::ZERO; j * n];
        for cls in 0..j {
            for v in 0..n {
                out[cls * n + v] = xd[cls * n + v] - lse[v];
            }
        }
        let out = Tensor::from_vec(tx.shape(), out);
        let out_rc = Rc::new(out);
        let na = self.needs_grad(x);
        let bw = na.then(|| {
            let ix = x.0;
            let logp = Rc::clone(&out_rc);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let gd = gout.data();
                let lp = logp.data();
                let mut colsum = vec![E::ZERO; n];
                for cls in 0..j {
                    for v in 0..n {
                        colsum[v] += gd[cls * n + v];
                    }
                }
                let mut dx = vec![E::ZERO; j * n];
                for cls in 0..j {
                    for v in 0..n {
                        dx[cls * n + v] = gd[cls * n + v] - lp[cls * n + v].exp() * colsum[v];
                    }
                }
                buf.add(ix, Tensor::from_vec(logp.shape(), dx));
            }) as super::BackwardFn<E>
        });
        self.push_rc(out_rc, na, bw)
    }
}

/// Standalone channel softmax used by both the graph op and inference paths.
pub fn channel_softmax<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let j = x.shape()[0];
    let n: usize = x.shape()[1..].iter().product();
    let xd = x.data();
    let mut out = vec![E::ZERO; j * n];
    let mut maxv = vec![E::from_f64(f64::NEG_INFINITY); n];
    for cls in 0..j {
        for v in 0..n {
            maxv[v] = maxv[v].max(xd[cls * n + v]);
        }
    }
    let mut sum = vec![E::ZERO; n];
    for cls in 0..j {
        let row = &mut out[cls * n..(cls + 1) * n];
        for v in 0..n {
            row[v] = xd[cls * n + v] - maxv[v];
        }
        E::exp_slice(row);
        for v in 0..n {
            sum[v] += row[v];
        }
    }
    for cls in 0..j {
        for v in 0..n {
            out[cls * n + v] = out[cls * n + v] / sum[v];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_input_grads, rand_tensor};
    use super::*;

    #[test]
    fn grads_instance_norm() {
        let x = rand_tensor(&[2, 3, 2, 2], 31);
        let g0 = rand_tensor(&[2], 32);
        let b0 = rand_tensor(&[2], 33);
        check_input_grads(
            &[x, g0, b0],
            |g, v| {
                let y = g.instance_norm(v[0], v[1], v[2], 1e-5);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grads_layer_norm() {
        let x = rand_tensor(&[4, 6], 41);
        let g0 = rand_tensor(&[6], 42);
        let b0 = rand_tensor(&[6], 43);
        check_input_grads(
            &[x, g0, b0],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grads_softmaxes() {
        let x = rand_tensor(&[3, 2, 2, 1], 51);
        let w = rand_tensor(&[3, 2, 2, 1], 52);
        check_input_grads(
            &[x.clone(), w.clone()],
            |g, v| {
                let p = g.softmax_channel(v[0]);
                let m = g.mul(p, v[1]);
                g.sum_all(m)
            },
            1e-6,
        );
        check_input_grads(
            &[x, w],
            |g, v| {
                let p = g.log_softmax_channel(v[0]);
                let m = g.mul(p, v[1]);
                g.sum_all(m)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let x = rand_tensor(&[5, 4, 4, 4], 61);
        let p = channel_softmax(&x);
        let n = 64;
        for v in 0..n {
            let s: f64 = (0..5).map(|c| p.data()[c * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_normalizes() {
        use crate::autodiff::Graph;
        let x = rand_tensor(&[3, 4, 4, 4], 62);
        let mut g = Graph::<f64>::new(false);
        let xv = g.constant(x);
        let ones = g.constant(crate::tensor::Tensor::full(&[3], 1.0));
        let zeros = g.constant(crate::tensor::Tensor::zeros(&[3]));
        let y = g.instance_norm(xv, ones, zeros, 1e-9);
        let yd = g.value(y).data().to_vec();
        let n = 64;
        for ch in 0..3 {
            let xs = &yd[ch * n..(ch + 1) * n];
            let mean: f64 = xs.iter().sum::<f64>() / n as f64;
            let var: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
