//! Fused multi-head scaled-dot-product attention.
//!
//! Works on already-projected `q/k/v` of shape `[N, K]`; heads are strided
//! column slices, so no per-head copies are made. Scores are processed in
//! fixed-size query-row chunks and recomputed during backward (only the
//! per-row max and normalizer are kept), which caps memory at
//! `O(chunk * N_k)` instead of `O(N_q * N_k)`.

use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

const QUERY_CHUNK: usize = 256;

impl<E: Elem> Graph<E> {
    /// Scaled dot-product attention. `q [Nq,K]`, `k/v [Nk,K]`; `K % heads == 0`.
    /// Scale is `1/sqrt(K/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (tq, tk, tv) = (self.value_rc(q), self.value_rc(k), self.value_rc(v));
        let (nq, kd) = (tq.shape()[0], tq.shape()[1]);
        let (nk, kd2) = (tk.shape()[0], tk.shape()[1]);
        assert_eq!(kd, kd2, "attention: q/k dim mismatch");
        assert_eq!(tv.shape(), &[nk, kd], "attention: v shape mismatch");
        assert!(kd % heads == 0, "attention: K not divisible by heads");
        let d = kd / heads;
        let scale = E::from_f64(1.0 / (d as f64).sqrt());

        let mut out = vec![E::ZERO; nq * kd];
        // per head, per query row: softmax max and normalizer
        let mut rowmax = vec![E::ZERO; heads * nq];
        let mut rowsum = vec![E::ZERO; heads * nq];
        let mut scores = vec![E::ZERO; QUERY_CHUNK.min(nq) * nk];

        for h in 0..heads {
            let qoff = h * d;
            let mut r0 = 0;
            while r0 < nq {
                let r1 = (r0 + QUERY_CHUNK).min(nq);
                let bq = r1 - r0;
                let s = &mut scores[..bq * nk];
                // S = scale * Q_chunk @ K_h^T
                E::gemm_strided(
                    bq,
                    d,
                    nk,
                    scale,
                    &tq.data()[r0 * kd + qoff..],
                    kd as isize,
                    1,
                    &tk.data()[qoff..],
                    1,
                    kd as isize,
                    E::ZERO,
                    s,
                    nk as isize,
                    1,
                );
                softmax_rows(s, bq, nk, &mut rowmax[h * nq + r0..], &mut rowsum[h * nq + r0..]);
                // O_chunk = P @ V_h
                E::gemm_strided(
                    bq,
                    nk,
                    d,
                    E::ONE,
                    s,
                    nk as isize,
                    1,
                    &tv.data()[qoff..],
                    kd as isize,
                    1,
                    E::ZERO,
                    &mut out[r0 * kd + qoff..],
                    kd as isize,
                    1,
                );
                r0 = r1;
            }
        }

        let (ngq, ngk, ngv) = (self.needs_grad(q), self.needs_grad(k), self.needs_grad(v));
        let any = ngq || ngk || ngv;
        let bw = any.then(|| {
            let (iq, ik, iv) = (q.0, k.0, v.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let god = gout.data();
                let mut p = vec![E::ZERO; QUERY_CHUNK.min(nq) * nk];
                let mut dp = vec![E::ZERO; QUERY_CHUNK.min(nq) * nk];
                let mut dq = ngq.then(|| vec![E::ZERO; nq * kd]);
                let mut dk = ngk.then(|| vec![E::ZERO; nk * kd]);
                let mut dv = ngv.then(|| vec![E::ZERO; nk * kd]);
                for h in 0..heads {
                    let qoff = h * d;
                    let mut r0 = 0;
                    while r0 < nq {
                        let r1 = (r0 + QUERY_CHUNK).min(nq);
                        let bq = r1 - r0;
                        let pc = &mut p[..bq * nk];
                        // recompute P from saved max/normalizer
                        E::gemm_strided(
                            bq,
                            d,
                            nk,
                            scale,
                            &tq.data()[r0 * kd + qoff..],
                            kd as isize,
                            1,
                            &tk.data()[qoff..],
                            1,
                            kd as isize,
                            E::ZERO,
                            pc,
                            nk as isize,
                            1,
                        );
                        for r in 0..bq {
                            let m = rowmax[h * nq + r0 + r];
                            let inv = E::ONE / rowsum[h * nq + r0 + r];
                            let row = &mut pc[r * nk..(r + 1) * nk];
                            for x in row.iter_mut() {
                                *x -= m;
                            }
                            E::exp_slice(row);
                            for x in row.iter_mut() {
                                *x *= inv;
                            }
                        }
                        let dpc = &mut dp[..bq * nk];
                        // dP = dO_chunk @ V_h^T
                        E::gemm_strided(
                            bq,
                            d,
                            nk,
                            E::ONE,
                            &god[r0 * kd + qoff..],
                            kd as isize,
                            1,
                            &tv.data()[qoff..],
                            1,
                            kd as isize,
                            E::ZERO,
                            dpc,
                            nk as isize,
                            1,
                        );
                        if let Some(dv) = dv.as_mut() {
                            // dV_h += P^T @ dO_chunk
                            E::gemm_strided(
                                nk,
                                bq,
                                d,
                                E::ONE,
                                pc,
                                1,
                                nk as isize,
                                &god[r0 * kd + qoff..],
                                kd as isize,
                                1,
                                E::ONE,
                                &mut dv[qoff..],
                                kd as isize,
                                1,
                            );
                        }
                        // dS = P * (dP - rowdot(dP, P)), stored into dpc
                        for r in 0..bq {
                            let prow = &pc[r * nk..(r + 1) * nk];
                            let dprow = &mut dpc[r * nk..(r + 1) * nk];
                            let mut dot = E::ZERO;
                            for (a, b) in dprow.iter().zip(prow.iter()) {
                                dot += *a * *b;
                            }
                            for (a, b) in dprow.iter_mut().zip(prow.iter()) {
                                *a = *b * (*a - dot);
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            // dQ_chunk += scale * dS @ K_h
                            E::gemm_strided(
                                bq,
                                nk,
                                d,
                                scale,
                                dpc,
                                nk as isize,
                                1,
                                &tk.data()[qoff..],
                                kd as isize,
                                1,
                                E::ONE,
                                &mut dq[r0 * kd + qoff..],
                                kd as isize,
                                1,
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            // dK_h += scale * dS^T @ Q_chunk
                            E::gemm_strided(
                                nk,
                                bq,
                                d,
                                scale,
                                dpc,
                                1,
                                nk as isize,
                                &tq.data()[r0 * kd + qoff..],
                                kd as isize,
                                1,
                                E::ONE,
                                &mut dk[qoff..],
                                kd as isize,
                                1,
                            );
                        }
                        r0 = r1;
                    }
                }
                if let Some(dq) = dq {
                    buf.add(iq, Tensor::from_vec(&[nq, kd], dq));
                }
                if let Some(dk) = dk {
                    buf.add(ik, Tensor::from_vec(&[nk, kd], dk));
                }
                if let Some(dv) = dv {
                    buf.add(iv, Tensor::from_vec(&[nk, kd], dv));
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[nq, kd], out), any, bw)
    }
}

/// Row-wise softmax in place, recording per-row max and exp-sum.
fn softmax_rows<E: Elem>(s: &mut [E], rows: usize, cols: usize, maxout: &mut [E], sumout: &mut [E]) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &x in row.iter() {
            m = m.max(x);
        }
        for x in row.iter_mut() {
            *x -= m;
        }
        E::exp_slice(row);
        let mut sum = E::ZERO;
        for &x in row.iter() {
            sum += x;
        }
        let inv = E::ONE / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
        maxout[r] = m;
        sumout[r] = sum;
    }
}
