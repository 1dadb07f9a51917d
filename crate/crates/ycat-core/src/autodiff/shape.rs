//! Layout ops: reshape, concat, column slicing, token/volume reordering,
//! nearest-neighbor upsampling.

use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

impl<E: Elem> Graph<E> {
    /// View with a new shape; shares the underlying buffer.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.value_rc(a);
        assert_eq!(
            ta.numel(),
            shape.iter().product::<usize>(),
            "reshape changes element count"
        );
        let out = Tensor::from_vec(shape, ta.data().to_vec());
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            let old = ta.shape().to_vec();
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                buf.add(ia, gout.clone().reshaped(&old));
            }) as super::BackwardFn<E>
        });
        self.push(out, na, bw)
    }

    /// Concatenate along axis 0 (the channel axis for `[C, D, H, W]` maps).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<Rc<Tensor<E>>> = parts.iter().map(|&v| self.value_rc(v)).collect();
        let inner: usize = tensors[0].shape()[1..].iter().product();
        for t in &tensors {
            assert_eq!(
                t.shape()[1..].iter().product::<usize>(),
                inner,
                "concat_channels: trailing dims differ"
            );
        }
        let c_total: usize = tensors.iter().map(|t| t.shape()[0]).sum();
        let mut shape = tensors[0].shape().to_vec();
        shape[0] = c_total;
        let mut data = Vec::with_capacity(c_total * inner);
        for t in &tensors {
            data.extend_from_slice(t.data());
        }
        let needs: Vec<bool> = parts.iter().map(|&v| self.needs_grad(v)).collect();
        let any = needs.iter().any(|&b| b);
        let bw = any.then(|| {
            let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
            let chans: Vec<usize> = tensors.iter().map(|t| t.shape()[0]).collect();
            let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let mut off = 0usize;
                for (i, &c) in chans.iter().enumerate() {
                    let len = c * inner;
                    if needs[i] {
                        let g = Tensor::from_vec(&shapes[i], gout.data()[off..off + len].to_vec());
                        buf.add(ids[i], g);
                    }
                    off += len;
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&shape, data), any, bw)
    }

    /// `[N, M]` -> `[N, len]`, copying columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value_rc(a);
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        assert!(start + len <= m);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&ta.data()[r * m + start..r * m + start + len]);
        }
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let slot = buf.slot_mut(ia, &[n, m]);
                let gd = gout.data();
                let sd = slot.data_mut();
                for r in 0..n {
                    for c in 0..len {
                        sd[r * m + start + c] += gd[r * len + c];
                    }
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[n, len], data), na, bw)
    }

    /// `[C, D, H, W]` -> `[N, P^3*C]` patch tokens. Token order is raster
    /// (z, y, x) over the patch grid; feature order is (c, pz, py, px).
    pub fn patches_to_tokens(&mut self, a: Var, p: usize) -> Var {
        let ta = self.value_rc(a);
        let [c, d, h, w] = dims4(ta.shape());
        assert!(
            d % p == 0 && h % p == 0 && w % p == 0,
            "spatial dims {:?} not divisible by patch size {}",
            &ta.shape()[1..],
            p
        );
        let (gd, gh, gw) = (d / p, h / p, w / p);
        let n = gd * gh * gw;
        let feat = p * p * p * c;
        let mut data = vec![E::ZERO; n * feat];
        let src = ta.data();
        for gz in 0..gd {
            for gy in 0..gh {
                for gx in 0..gw {
                    let t = (gz * gh + gy) * gw + gx;
                    let base = t * feat;
                    for ci in 0..c {
                        for pz in 0..p {
                            for py in 0..p {
                                let srow = ((ci * d + gz * p + pz) * h + gy * p + py) * w + gx * p;
                                let drow = base + ((ci * p + pz) * p + py) * p;
                                data[drow..drow + p].copy_from_slice(&src[srow..srow + p]);
                            }
                        }
                    }
                }
            }
        }
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let slot = buf.slot_mut(ia, &[c, d, h, w]);
                let sd = slot.data_mut();
                let gd_ = gout.data();
                for gz in 0..gd {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let t = (gz * gh + gy) * gw + gx;
                            let base = t * feat;
                            for ci in 0..c {
                                for pz in 0..p {
                                    for py in 0..p {
                                        let srow = ((ci * d + gz * p + pz) * h + gy * p + py) * w
                                            + gx * p;
                                        let drow = base + ((ci * p + pz) * p + py) * p;
                                        for px in 0..p {
                                            sd[srow + px] += gd_[drow + px];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[n, feat], data), na, bw)
    }

    /// `[N, C]` tokens -> `[C, gd, gh, gw]` volume, N = gd*gh*gw raster order.
    pub fn tokens_to_volume(&mut self, a: Var, grid: [usize; 3]) -> Var {
        let ta = self.value_rc(a);
        let (n, c) = (ta.shape()[0], ta.shape()[1]);
        let [gd, gh, gw] = grid;
        assert_eq!(n, gd * gh * gw, "token count does not match grid");
        let mut data = vec![E::ZERO; c * n];
        let src = ta.data();
        for t in 0..n {
            for ci in 0..c {
                data[ci * n + t] = src[t * c + ci];
            }
        }
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let slot = buf.slot_mut(ia, &[n, c]);
                let sd = slot.data_mut();
                let g = gout.data();
                for t in 0..n {
                    for ci in 0..c {
                        sd[t * c + ci] += g[ci * n + t];
                    }
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[c, gd, gh, gw], data), na, bw)
    }

    /// Nearest-neighbor spatial upsampling by integer factor.
    pub fn upsample_nearest(&mut self, a: Var, f: usize) -> Var {
        let ta = self.value_rc(a);
        let [c, d, h, w] = dims4(ta.shape());
        let (od, oh, ow) = (d * f, h * f, w * f);
        let mut data = vec![E::ZERO; c * od * oh * ow];
        let src = ta.data();
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((ci * d + z / f) * h + y / f) * w;
                    let drow = ((ci * od + z) * oh + y) * ow;
                    for x in 0..ow {
                        data[drow + x] = src[srow + x / f];
                    }
                }
            }
        }
        let na = self.needs_grad(a);
        let bw = na.then(|| {
            let ia = a.0;
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let slot = buf.slot_mut(ia, &[c, d, h, w]);
                let sd = slot.data_mut();
                let g = gout.data();
                for ci in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            let srow = ((ci * d + z / f) * h + y / f) * w;
                            let drow = ((ci * od + z) * oh + y) * ow;
                            for x in 0..ow {
                                sd[srow + x / f] += g[drow + x];
                            }
                        }
                    }
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[c, od, oh, ow], data), na, bw)
    }
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected rank-4 tensor, got {:?}", shape);
    [shape[0], shape[1], shape[2], shape[3]]
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_input_grads, rand_tensor};

    #[test]
    fn grads_layout_ops() {
        let a = rand_tensor(&[2, 4, 4, 4], 11);
        let b = rand_tensor(&[3, 4, 4, 4], 12);
        check_input_grads(
            &[a, b],
            |g, v| {
                let cat = g.concat_channels(&[v[0], v[1]]);
                let up = g.upsample_nearest(cat, 2);
                let sq = g.mul(up, up);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn grads_token_roundtrip() {
        let a = rand_tensor(&[2, 4, 4, 4], 13);
        check_input_grads(
            &[a],
            |g, v| {
                let tok = g.patches_to_tokens(v[0], 2);
                let sl = g.slice_cols(tok, 3, 7);
                let vol = g.tokens_to_volume(sl, [2, 2, 2]);
                let sq = g.mul(vol, vol);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn tokens_to_volume_layout() {
        use crate::autodiff::Graph;
        use crate::tensor::Tensor;
        // token t holds value t*10 + channel
        let mut g = Graph::<f64>::new(false);
        let data: Vec<f64> = (0..8)
            .flat_map(|t| (0..3).map(move |c| (t * 10 + c) as f64))
            .collect();
        let tok = g.constant(Tensor::from_vec(&[8, 3], data));
        let vol = g.tokens_to_volume(tok, [2, 2, 2]);
        let v = g.value(vol);
        assert_eq!(v.shape(), &[3, 2, 2, 2]);
        // channel 1, voxel (z=1,y=0,x=1) -> token 5 -> 51
        assert_eq!(v.data()[1 * 8 + 5], 51.0);
    }
}
