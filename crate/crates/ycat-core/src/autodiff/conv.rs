//! 3D convolution ops: direct conv (im2col + GEMM, slab-chunked so the
//! column buffer stays small), 1x1x1 fast path, and k=2/s=2 transposed conv.

use super::shape::dims4;
use super::{Graph, Var};
use crate::tensor::{Elem, Tensor};

/// Target output voxels per im2col slab.
const SLAB_VOXELS: usize = 8192;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn out_dim(i: usize, k: usize, s: usize, p: usize) -> usize {
        (i + 2 * p - k) / s + 1
    }

    fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        let [cin, d, h, w] = dims4(x_shape);
        assert_eq!(w_shape.len(), 5, "conv weight must be rank 5");
        let (cout, wcin, k) = (w_shape[0], w_shape[1], w_shape[2]);
        assert_eq!(w_shape[3], k);
        assert_eq!(w_shape[4], k);
        assert_eq!(cin, wcin, "conv: channel mismatch");
        assert!(d + 2 * pad >= k && h + 2 * pad >= k && w + 2 * pad >= k);
        ConvGeom {
            cin,
            d,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            od: Self::out_dim(d, k, stride, pad),
            oh: Self::out_dim(h, k, stride, pad),
            ow: Self::out_dim(w, k, stride, pad),
        }
    }

    fn kvol(&self) -> usize {
        self.k * self.k * self.k
    }

    fn out_voxels(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn slab_rows(&self) -> usize {
        (SLAB_VOXELS / (self.oh * self.ow)).max(1)
    }
}

/// Fill `col` (layout `[cin*k^3, nv]`, nv = slab voxels) for output slices
/// `zo0..zo1`. Out-of-bounds taps are zero.
fn im2col_slab<E: Elem>(x: &[E], g: &ConvGeom, zo0: usize, zo1: usize, col: &mut [E]) {
    let nv = (zo1 - zo0) * g.oh * g.ow;
    let plane = g.h * g.w;
    for ic in 0..g.cin {
        let xc = &x[ic * g.d * plane..(ic + 1) * g.d * plane];
        for kz in 0..g.k {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = ((ic * g.k + kz) * g.k + ky) * g.k + kx;
                    let row = &mut col[r * nv..(r + 1) * nv];
                    let mut idx = 0usize;
                    for zo in zo0..zo1 {
                        let zi = (zo * g.stride + kz) as isize - g.pad as isize;
                        if zi < 0 || zi >= g.d as isize {
                            row[idx..idx + g.oh * g.ow].iter_mut().for_each(|v| *v = E::ZERO);
                            idx += g.oh * g.ow;
                            continue;
                        }
                        let zbase = zi as usize * plane;
                        for yo in 0..g.oh {
                            let yi = (yo * g.stride + ky) as isize - g.pad as isize;
                            if yi < 0 || yi >= g.h as isize {
                                row[idx..idx + g.ow].iter_mut().for_each(|v| *v = E::ZERO);
                                idx += g.ow;
                                continue;
                            }
                            let ybase = zbase + yi as usize * g.w;
                            if g.stride == 1 {
                                let xi0 = kx as isize - g.pad as isize;
                                // zero left border
                                let lo = (-xi0).max(0) as usize;
                                let hi =
                                    ((g.w as isize - xi0).min(g.ow as isize)).max(0) as usize;
                                for v in &mut row[idx..idx + lo.min(g.ow)] {
                                    *v = E::ZERO;
                                }
                                if hi > lo {
                                    let src0 = (ybase as isize + xi0 + lo as isize) as usize;
                                    row[idx + lo..idx + hi]
                                        .copy_from_slice(&xc[src0..src0 + (hi - lo)]);
                                }
                                for v in &mut row[idx + hi.max(lo)..idx + g.ow] {
                                    *v = E::ZERO;
                                }
                            } else {
                                for xo in 0..g.ow {
                                    let xi = (xo * g.stride + kx) as isize - g.pad as isize;
                                    row[idx + xo] = if xi < 0 || xi >= g.w as isize {
                                        E::ZERO
                                    } else {
                                        xc[ybase + xi as usize]
                                    };
                                }
                            }
                            idx += g.ow;
                        }
                    }
                    debug_assert_eq!(idx, nv);
                }
            }
        }
    }
}

/// Scatter-add the column gradient back into `dx` (reverse of im2col).
fn col2im_slab<E: Elem>(dcol: &[E], g: &ConvGeom, zo0: usize, zo1: usize, dx: &mut [E]) {
    let nv = (zo1 - zo0) * g.oh * g.ow;
    let plane = g.h * g.w;
    for ic in 0..g.cin {
        for kz in 0..g.k {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = ((ic * g.k + kz) * g.k + ky) * g.k + kx;
                    let row = &dcol[r * nv..(r + 1) * nv];
                    let mut idx = 0usize;
                    for zo in zo0..zo1 {
                        let zi = (zo * g.stride + kz) as isize - g.pad as isize;
                        if zi < 0 || zi >= g.d as isize {
                            idx += g.oh * g.ow;
                            continue;
                        }
                        let zbase = (ic * g.d + zi as usize) * plane;
                        for yo in 0..g.oh {
                            let yi = (yo * g.stride + ky) as isize - g.pad as isize;
                            if yi < 0 || yi >= g.h as isize {
                                idx += g.ow;
                                continue;
                            }
                            let ybase = zbase + yi as usize * g.w;
                            for xo in 0..g.ow {
                                let xi = (xo * g.stride + kx) as isize - g.pad as isize;
                                if xi >= 0 && xi < g.w as isize {
                                    dx[(ybase as isize + xi) as usize] += row[idx + xo];
                                }
                            }
                            idx += g.ow;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<E: Elem>(x: &[E], w: &[E], b: &[E], g: &ConvGeom) -> Vec<E> {
    let nvox = g.out_voxels();
    let kdim = g.cin * g.kvol();
    let mut out = vec![E::ZERO; g.cout * nvox];
    if g.k == 1 && g.stride == 1 {
        // y = W[cout, cin] @ X[cin, nvox]
        E::gemm(g.cout, g.cin, nvox, E::ONE, w, x, E::ZERO, &mut out);
    } else {
        let rows = g.slab_rows();
        let mut col = vec![E::ZERO; kdim * rows * g.oh * g.ow];
        let mut zo0 = 0;
        while zo0 < g.od {
            let zo1 = (zo0 + rows).min(g.od);
            let nv = (zo1 - zo0) * g.oh * g.ow;
            im2col_slab(x, g, zo0, zo1, &mut col);
            // write straight into the output slab (channel stride nvox)
            E::gemm_strided(
                g.cout,
                kdim,
                nv,
                E::ONE,
                w,
                kdim as isize,
                1,
                &col,
                nv as isize,
                1,
                E::ZERO,
                &mut out[zo0 * g.oh * g.ow..],
                nvox as isize,
                1,
            );
            zo0 = zo1;
        }
    }
    for oc in 0..g.cout {
        let bias = b[oc];
        for v in &mut out[oc * nvox..(oc + 1) * nvox] {
            *v += bias;
        }
    }
    out
}

impl<E: Elem> Graph<E> {
    /// 3D convolution, cubic kernel, symmetric stride/padding.
    /// `x [Cin,D,H,W]`, `w [Cout,Cin,k,k,k]`, `b [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw, tb) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let g = ConvGeom::new(tx.shape(), tw.shape(), stride, pad);
        assert_eq!(tb.shape(), &[g.cout], "conv bias shape");
        let out = conv_forward(tx.data(), tw.data(), tb.data(), &g);
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        let any = nx || nw || nb;
        let bw = any.then(|| {
            let (ix, iw, ib) = (x.0, w.0, b.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                conv_backward(gout, &tx, &tw, &g, nx, nw, nb, ix, iw, ib, buf);
            }) as super::BackwardFn<E>
        });
        self.push(
            Tensor::from_vec(&[g.cout, g.od, g.oh, g.ow], out),
            any,
            bw,
        )
    }

    /// Transposed conv, kernel 2, stride 2 (exact x2 upsampling).
    /// `x [Cin,d,h,w]`, `w [Cin,Cout,2,2,2]`, `b [Cout]` -> `[Cout,2d,2h,2w]`.
    pub fn conv_transpose3d_x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let [cin, d, h, wd] = dims4(tx.shape());
        assert_eq!(tw.shape()[0], cin, "tconv: channel mismatch");
        let cout = tw.shape()[1];
        assert_eq!(&tw.shape()[2..], &[2, 2, 2]);
        assert_eq!(tb.shape(), &[cout]);
        let nin = d * h * wd;
        let c8 = cout * 8;
        // G[cout*8, nin] = W'^T[cout*8, cin] @ X[cin, nin]
        let mut gbuf = vec![E::ZERO; c8 * nin];
        E::gemm_strided(
            c8,
            cin,
            nin,
            E::ONE,
            tw.data(),
            1,
            c8 as isize,
            tx.data(),
            nin as isize,
            1,
            E::ZERO,
            &mut gbuf,
            nin as isize,
            1,
        );
        let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
        let mut out = vec![E::ZERO; cout * od * oh * ow];
        for oc in 0..cout {
            let bias = tb.data()[oc];
            for (abc, item) in gbuf[oc * 8 * nin..(oc + 1) * 8 * nin]
                .chunks_exact(nin)
                .enumerate()
            {
                let (a, b2, c2) = (abc / 4, (abc / 2) % 2, abc % 2);
                for z in 0..d {
                    for y in 0..h {
                        let src = &item[(z * h + y) * wd..(z * h + y + 1) * wd];
                        let dst0 = ((oc * od + 2 * z + a) * oh + 2 * y + b2) * ow + c2;
                        for (xx, &v) in src.iter().enumerate() {
                            out[dst0 + 2 * xx] = v + bias;
                        }
                    }
                }
            }
        }
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        let any = nx || nw || nb;
        let bw = any.then(|| {
            let (ix, iw, ib) = (x.0, w.0, b.0);
            Box::new(move |gout: &Tensor<E>, buf: &mut super::GradBuf<E>| {
                let gd = gout.data();
                // gather dG
                let mut dg = vec![E::ZERO; c8 * nin];
                for oc in 0..cout {
                    for abc in 0..8 {
                        let (a, b2, c2) = (abc / 4, (abc / 2) % 2, abc % 2);
                        let row = &mut dg[(oc * 8 + abc) * nin..(oc * 8 + abc + 1) * nin];
                        for z in 0..d {
                            for y in 0..h {
                                let src0 = ((oc * od + 2 * z + a) * oh + 2 * y + b2) * ow + c2;
                                let dst = &mut row[(z * h + y) * wd..(z * h + y + 1) * wd];
                                for (xx, v) in dst.iter_mut().enumerate() {
                                    *v = gd[src0 + 2 * xx];
                                }
                            }
                        }
                    }
                }
                if nb {
                    let slot = buf.slot_mut(ib, &[cout]);
                    let sd = slot.data_mut();
                    for oc in 0..cout {
                        let mut acc = E::ZERO;
                        for &v in &gd[oc * od * oh * ow..(oc + 1) * od * oh * ow] {
                            acc += v;
                        }
                        sd[oc] += acc;
                    }
                }
                if nx {
                    // dX[cin, nin] = W'[cin, cout*8] @ dG
                    let mut dx = vec![E::ZERO; cin * nin];
                    E::gemm(cin, c8, nin, E::ONE, tw.data(), &dg, E::ZERO, &mut dx);
                    buf.add(ix, Tensor::from_vec(&[cin, d, h, wd], dx));
                }
                if nw {
                    // dW'^T[cout*8, cin] += dG @ X^T -> write transposed into dW'
                    let slot = buf.slot_mut(iw, &[cin, cout, 2, 2, 2]);
                    E::gemm_strided(
                        c8,
                        nin,
                        cin,
                        E::ONE,
                        &dg,
                        nin as isize,
                        1,
                        tx.data(),
                        1,
                        nin as isize,
                        E::ONE,
                        slot.data_mut(),
                        1,
                        c8 as isize,
                    );
                }
            }) as super::BackwardFn<E>
        });
        self.push(Tensor::from_vec(&[cout, od, oh, ow], out), any, bw)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<E: Elem>(
    gout: &Tensor<E>,
    tx: &Tensor<E>,
    tw: &Tensor<E>,
    g: &ConvGeom,
    nx: bool,
    nw: bool,
    nb: bool,
    ix: usize,
    iw: usize,
    ib: usize,
    buf: &mut super::GradBuf<E>,
) {
    let nvox = g.out_voxels();
    let kdim = g.cin * g.kvol();
    let gd = gout.data();
    if nb {
        let slot = buf.slot_mut(ib, &[g.cout]);
        let sd = slot.data_mut();
        for oc in 0..g.cout {
            let mut acc = E::ZERO;
            for &v in &gd[oc * nvox..(oc + 1) * nvox] {
                acc += v;
            }
            sd[oc] += acc;
        }
    }
    if g.k == 1 && g.stride == 1 {
        if nw {
            let slot = buf.slot_mut(iw, tw.shape());
            // dW[cout, cin] += dY @ X^T
            E::gemm_strided(
                g.cout,
                nvox,
                g.cin,
                E::ONE,
                gd,
                nvox as isize,
                1,
                tx.data(),
                1,
                nvox as isize,
                E::ONE,
                slot.data_mut(),
                g.cin as isize,
                1,
            );
        }
        if nx {
            // dX = W^T @ dY
            let mut dx = vec![E::ZERO; g.cin * nvox];
            E::gemm_strided(
                g.cin,
                g.cout,
                nvox,
                E::ONE,
                tw.data(),
                1,
                g.cin as isize,
                gd,
                nvox as isize,
                1,
                E::ZERO,
                &mut dx,
                nvox as isize,
                1,
            );
            buf.add(ix, Tensor::from_vec(tx.shape(), dx));
        }
        return;
    }
    let rows = g.slab_rows();
    let mut col = vec![E::ZERO; kdim * rows * g.oh * g.ow];
    let mut dcol = if nx {
        vec![E::ZERO; kdim * rows * g.oh * g.ow]
    } else {
        Vec::new()
    };
    let mut dx = nx.then(|| vec![E::ZERO; g.cin * g.d * g.h * g.w]);
    let mut zo0 = 0;
    while zo0 < g.od {
        let zo1 = (zo0 + rows).min(g.od);
        let nv = (zo1 - zo0) * g.oh * g.ow;
        if nw {
            im2col_slab(tx.data(), g, zo0, zo1, &mut col);
            let slot = buf.slot_mut(iw, tw.shape());
            // dW[cout, kdim] += dY_slab @ col^T
            E::gemm_strided(
                g.cout,
                nv,
                kdim,
                E::ONE,
                &gd[zo0 * g.oh * g.ow..],
                nvox as isize,
                1,
                &col,
                1,
                nv as isize,
                E::ONE,
                slot.data_mut(),
                kdim as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T @ dY_slab, then scatter
            E::gemm_strided(
                kdim,
                g.cout,
                nv,
                E::ONE,
                tw.data(),
                1,
                kdim as isize,
                &gd[zo0 * g.oh * g.ow..],
                nvox as isize,
                1,
                E::ZERO,
                &mut dcol,
                nv as isize,
                1,
            );
            col2im_slab(&dcol[..kdim * nv], g, zo0, zo1, dx);
        }
        zo0 = zo1;
    }
    if let Some(dx) = dx {
        buf.add(ix, Tensor::from_vec(tx.shape(), dx));
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_input_grads, rand_tensor};

    #[test]
    fn grads_conv3d_stride1() {
        let x = rand_tensor(&[2, 4, 4, 4], 71);
        let w = rand_tensor(&[3, 2, 3, 3, 3], 72);
        let b = rand_tensor(&[3], 73);
        check_input_grads(
            &[x, w, b],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 1, 1);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grads_conv3d_stride2() {
        let x = rand_tensor(&[2, 6, 6, 6], 74);
        let w = rand_tensor(&[4, 2, 3, 3, 3], 75);
        let b = rand_tensor(&[4], 76);
        check_input_grads(
            &[x, w, b],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 2, 1);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grads_conv1x1() {
        let x = rand_tensor(&[3, 4, 4, 4], 77);
        let w = rand_tensor(&[2, 3, 1, 1, 1], 78);
        let b = rand_tensor(&[2], 79);
        check_input_grads(
            &[x, w, b],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 1, 0);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grads_conv_transpose() {
        let x = rand_tensor(&[3, 3, 3, 3], 80);
        let w = rand_tensor(&[3, 2, 2, 2, 2], 81);
        let b = rand_tensor(&[2], 82);
        check_input_grads(
            &[x, w, b],
            |g, v| {
                let y = g.conv_transpose3d_x2(v[0], v[1], v[2]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn conv3d_matches_naive() {
        use crate::autodiff::Graph;
        let x = rand_tensor(&[2, 5, 5, 5], 83);
        let w = rand_tensor(&[3, 2, 3, 3, 3], 84);
        let b = rand_tensor(&[3], 85);
        let mut g = Graph::<f64>::new(false);
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv3d(xv, wv, bv, 2, 1);
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[3, 3, 3, 3]);
        // naive reference
        for oc in 0..3 {
            for zo in 0..3 {
                for yo in 0..3 {
                    for xo in 0..3 {
                        let mut acc = b.data()[oc];
                        for ic in 0..2 {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let zi = (zo * 2 + kz) as isize - 1;
                                        let yi = (yo * 2 + ky) as isize - 1;
                                        let xi = (xo * 2 + kx) as isize - 1;
                                        if zi < 0 || yi < 0 || xi < 0 || zi > 4 || yi > 4 || xi > 4
                                        {
                                            continue;
                                        }
                                        let xval = x.data()
                                            [((ic * 5 + zi as usize) * 5 + yi as usize) * 5
                                                + xi as usize];
                                        let wval = w.data()
                                            [(((oc * 2 + ic) * 3 + kz) * 3 + ky) * 3 + kx];
                                        acc += xval * wval;
                                    }
                                }
                            }
                        }
                        let got = yv.data()[((oc * 3 + zo) * 3 + yo) * 3 + xo];
                        assert!((got - acc).abs() < 1e-9, "mismatch {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn tconv_doubles_shape_and_matches_naive() {
        use crate::autodiff::Graph;
        let x = rand_tensor(&[2, 2, 2, 2], 86);
        let w = rand_tensor(&[2, 3, 2, 2, 2], 87);
        let b = rand_tensor(&[3], 88);
        let mut g = Graph::<f64>::new(false);
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv_transpose3d_x2(xv, wv, bv);
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[3, 4, 4, 4]);
        for oc in 0..3 {
            for z in 0..4 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let mut acc = b.data()[oc];
                        let (zi, a) = (z / 2, z % 2);
                        let (yi, b2) = (yy / 2, yy % 2);
                        let (xi, c2) = (xx / 2, xx % 2);
                        for ic in 0..2 {
                            let xval = x.data()[((ic * 2 + zi) * 2 + yi) * 2 + xi];
                            let wval = w.data()[(((ic * 3 + oc) * 2 + a) * 2 + b2) * 2 + c2];
                            acc += xval * wval;
                        }
                        let got = yv.data()[((oc * 4 + z) * 4 + yy) * 4 + xx];
                        assert!((got - acc).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
