//! Shared layer bundles: conv + instance norm + ReLU, residual blocks,
//! and x2 transposed-conv upsampling, all registered against a ParamStore.

use crate::autodiff::{Graph, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Elem;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let pad = (k - 1) / 2;
        let fan_in = cin * k * k * k;
        let w = store.register(
            format!("{name}.weight"),
            group,
            &[cout, cin, k, k, k],
            Init::HeNormal { fan_in },
        );
        let b = store.register(format!("{name}.bias"), group, &[cout], Init::Zeros);
        Conv3d { w, b, stride, pad }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        channels: usize,
        zero_scale: bool,
    ) -> Self {
        let init = if zero_scale { Init::Zeros } else { Init::Ones };
        let gamma = store.register(format!("{name}.scale"), group, &[channels], init);
        let beta = store.register(format!("{name}.shift"), group, &[channels], Init::Zeros);
        InstanceNorm { gamma, beta }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.instance_norm(x, ga, be, NORM_EPS)
    }
}

/// conv3 -> instance norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

impl ConvNormRelu {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        stride: usize,
        zero_scale: bool,
    ) -> Self {
        ConvNormRelu {
            conv: Conv3d::new(store, &format!("{name}.conv"), group, cin, cout, 3, stride),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), group, cout, zero_scale),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let c = self.conv.forward(g, store, x);
        let n = self.norm.forward(g, store, c);
        g.relu(n)
    }
}

/// Identity-plus-branch residual block: two conv-norm-ReLU layers, with a
/// 1x1x1 projection shortcut when shape changes. Zeroing the second norm's
/// scale makes shape-preserving blocks exact identities.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub cnr1: ConvNormRelu,
    pub cnr2: ConvNormRelu,
    pub shortcut: Option<Conv3d>,
}

impl ResBlock {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let cnr1 = ConvNormRelu::new(store, &format!("{name}.a"), group, cin, cout, stride, false);
        let cnr2 = ConvNormRelu::new(store, &format!("{name}.b"), group, cout, cout, 1, zero_init);
        let shortcut = (cin != cout || stride != 1).then(|| {
            Conv3d::new(
                store,
                &format!("{name}.shortcut"),
                group,
                cin,
                cout,
                1,
                stride,
            )
        });
        ResBlock {
            cnr1,
            cnr2,
            shortcut,
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let branch = self.cnr1.forward(g, store, x);
        let branch = self.cnr2.forward(g, store, branch);
        let identity = match &self.shortcut {
            Some(proj) => proj.forward(g, store, x),
            None => x,
        };
        g.add(identity, branch)
    }
}

/// Transposed conv (k=2, s=2) doubling the spatial extent.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            group,
            &[cin, cout, 2, 2, 2],
            Init::HeNormal { fan_in: cin * 8 },
        );
        let b = store.register(format!("{name}.bias"), group, &[cout], Init::Zeros);
        UpConv { w, b }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose3d_x2(x, w, b)
    }
}

/// Linear layer for token streams.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        din: usize,
        dout: usize,
        std: f64,
        zero: bool,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::Normal { std } };
        let w = store.register(format!("{name}.weight"), group, &[din, dout], init);
        let b = store.register(format!("{name}.bias"), group, &[dout], Init::Zeros);
        Linear { w, b }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.scale"), group, &[dim], Init::Ones),
            beta: store.register(format!("{name}.shift"), group, &[dim], Init::Zeros),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.layer_norm(x, ga, be, NORM_EPS)
    }
}
