//! Small parameterized layers shared by the model modules.

use crate::autograd::Var;
use crate::graph::Graph;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Standard deviation of the fan-in scaled normal init.
pub fn lecun_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Affine map over the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        init: Init,
    ) -> Self {
        let weight = store.register(&format!("{name}.weight"), &[in_dim, out_dim], group, init);
        let bias = bias.then(|| store.register(&format!("{name}.bias"), &[out_dim], group, Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }
}

/// 1×1 convolution on `[B, C, H, W]` maps; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1x1 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        init: Init,
    ) -> Self {
        let weight = store.register(&format!("{name}.weight"), &[in_dim, out_dim], group, init);
        let bias = Some(store.register(&format!("{name}.bias"), &[out_dim], group, Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv1x1(x, w, b)
    }
}

/// 3×3 same-padding convolution; weight stored `[out, in, 3, 3]`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup) -> Self {
        let weight = store.register(
            &format!("{name}.weight"),
            &[out_dim, in_dim, 3, 3],
            group,
            Init::Normal(lecun_std(in_dim * 9)),
        );
        let bias = store.register(&format!("{name}.bias"), &[out_dim], group, Init::Zeros);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv3x3(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.register(&format!("{name}.weight"), &[dim], group, Init::Ones),
            beta: store.register(&format!("{name}.bias"), &[dim], group, Init::Zeros),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.tape.layer_norm(x, gm, bt, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.register(&format!("{name}.weight"), &[channels], group, Init::Ones),
            beta: store.register(&format!("{name}.bias"), &[channels], group, Init::Zeros),
            groups,
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.tape.group_norm(x, self.groups, gm, bt, self.eps)
    }
}
