//! Difference-guided gated fusion, applied after each stage.
//!
//! Stage outputs are reshaped to maps, reduced to `C' = max(1, C / reduction)`
//! channels, and the gate network sees `[R_x; R_y; |R_x - R_y|]` (in that
//! order). The gate weights the optical stream:
//! `F = G ⊙ X + (1 - G) ⊙ Y`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Modality, TokenGrid};
use crate::error::{config_err, shape_err, Result};
use crate::graph::Graph;
use crate::nn::{lecun_std, Conv1x1, GroupNorm};
use crate::params::{Init, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgfmConfig {
    pub enabled: bool,
    pub reduction: usize,
    pub groups: usize,
}

impl Default for DgfmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            reduction: 4,
            groups: 8,
        }
    }
}

impl DgfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction < 2 {
            return Err(config_err!("dgfm.reduction must be >= 2, got {}", self.reduction));
        }
        if self.groups == 0 {
            return Err(config_err!("dgfm.groups must be positive"));
        }
        Ok(())
    }

    /// Reduced width `C'` for a stage of width `c`.
    pub fn reduced_channels(&self, c: usize) -> usize {
        (c / self.reduction).max(1)
    }

    /// Group count for the gate's normalization: `min(groups, C')`, falling
    /// back to 1 when that does not divide `C'`.
    pub fn norm_groups(&self, reduced: usize) -> usize {
        let g = self.groups.min(reduced);
        if reduced % g == 0 {
            g
        } else {
            1
        }
    }

    pub fn params_per_stage(&self, c: usize) -> usize {
        let r = self.reduced_channels(c);
        2 * (c * r + r) + (3 * r * r + r) + 2 * r + (r * c + c)
    }
}

#[derive(Clone, Debug)]
pub struct DgfmWeights {
    pub channels: usize,
    pub reduced: usize,
    pub reduce_x: Conv1x1,
    pub reduce_y: Conv1x1,
    pub gate_in: Conv1x1,
    pub gate_norm: GroupNorm,
    pub gate_out: Conv1x1,
}

impl DgfmWeights {
    /// The final gate layer starts at zero, so an untrained gate is 0.5
    /// everywhere (plain averaging).
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &DgfmConfig) -> Self {
        let r = cfg.reduced_channels(channels);
        let grp = ParamGroup::Dgfm;
        Self {
            channels,
            reduced: r,
            reduce_x: Conv1x1::new(store, &format!("{prefix}.reduce_x"), channels, r, grp, Init::Normal(lecun_std(channels))),
            reduce_y: Conv1x1::new(store, &format!("{prefix}.reduce_y"), channels, r, grp, Init::Normal(lecun_std(channels))),
            gate_in: Conv1x1::new(store, &format!("{prefix}.gate.conv1"), 3 * r, r, grp, Init::Normal(lecun_std(3 * r))),
            gate_norm: GroupNorm::new(store, &format!("{prefix}.gate.norm"), r, cfg.norm_groups(r), grp),
            gate_out: Conv1x1::new(store, &format!("{prefix}.gate.conv2"), r, channels, grp, Init::Zeros),
        }
    }
}

/// Fusion output for one stage. Maps are `[B, C, H, W]`; `fused` is in token
/// form `[B, H·W, C]`.
#[derive(Clone, Copy, Debug)]
pub struct StageBundle {
    pub x_feat: Var,
    pub y_feat: Var,
    pub fused: Var,
    /// `None` when fusion is a plain average (gated fusion disabled).
    pub gate: Option<Var>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// `[B, H, W, C]` tokens → `[B, C, H, W]` map.
pub fn tokens_to_map(t: &mut Tape, tokens: &TokenGrid) -> Var {
    t.permute(tokens.var, &[0, 3, 1, 2])
}

/// `[B, C, H, W]` map → `[B, H·W, C]` tokens.
pub fn map_to_tokens(t: &mut Tape, map: Var) -> Var {
    let s = t.shape(map).to_vec();
    let p = t.permute(map, &[0, 2, 3, 1]);
    t.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

pub fn reduce_channels(g: &mut Graph, feat: Var, which: Modality, w: &DgfmWeights) -> Result<Var> {
    let s = g.tape.shape(feat);
    if s.len() != 4 || s[1] != w.channels {
        return Err(shape_err!(
            "reduce_channels expects [B, {}, H, W], got {s:?}",
            w.channels
        ));
    }
    let layer = match which {
        Modality::Rgb => &w.reduce_x,
        Modality::Aux => &w.reduce_y,
    };
    Ok(layer.forward(g, feat))
}

/// `|R_x - R_y|`
pub fn discrepancy(t: &mut Tape, rx: Var, ry: Var) -> Result<Var> {
    if t.shape(rx) != t.shape(ry) {
        return Err(shape_err!(
            "discrepancy inputs differ: {:?} vs {:?}",
            t.shape(rx),
            t.shape(ry)
        ));
    }
    let d = t.sub(rx, ry);
    Ok(t.abs(d))
}

/// `σ(conv2(GELU(GN(conv1([R_x; R_y; D])))))`, restored to `C` channels.
pub fn gate(g: &mut Graph, rx: Var, ry: Var, d: Var, w: &DgfmWeights) -> Var {
    let cat = g.tape.concat(&[rx, ry, d], 1);
    let h = w.gate_in.forward(g, cat);
    let h = w.gate_norm.forward(g, h);
    let h = g.tape.gelu(h);
    let logits = w.gate_out.forward(g, h);
    g.tape.sigmoid(logits)
}

/// `G ⊙ X + (1 - G) ⊙ Y`
pub fn convex_fuse(t: &mut Tape, gate: Var, x: Var, y: Var) -> Var {
    let gx = t.mul(gate, x);
    let inv = t.one_minus(gate);
    let gy = t.mul(inv, y);
    t.add(gx, gy)
}

pub fn fuse_stage(g: &mut Graph, x: &TokenGrid, y: &TokenGrid, w: &DgfmWeights) -> Result<StageBundle> {
    if x.dims() != y.dims() {
        return Err(shape_err!("fusion inputs differ: {:?} vs {:?}", x.dims(), y.dims()));
    }
    let xm = tokens_to_map(&mut g.tape, x);
    let ym = tokens_to_map(&mut g.tape, y);
    let rx = reduce_channels(g, xm, Modality::Rgb, w)?;
    let ry = reduce_channels(g, ym, Modality::Aux, w)?;
    let d = discrepancy(&mut g.tape, rx, ry)?;
    let gm = gate(g, rx, ry, d, w);
    let fused = convex_fuse(&mut g.tape, gm, xm, ym);
    Ok(StageBundle {
        x_feat: xm,
        y_feat: ym,
        fused: map_to_tokens(&mut g.tape, fused),
        gate: Some(gm),
        height: x.height,
        width: x.width,
        channels: x.channels,
    })
}

/// Fusion used when the gated module is disabled: the elementwise mean.
pub fn average_stage(t: &mut Tape, x: &TokenGrid, y: &TokenGrid) -> Result<StageBundle> {
    if x.dims() != y.dims() {
        return Err(shape_err!("fusion inputs differ: {:?} vs {:?}", x.dims(), y.dims()));
    }
    let xm = tokens_to_map(t, x);
    let ym = tokens_to_map(t, y);
    let s = t.add(xm, ym);
    let avg = t.scale(s, 0.5);
    Ok(StageBundle {
        x_feat: xm,
        y_feat: ym,
        fused: map_to_tokens(t, avg),
        gate: None,
        height: x.height,
        width: x.width,
        channels: x.channels,
    })
}
