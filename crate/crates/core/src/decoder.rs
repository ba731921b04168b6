//! Multi-level decoder over the fused stage features, plus the two
//! modality-specific auxiliary heads used only while training with masking.
//!
//! The decoder is a reduced UperNet: 1×1 laterals, a pyramid-pooling block on
//! the deepest stage, top-down additive merging, a 3×3 merge convolution over
//! the concatenated levels, a 1×1 classifier and a corner-aligned bilinear
//! upsample to the input size.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Modality, TokenGrid};
use crate::dgfm::StageBundle;
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mode};
use crate::nn::{lecun_std, Conv1x1, Conv3x3};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::resample::{adaptive_pool_matrix, bilinear_matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub channels: usize,
    pub ppm_bins: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            ppm_bins: vec![1, 2, 4],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(config_err!("decoder.channels must be positive"));
        }
        if self.ppm_bins.contains(&0) {
            return Err(config_err!("decoder.ppm_bins entries must be positive"));
        }
        Ok(())
    }
}

/// Bilinear (corner-aligned) resize of a `[B, C, h, w]` node; a no-op when
/// the size already matches.
pub fn upsample_to(t: &mut Tape, x: Var, h: usize, w: usize) -> Var {
    let s = t.shape(x);
    let (hi, wi) = (s[2], s[3]);
    if (hi, wi) == (h, w) {
        return x;
    }
    t.resize2d(x, &bilinear_matrix(h, hi), &bilinear_matrix(w, wi))
}

fn pool_to(t: &mut Tape, x: Var, bins: usize) -> Var {
    let s = t.shape(x);
    let (h, w) = (s[2], s[3]);
    let (ry, rx): (Array2<f64>, Array2<f64>) = (adaptive_pool_matrix(bins, h), adaptive_pool_matrix(bins, w));
    t.resize2d(x, &ry, &rx)
}

/// `[B, L, C]` stage tokens → `[B, C, H, W]`.
fn bundle_map(t: &mut Tape, b: &StageBundle) -> Var {
    let batch = t.shape(b.fused)[0];
    let r = t.reshape(b.fused, &[batch, b.height, b.width, b.channels]);
    t.permute(r, &[0, 3, 1, 2])
}

#[derive(Clone, Debug)]
pub struct PyramidPooling {
    pub bins: Vec<usize>,
    pub branches: Vec<Conv1x1>,
    pub bottleneck: Conv1x1,
}

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub stage_channels: Vec<usize>,
    pub channels: usize,
    pub num_classes: usize,
    /// One per stage; the deepest entry is `None` when pyramid pooling
    /// replaces its projection.
    pub laterals: Vec<Option<Conv1x1>>,
    pub ppm: Option<PyramidPooling>,
    /// Present only with more than one stage.
    pub merge: Option<Conv3x3>,
    pub classifier: Conv1x1,
}

impl DecoderWeights {
    pub fn new(store: &mut ParamStore, stage_channels: &[usize], num_classes: usize, cfg: &DecoderConfig) -> Self {
        let grp = ParamGroup::Decoder;
        let cd = cfg.channels;
        let s = stage_channels.len();
        let deepest = stage_channels[s - 1];
        let ppm = (!cfg.ppm_bins.is_empty()).then(|| PyramidPooling {
            bins: cfg.ppm_bins.clone(),
            branches: cfg
                .ppm_bins
                .iter()
                .map(|b| Conv1x1::new(store, &format!("decoder.ppm.bin{b}"), deepest, cd, grp, Init::Normal(lecun_std(deepest))))
                .collect(),
            bottleneck: {
                let inp = deepest + cfg.ppm_bins.len() * cd;
                Conv1x1::new(store, "decoder.ppm.bottleneck", inp, cd, grp, Init::Normal(lecun_std(inp)))
            },
        });
        let laterals = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                (i + 1 < s || ppm.is_none()).then(|| {
                    Conv1x1::new(store, &format!("decoder.lateral{i}"), c, cd, grp, Init::Normal(lecun_std(c)))
                })
            })
            .collect();
        let merge = (s > 1).then(|| Conv3x3::new(store, "decoder.merge", s * cd, cd, grp));
        let classifier = Conv1x1::new(store, "decoder.classifier", cd, num_classes, grp, Init::Normal(lecun_std(cd)));
        Self {
            stage_channels: stage_channels.to_vec(),
            channels: cd,
            num_classes,
            laterals,
            ppm,
            merge,
            classifier,
        }
    }

    pub fn param_count(stage_channels: &[usize], num_classes: usize, cfg: &DecoderConfig) -> usize {
        let cd = cfg.channels;
        let s = stage_channels.len();
        let deepest = stage_channels[s - 1];
        let conv = |i: usize, o: usize| i * o + o;
        let mut n = 0;
        let ppm = !cfg.ppm_bins.is_empty();
        for (i, &c) in stage_channels.iter().enumerate() {
            if i + 1 < s || !ppm {
                n += conv(c, cd);
            }
        }
        if ppm {
            n += cfg.ppm_bins.len() * conv(deepest, cd);
            n += conv(deepest + cfg.ppm_bins.len() * cd, cd);
        }
        if s > 1 {
            n += s * cd * cd * 9 + cd;
        }
        n + conv(cd, num_classes)
    }

    fn pyramid(&self, g: &mut Graph, x: Var, ppm: &PyramidPooling) -> Var {
        let s = g.tape.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let mut parts = vec![x];
        for (&bins, conv) in ppm.bins.iter().zip(&ppm.branches) {
            let pooled = pool_to(&mut g.tape, x, bins);
            let p = conv.forward(g, pooled);
            let p = g.tape.relu(p);
            parts.push(upsample_to(&mut g.tape, p, h, w));
        }
        let cat = g.tape.concat(&parts, 1);
        let out = ppm.bottleneck.forward(g, cat);
        g.tape.relu(out)
    }

    /// Main prediction `[B, K, H, W]` from the fused features of every stage.
    pub fn decode_fused(&self, g: &mut Graph, stages: &[StageBundle], out_hw: (usize, usize)) -> Result<Var> {
        if stages.len() != self.stage_channels.len() {
            return Err(config_err!(
                "decoder configured for {} stages, got {}",
                self.stage_channels.len(),
                stages.len()
            ));
        }
        let n = stages.len();
        let maps: Vec<Var> = stages.iter().map(|b| bundle_map(&mut g.tape, b)).collect();
        let mut levels: Vec<Var> = Vec::with_capacity(n);
        for (i, &m) in maps.iter().enumerate() {
            let v = match (&self.laterals[i], &self.ppm) {
                (Some(l), _) => l.forward(g, m),
                (None, Some(ppm)) => self.pyramid(g, m, ppm),
                (None, None) => unreachable!("deepest stage needs a lateral or pyramid pooling"),
            };
            levels.push(v);
        }
        // Top-down pathway.
        for i in (0..n.saturating_sub(1)).rev() {
            let s = g.tape.shape(levels[i]).to_vec();
            let up = upsample_to(&mut g.tape, levels[i + 1], s[2], s[3]);
            levels[i] = g.tape.add(levels[i], up);
        }
        let head = match &self.merge {
            Some(merge) => {
                let s = g.tape.shape(levels[0]).to_vec();
                let resized: Vec<Var> = levels
                    .iter()
                    .map(|&l| upsample_to(&mut g.tape, l, s[2], s[3]))
                    .collect();
                let cat = g.tape.concat(&resized, 1);
                let m = merge.forward(g, cat);
                g.tape.relu(m)
            }
            None => levels[0],
        };
        let logits = self.classifier.forward(g, head);
        Ok(upsample_to(&mut g.tape, logits, out_hw.0, out_hw.1))
    }
}

/// Per-modality 1×1 classifiers on the last-stage unimodal features.
#[derive(Clone, Debug)]
pub struct AuxHeads {
    pub rgb: Conv1x1,
    pub aux: Conv1x1,
}

impl AuxHeads {
    pub fn new(store: &mut ParamStore, channels: usize, num_classes: usize) -> Self {
        let grp = ParamGroup::AuxHeads;
        let init = Init::Normal(lecun_std(channels));
        Self {
            rgb: Conv1x1::new(store, "aux_heads.rgb", channels, num_classes, grp, init),
            aux: Conv1x1::new(store, "aux_heads.aux", channels, num_classes, grp, init),
        }
    }

    pub fn param_count(channels: usize, num_classes: usize) -> usize {
        2 * (channels * num_classes + num_classes)
    }

    /// Auxiliary prediction `[B, K, H, W]`; only available in training mode.
    pub fn decode_aux(
        &self,
        g: &mut Graph,
        last_stage: &TokenGrid,
        modality: Modality,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        if g.mode() != Mode::Train {
            return Err(Error::Contract(
                "auxiliary heads are training-only; inference keeps the fused branch alone".into(),
            ));
        }
        let head = match modality {
            Modality::Rgb => &self.rgb,
            Modality::Aux => &self.aux,
        };
        let map = g.tape.permute(last_stage.var, &[0, 3, 1, 2]);
        let logits = head.forward(g, map);
        Ok(upsample_to(&mut g.tape, logits, out_hw.0, out_hw.1))
    }
}
