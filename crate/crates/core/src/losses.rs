//! Fused cross-entropy, the hard-pixel set and the masked auxiliary terms.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{config_err, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_aux: f64,
    /// Label value excluded from every loss term; negative keeps all pixels.
    pub ignore_index: i64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_aux: 0.4,
            ignore_index: -1,
        }
    }
}

impl LossConfig {
    pub fn ignore(&self) -> Option<usize> {
        usize::try_from(self.ignore_index).ok()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            return Err(config_err!("loss.lambda_aux must be finite and >= 0, got {}", self.lambda_aux));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux_rgb: f64,
    pub aux_aux: f64,
    pub total: f64,
    pub hard_pixel_fraction: f64,
    /// Pixels that entered the main term; zero means the loss was defined
    /// as 0 for an all-ignored batch.
    pub valid_pixels: usize,
}

/// Pixels where the fused prediction is wrong, over valid pixels only.
#[derive(Clone, Debug, PartialEq)]
pub struct HardPixelMask {
    pub mask: Array3<bool>,
}

impl HardPixelMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Returns the class count `K` of `[B, K, H, W]` logits matching `labels`.
fn check_shapes(labels: &Array3<usize>, logits: &Tensor) -> Result<usize> {
    let ls = logits.shape();
    if ls.len() != 4 {
        return Err(shape_err!("logits must be [B, K, H, W], got {ls:?}"));
    }
    let (b, h, w) = labels.dim();
    if (ls[0], ls[2], ls[3]) != (b, h, w) {
        return Err(shape_err!("logits {ls:?} do not match labels [{b}, {h}, {w}]"));
    }
    Ok(ls[1])
}

fn check_labels(labels: &Array3<usize>, logits: &Tensor, ignore: Option<usize>) -> Result<()> {
    let k = check_shapes(labels, logits)?;
    for (pixel, &v) in labels.iter().enumerate() {
        if v >= k && Some(v) != ignore {
            return Err(Error::Label {
                pixel,
                value: v,
                num_classes: k,
            });
        }
    }
    Ok(())
}

/// Per-pixel CE targets: the label where valid, `None` where ignored.
pub fn valid_targets(labels: &Array3<usize>, ignore: Option<usize>) -> Vec<Option<usize>> {
    labels.iter().map(|&v| (Some(v) != ignore).then_some(v)).collect()
}

/// Mean cross-entropy over non-ignored pixels (0 when there are none).
pub fn main_loss(t: &mut Tape, logits: Var, labels: &Array3<usize>, ignore: Option<usize>) -> Result<Var> {
    check_labels(labels, t.value(logits), ignore)?;
    Ok(t.cross_entropy(logits, &valid_targets(labels, ignore)))
}

/// Class index of the largest logit; ties go to the lowest index.
pub fn argmax_classes(logits: &Tensor) -> Array3<usize> {
    let s = logits.shape();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
        let col = logits.slice(s![bi, .., y, x]);
        let mut best = 0;
        for c in 1..k {
            if col[c] > col[best] {
                best = c;
            }
        }
        best
    })
}

/// `Ω = {u : argmax_c P(u, c) ≠ Y(u)}` over valid pixels. Built from plain
/// values, so nothing differentiates through it.
pub fn hard_pixel_set(logits: &Tensor, labels: &Array3<usize>, ignore: Option<usize>) -> Result<HardPixelMask> {
    check_labels(labels, logits, ignore)?;
    let pred = argmax_classes(logits);
    let mask = ndarray::Zip::from(&pred)
        .and(labels)
        .map_collect(|&p, &y| Some(y) != ignore && p != y);
    Ok(HardPixelMask { mask })
}

/// Cross-entropy of each auxiliary prediction restricted to `Ω`; both
/// terms are exactly 0 (with zero gradient) when `Ω` is empty.
pub fn aux_loss(
    t: &mut Tape,
    p_rgb: Var,
    p_aux: Var,
    labels: &Array3<usize>,
    omega: &HardPixelMask,
) -> Result<(Var, Var)> {
    if omega.mask.dim() != labels.dim() {
        return Err(shape_err!(
            "hard-pixel mask {:?} does not match labels {:?}",
            omega.mask.dim(),
            labels.dim()
        ));
    }
    for p in [p_rgb, p_aux] {
        let k = check_shapes(labels, t.value(p))?;
        let bad = labels
            .iter()
            .zip(omega.mask.iter())
            .enumerate()
            .find(|(_, (&y, &m))| m && y >= k);
        if let Some((pixel, (&value, _))) = bad {
            return Err(Error::Label {
                pixel,
                value,
                num_classes: k,
            });
        }
    }
    let targets: Vec<Option<usize>> = labels
        .iter()
        .zip(omega.mask.iter())
        .map(|(&y, &m)| m.then_some(y))
        .collect();
    let lr = t.cross_entropy(p_rgb, &targets);
    let la = t.cross_entropy(p_aux, &targets);
    Ok((lr, la))
}

/// `L_main + λ (L_rgb + L_aux)`.
pub fn total_loss(t: &mut Tape, main: Var, aux: Option<(Var, Var)>, lambda_aux: f64) -> Var {
    match aux {
        None => main,
        Some((lr, la)) => {
            let s = t.add(lr, la);
            let s = t.scale(s, lambda_aux);
            t.add(main, s)
        }
    }
}

/// Full objective for one batch. `aux` holds the two auxiliary logit maps
/// when masking training is active.
pub fn objective(
    t: &mut Tape,
    logits: Var,
    aux: Option<(Var, Var)>,
    labels: &Array3<usize>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let main = main_loss(t, logits, labels, cfg.ignore())?;
    let valid = labels.iter().filter(|&&v| Some(v) != cfg.ignore()).count();
    let (aux_vars, fraction) = match aux {
        Some((pr, pa)) => {
            let omega = hard_pixel_set(t.value(logits), labels, cfg.ignore())?;
            let frac = if valid == 0 {
                0.0
            } else {
                omega.count() as f64 / valid as f64
            };
            (Some(aux_loss(t, pr, pa, labels, &omega)?), frac)
        }
        None => (None, 0.0),
    };
    let total = total_loss(t, main, aux_vars, cfg.lambda_aux);
    let (aux_rgb, aux_aux) = aux_vars.map_or((0.0, 0.0), |(a, b)| (t.item(a), t.item(b)));
    Ok((
        total,
        LossBreakdown {
            main: t.item(main),
            aux_rgb,
            aux_aux,
            total: t.item(total),
            hard_pixel_fraction: fraction,
            valid_pixels: valid,
        },
    ))
}
