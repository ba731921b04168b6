//! Paired-tile ingestion, normalization, augmentation and batching.

mod io;
mod synth;
mod window;

pub use io::{
    read_classes, read_dsm, read_split, write_classes, write_dsm_bin, write_tile, ClassInfo, DSM_MAGIC,
};
pub use synth::{synth_dataset, synth_tiles, Dependence, SynthDataset, SynthSpec, SYNTH_CLASSES};
pub use window::{sliding_window_inference, window_starts, Segmenter};

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{config_err, shape_err, Result};

/// Per-channel ImageNet statistics on a `[0, 1]` scale.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Preprocessing family of the frozen backbone: DINOv2-style backbones
/// expect ImageNet standardization, SAM-style ones plain `[0, 1]` input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    #[default]
    Dinov2,
    Sam,
}

/// One raw tile. `rgb` is on the 8-bit `[0, 255]` scale, `dsm` holds
/// heights in any unit, `labels` are class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePair {
    pub tile_id: String,
    pub rgb: Array3<f64>,
    pub dsm: Array3<f64>,
    pub labels: Array2<usize>,
}

impl TilePair {
    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w) = self.labels.dim();
        if self.rgb.dim().1 != h || self.rgb.dim().2 != w || self.dsm.dim().1 != h || self.dsm.dim().2 != w {
            return Err(shape_err!(
                "tile {}: rgb {:?}, dsm {:?} and labels {:?} disagree on spatial size",
                self.tile_id,
                self.rgb.dim(),
                self.dsm.dim(),
                self.labels.dim()
            ));
        }
        if self.rgb.dim().0 != 3 {
            return Err(shape_err!("tile {}: rgb has {} channels, expected 3", self.tile_id, self.rgb.dim().0));
        }
        if let Some((pixel, &value)) = self.labels.iter().enumerate().find(|(_, &v)| v >= num_classes) {
            return Err(crate::Error::Label {
                pixel,
                value,
                num_classes,
            });
        }
        Ok(())
    }
}

/// A tile after modality-specific normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTile {
    pub tile_id: String,
    pub rgb: Array3<f64>,
    pub aux: Array3<f64>,
    pub labels: Array2<usize>,
}

impl NormalizedTile {
    pub fn new(pair: &TilePair, family: BackboneFamily) -> Self {
        Self {
            tile_id: pair.tile_id.clone(),
            rgb: normalize_rgb(&pair.rgb, family),
            aux: normalize_dsm(&pair.dsm),
            labels: pair.labels.clone(),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }
}

/// Per-tile, per-channel min–max scaling to `[0, 1]`; constant channels
/// become all zeros.
pub fn normalize_dsm(dsm: &Array3<f64>) -> Array3<f64> {
    let mut out = dsm.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let lo = ch.fold(f64::INFINITY, |a, &v| a.min(v));
        let hi = ch.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let span = hi - lo;
        if span > 0.0 {
            ch.mapv_inplace(|v| (v - lo) / span);
        } else {
            ch.fill(0.0);
        }
    }
    out
}

/// `[0, 255]` → `[0, 1]`, then ImageNet standardization for the DINOv2
/// family.
pub fn normalize_rgb(rgb: &Array3<f64>, family: BackboneFamily) -> Array3<f64> {
    let mut out = rgb / 255.0;
    if family == BackboneFamily::Dinov2 {
        for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate().take(3) {
            let (m, sd) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
            ch.mapv_inplace(|v| (v - m) / sd);
        }
    }
    out
}

/// Inverse of [`normalize_rgb`], back to the `[0, 255]` scale.
pub fn denormalize_rgb(rgb: &Array3<f64>, family: BackboneFamily) -> Array3<f64> {
    let mut out = rgb.clone();
    if family == BackboneFamily::Dinov2 {
        for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate().take(3) {
            let (m, sd) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
            ch.mapv_inplace(|v| v * sd + m);
        }
    }
    out * 255.0
}

/// A training crop with the augmentation that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePatch {
    pub rgb: Array3<f64>,
    pub aux: Array3<f64>,
    pub labels: Array2<usize>,
    pub top: usize,
    pub left: usize,
    /// Mirrored left–right.
    pub flip_h: bool,
    /// Mirrored top–bottom.
    pub flip_v: bool,
}

/// Same window and flips for all three rasters; each flip is an
/// independent fair coin.
pub fn random_crop_flip<R: Rng + ?Sized>(tile: &NormalizedTile, crop: usize, rng: &mut R) -> Result<SamplePatch> {
    let (h, w) = (tile.height(), tile.width());
    if crop == 0 || crop > h.min(w) {
        return Err(config_err!(
            "crop {crop} does not fit tile {} of size {h}x{w}",
            tile.tile_id
        ));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    let rows = top..top + crop;
    let cols = left..left + crop;
    let mut rgb = tile.rgb.slice(s![.., rows.clone(), cols.clone()]).to_owned();
    let mut aux = tile.aux.slice(s![.., rows.clone(), cols.clone()]).to_owned();
    let mut labels = tile.labels.slice(s![rows, cols]).to_owned();
    if flip_h {
        rgb.invert_axis(Axis(2));
        aux.invert_axis(Axis(2));
        labels.invert_axis(Axis(1));
    }
    if flip_v {
        rgb.invert_axis(Axis(1));
        aux.invert_axis(Axis(1));
        labels.invert_axis(Axis(0));
    }
    Ok(SamplePatch {
        rgb: rgb.as_standard_layout().into_owned(),
        aux: aux.as_standard_layout().into_owned(),
        labels: labels.as_standard_layout().into_owned(),
        top,
        left,
        flip_h,
        flip_v,
    })
}

/// A stacked mini-batch: `rgb [B, 3, H, W]`, `aux [B, C_a, H, W]`,
/// `labels [B, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rgb: Tensor,
    pub aux: Tensor,
    pub labels: Array3<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.dim().0
    }

    pub fn stack(patches: &[SamplePatch]) -> Result<Self> {
        if patches.is_empty() {
            return Err(shape_err!("cannot stack an empty batch"));
        }
        let views = |f: fn(&SamplePatch) -> ndarray::ArrayView3<'_, f64>| -> Result<Tensor> {
            let v: Vec<_> = patches.iter().map(f).collect();
            Ok(ndarray::stack(Axis(0), &v)
                .map_err(|e| shape_err!("batch patches differ in shape: {e}"))?
                .into_dyn())
        };
        let rgb = views(|p| p.rgb.view())?;
        let aux = views(|p| p.aux.view())?;
        let lv: Vec<_> = patches.iter().map(|p| p.labels.view()).collect();
        let labels = ndarray::stack(Axis(0), &lv).map_err(|e| shape_err!("batch labels differ in shape: {e}"))?;
        Ok(Self { rgb, aux, labels })
    }
}

/// Draws `batch` crops, each from a uniformly chosen tile.
pub fn sample_batch<R: Rng + ?Sized>(
    tiles: &[NormalizedTile],
    batch: usize,
    crop: usize,
    rng: &mut R,
) -> Result<Batch> {
    if tiles.is_empty() {
        return Err(config_err!("training split has no tiles"));
    }
    let patches = (0..batch)
        .map(|_| {
            let t = &tiles[rng.random_range(0..tiles.len())];
            random_crop_flip(t, crop, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::stack(&patches)
}
