//! Modality-conditional random masking (training only).
//!
//! A batch is split into samples whose optical input is corrupted, samples
//! whose auxiliary input is corrupted, and untouched samples. Corruption
//! zeroes `K` random rectangles of the chosen modality after normalization.

use ndarray::s;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{config_err, shape_err, Result};

/// Resampling attempts before an oversized rectangle is clamped.
pub const MAX_REGION_RETRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McrmConfig {
    pub enabled: bool,
    pub ratio: f64,
    pub regions: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for McrmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ratio: 0.5,
            regions: 3,
            area_min: 0.02,
            area_max: 0.15,
            aspect_min: 0.5,
            aspect_max: 2.0,
        }
    }
}

impl McrmConfig {
    pub fn geometry(&self) -> MaskGeometry {
        MaskGeometry {
            regions: self.regions,
            area_min: self.area_min,
            area_max: self.area_max,
            aspect_min: self.aspect_min,
            aspect_max: self.aspect_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        self.geometry().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGeometry {
    pub regions: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl MaskGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 {
            return Err(config_err!("mcrm.regions must be >= 1"));
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max < 1.0) {
            return Err(config_err!(
                "mcrm area range must satisfy 0 < area_min <= area_max < 1, got [{}, {}]",
                self.area_min,
                self.area_max
            ));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= 1.0 && self.aspect_max >= 1.0 && self.aspect_max.is_finite()) {
            return Err(config_err!(
                "mcrm aspect range must satisfy 0 < aspect_min <= 1 <= aspect_max, got [{}, {}]",
                self.aspect_min,
                self.aspect_max
            ));
        }
        Ok(())
    }

    /// Rejects geometries that cannot yield a rectangle of at least one
    /// pixel on an `h × w` image.
    pub fn check_feasible(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if h == 0 || w == 0 {
            return Err(config_err!("mask geometry needs a positive image size, got {h}x{w}"));
        }
        // Rounding lets a target area of half a pixel still produce 1×1.
        if self.area_max * ((h * w) as f64) < 0.5 {
            return Err(config_err!(
                "mcrm.area_max = {} is below one pixel on a {h}x{w} image",
                self.area_max
            ));
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(config_err!("mcrm.ratio must lie in [0, 1], got {r}"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    MaskRgb,
    MaskAux,
    Full,
}

/// Half-open pixel rectangle `[top, top+height) × [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub assignments: Vec<Assignment>,
    /// Rectangles per sample; empty for untouched samples.
    pub regions: Vec<Vec<Rect>>,
    pub height: usize,
    pub width: usize,
}

impl MaskPlan {
    /// A plan that leaves every sample untouched.
    pub fn full(batch: usize, height: usize, width: usize) -> Self {
        Self {
            assignments: vec![Assignment::Full; batch],
            regions: vec![Vec::new(); batch],
            height,
            width,
        }
    }

    pub fn count(&self, a: Assignment) -> usize {
        self.assignments.iter().filter(|&&x| x == a).count()
    }
}

/// `N = floor(r · B)`. The epsilon keeps products such as `0.29 · 100`
/// from landing one below the exact integer.
pub fn masked_count(batch: usize, ratio: f64) -> usize {
    (ratio * batch as f64 + 1e-9).floor() as usize
}

pub fn plan_masking<R: Rng + ?Sized>(
    batch: usize,
    ratio: f64,
    geometry: &MaskGeometry,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if batch == 0 {
        return Err(config_err!("batch size must be >= 1"));
    }
    let n = masked_count(batch, ratio);
    let mut order: Vec<usize> = (0..batch).collect();
    order.shuffle(rng);
    let mut plan = MaskPlan::full(batch, height, width);
    for (rank, &i) in order.iter().take(n).enumerate() {
        plan.assignments[i] = if rank < n / 2 {
            Assignment::MaskRgb
        } else {
            Assignment::MaskAux
        };
    }
    if n > 0 {
        geometry.check_feasible(height, width)?;
    }
    for i in 0..batch {
        if plan.assignments[i] != Assignment::Full {
            plan.regions[i] = (0..geometry.regions)
                .map(|_| sample_region(height, width, geometry, rng))
                .collect();
        }
    }
    Ok(plan)
}

/// One rectangle with area drawn uniformly from the configured fraction of
/// the image and a log-uniform aspect (`height / width`), placed uniformly.
pub fn sample_region<R: Rng + ?Sized>(h: usize, w: usize, g: &MaskGeometry, rng: &mut R) -> Rect {
    let total = (h * w) as f64;
    let (lo, hi) = (g.aspect_min.ln(), g.aspect_max.ln());
    let draw = |rng: &mut R| {
        let area = total * uniform(rng, g.area_min, g.area_max);
        let aspect = uniform(rng, lo, hi).exp();
        let rh = ((area * aspect).sqrt().round() as usize).max(1);
        let rw = ((area / aspect).sqrt().round() as usize).max(1);
        (rh, rw)
    };
    let mut dims = draw(rng);
    for _ in 0..MAX_REGION_RETRIES {
        if dims.0 <= h && dims.1 <= w {
            break;
        }
        dims = draw(rng);
    }
    let (rh, rw) = (dims.0.min(h), dims.1.min(w));
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    Rect {
        top,
        left,
        height: rh,
        width: rw,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn zero_rect(t: &mut Tensor, sample: usize, r: &Rect) {
    t.slice_mut(s![sample, .., r.top..r.top + r.height, r.left..r.left + r.width])
        .fill(0.0);
}

/// Applies `plan` to normalized `[B, C, H, W]` inputs, returning corrupted
/// copies.
pub fn apply_masking(rgb: &Tensor, aux: &Tensor, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    for (name, t) in [("rgb", rgb), ("aux", aux)] {
        let sh = t.shape();
        if sh.len() != 4 || sh[0] != plan.assignments.len() || sh[2] != plan.height || sh[3] != plan.width {
            return Err(shape_err!(
                "{name} batch {sh:?} does not match a mask plan for {} samples of {}x{}",
                plan.assignments.len(),
                plan.height,
                plan.width
            ));
        }
    }
    let (mut rgb, mut aux) = (rgb.clone(), aux.clone());
    for (i, (a, rects)) in plan.assignments.iter().zip(&plan.regions).enumerate() {
        let target = match a {
            Assignment::MaskRgb => &mut rgb,
            Assignment::MaskAux => &mut aux,
            Assignment::Full => continue,
        };
        for r in rects {
            zero_rect(target, i, r);
        }
    }
    Ok((rgb, aux))
}
