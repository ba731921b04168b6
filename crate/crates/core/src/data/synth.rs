//! Synthetic paired tiles whose labels depend on a declared set of
//! modalities, so modality-missing degradation is measurable by
//! construction.
//!
//! Tiles are a grid of square cells. Each cell draws an appearance bit `a`
//! and a height band `h ∈ {0, 1, 2}`; its class is `3a + h`. Optical
//! channels 0 and 1 encode `a`, channel 2 carries a height hint, and the
//! DSM carries the height.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassInfo, TilePair};
use crate::error::{config_err, Result};
use crate::params::derived_rng;

pub const SYNTH_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependence {
    /// Labels need both modalities: appearance from the optical image,
    /// height from the DSM; the optical height hint is only right with
    /// probability `hint_accuracy`.
    Joint,
    /// The optical image determines the label; the DSM is independent noise.
    RgbOnly,
    /// The DSM determines the label; the optical image is independent noise.
    AuxOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub train_tiles: usize,
    pub test_tiles: usize,
    pub tile_size: usize,
    pub cell_size: usize,
    pub mode: Dependence,
    pub hint_accuracy: f64,
    pub rgb_noise: f64,
    pub dsm_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_tiles: 16,
            test_tiles: 4,
            tile_size: 64,
            cell_size: 16,
            mode: Dependence::Joint,
            hint_accuracy: 0.85,
            rgb_noise: 12.0,
            dsm_noise: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.cell_size == 0 {
            return Err(config_err!("data.synth tile_size and cell_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hint_accuracy) {
            return Err(config_err!(
                "data.synth.hint_accuracy must lie in [0, 1], got {}",
                self.hint_accuracy
            ));
        }
        if !(self.rgb_noise >= 0.0 && self.dsm_noise >= 0.0) {
            return Err(config_err!("data.synth noise levels must be >= 0"));
        }
        Ok(())
    }

    pub fn classes() -> Vec<ClassInfo> {
        const COLORS: [[u8; 3]; SYNTH_CLASSES] = [
            [255, 255, 255],
            [0, 0, 255],
            [0, 255, 255],
            [0, 255, 0],
            [255, 255, 0],
            [255, 0, 0],
        ];
        (0..SYNTH_CLASSES)
            .map(|id| ClassInfo {
                id,
                name: format!("a{}_h{}", id / 3, id % 3),
                color: COLORS[id],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<TilePair>,
    pub test: Vec<TilePair>,
    pub classes: Vec<ClassInfo>,
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    Ok(SynthDataset {
        train: synth_tiles(spec, spec.train_tiles, "train", seed)?,
        test: synth_tiles(spec, spec.test_tiles, "test", seed)?,
        classes: SynthSpec::classes(),
    })
}

/// `count` tiles named `<split>_<index>`; tile `i` depends only on
/// `(seed, split, i)`.
pub fn synth_tiles(spec: &SynthSpec, count: usize, split: &str, seed: u64) -> Result<Vec<TilePair>> {
    spec.validate()?;
    Ok((0..count)
        .map(|i| {
            let id = format!("{split}_{i:03}");
            let mut rng = derived_rng(seed, &format!("synth/{id}"));
            synth_tile(spec, id, &mut rng)
        })
        .collect())
}

struct Cell {
    class: usize,
    /// Appearance bit shown in the optical image.
    a_shown: usize,
    /// Height band shown in optical channel 2.
    hint: usize,
    /// Level index shown in the DSM, and the spacing between levels.
    level: usize,
    spacing: f64,
}

fn draw_cell(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Cell {
    let a = rng.random_range(0..2);
    let h = rng.random_range(0..3);
    let class = 3 * a + h;
    match spec.mode {
        Dependence::Joint => {
            let hint = if rng.random_bool(spec.hint_accuracy) {
                h
            } else {
                (h + rng.random_range(1..3)) % 3
            };
            Cell {
                class,
                a_shown: a,
                hint,
                level: h,
                spacing: 10.0,
            }
        }
        Dependence::RgbOnly => Cell {
            class,
            a_shown: a,
            hint: h,
            level: rng.random_range(0..3),
            spacing: 10.0,
        },
        Dependence::AuxOnly => Cell {
            class,
            a_shown: rng.random_range(0..2),
            hint: rng.random_range(0..3),
            level: class,
            spacing: 6.0,
        },
    }
}

fn synth_tile(spec: &SynthSpec, tile_id: String, rng: &mut ChaCha8Rng) -> TilePair {
    let n = spec.tile_size;
    let per_side = n.div_ceil(spec.cell_size);
    let cells: Vec<Cell> = (0..per_side * per_side).map(|_| draw_cell(spec, rng)).collect();
    let cell_at = |y: usize, x: usize| &cells[(y / spec.cell_size) * per_side + x / spec.cell_size];
    let rgb_n = Normal::new(0.0, spec.rgb_noise).expect("finite std");
    let dsm_n = Normal::new(0.0, spec.dsm_noise).expect("finite std");
    let mut rgb = Array3::zeros((3, n, n));
    let mut dsm = Array3::zeros((1, n, n));
    let mut labels = Array2::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let c = cell_at(y, x);
            let a = c.a_shown as f64;
            let base = [60.0 + 120.0 * a, 180.0 - 120.0 * a, 40.0 + 80.0 * c.hint as f64];
            for (ch, b) in base.iter().enumerate() {
                let v: f64 = b + rgb_n.sample(rng);
                rgb[[ch, y, x]] = v.round().clamp(0.0, 255.0);
            }
            let z = 10.0 + c.spacing * c.level as f64 + dsm_n.sample(rng);
            // Keep heights exactly representable in the on-disk f32 format.
            dsm[[0, y, x]] = z as f32 as f64;
            labels[[y, x]] = c.class;
        }
    }
    TilePair {
        tile_id,
        rgb,
        dsm,
        labels,
    }
}
