//! Run configuration: one TOML document with a section per module.
//!
//! A config is built from a named preset, an optional (possibly partial)
//! file merged over it, and dotted overrides such as `mcrm.enabled=false`.
//! Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::EncoderSpec;
use crate::cpia::CpiaConfig;
use crate::data::{BackboneFamily, SynthSpec};
use crate::decoder::DecoderConfig;
use crate::dgfm::DgfmConfig;
use crate::error::{config_err, Error, Result};
use crate::losses::LossConfig;
use crate::mcrm::McrmConfig;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Run name, used in the run directory.
    pub name: String,
    pub num_classes: usize,
    /// Whether `background_class` is left out of mF1/mIoU.
    pub exclude_background: bool,
    pub background_class: usize,
    pub family: BackboneFamily,
    /// Optional archive of frozen backbone weights; empty keeps the seeded
    /// initialization.
    pub weights: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub taps: Vec<usize>,
    pub aux_channels: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset root for `source = "directory"`.
    pub root: String,
    pub crop: usize,
    pub batch: usize,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub stride: usize,
    /// Windows per forward pass.
    pub batch: usize,
    /// Evaluate on the test split every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub every_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub backbone: BackboneSection,
    pub cpia: CpiaConfig,
    pub dgfm: DgfmConfig,
    pub mcrm: McrmConfig,
    pub loss: LossConfig,
    pub decoder: DecoderConfig,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// CPU-sized defaults.
    Desk,
    /// ViT-B shapes, 256 crops, batch 12, 50 × 1000 steps.
    Paper,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(config_err!("unknown preset {other:?} (expected desk or paper)")),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = Self {
            seed: DEFAULT_SEED,
            model: ModelSection {
                name: "run".into(),
                num_classes: 6,
                exclude_background: true,
                background_class: 5,
                family: BackboneFamily::Dinov2,
                weights: String::new(),
            },
            backbone: BackboneSection {
                depth: 8,
                embed_dim: 64,
                num_heads: 4,
                patch_size: 8,
                taps: vec![2, 4, 6, 8],
                aux_channels: 1,
                mlp_ratio: 4,
            },
            cpia: CpiaConfig::default(),
            dgfm: DgfmConfig::default(),
            mcrm: McrmConfig::default(),
            loss: LossConfig::default(),
            decoder: DecoderConfig::default(),
            data: DataSection {
                source: DataSource::Synthetic,
                root: String::new(),
                crop: 64,
                batch: 8,
                synth: SynthSpec::default(),
            },
            schedule: ScheduleSection {
                epochs: 20,
                steps_per_epoch: 50,
                warmup_epochs: 5,
                base_lr: 3e-4,
                lr_min: 0.0,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                grad_clip: 0.0,
            },
            eval: EvalSection {
                stride: 32,
                batch: 4,
                every_epochs: 0,
            },
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => {
                let mut c = desk;
                c.backbone = BackboneSection {
                    depth: 12,
                    embed_dim: 768,
                    num_heads: 12,
                    patch_size: 16,
                    taps: vec![3, 6, 9, 12],
                    aux_channels: 1,
                    mlp_ratio: 4,
                };
                c.decoder.channels = 512;
                c.decoder.ppm_bins = vec![1, 2, 3, 6];
                c.data.crop = 256;
                c.data.batch = 12;
                c.data.synth.tile_size = 512;
                c.data.synth.cell_size = 64;
                c.schedule.epochs = 50;
                c.schedule.steps_per_epoch = 1000;
                c.eval.stride = 128;
                c
            }
        }
    }

    /// Preset, then `file` merged over it, then `overrides` (`key.path=value`).
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = to_table(&Self::preset(preset))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Table = toml::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?;
            merge(&mut table, user);
        }
        Self::from_table(table, overrides)
    }

    /// This config with `key.path=value` overrides applied and revalidated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_table(to_table(self)?, overrides)
    }

    fn from_table(mut table: Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully materialized document, every key present.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        let b = &self.backbone;
        let grid = self.data.crop / b.patch_size.max(1);
        EncoderSpec {
            depth: b.depth,
            embed_dim: b.embed_dim,
            num_heads: b.num_heads,
            patch_size: b.patch_size,
            taps: b.taps.clone(),
            aux_channels: b.aux_channels,
            mlp_ratio: b.mlp_ratio,
            pos_grid: [grid, grid],
        }
    }

    pub fn background(&self) -> Option<usize> {
        self.model.exclude_background.then_some(self.model.background_class)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.num_classes < 2 {
            return Err(config_err!("model.num_classes must be >= 2"));
        }
        if m.exclude_background && m.background_class >= m.num_classes {
            return Err(config_err!(
                "model.background_class {} is not below model.num_classes {}",
                m.background_class,
                m.num_classes
            ));
        }
        let d = &self.data;
        let p = self.backbone.patch_size;
        if p == 0 || d.crop == 0 || d.crop % p != 0 {
            return Err(config_err!(
                "data.crop {} must be a positive multiple of backbone.patch_size {p}",
                d.crop
            ));
        }
        if d.batch == 0 {
            return Err(config_err!("data.batch must be >= 1"));
        }
        if d.source == DataSource::Directory && d.root.trim().is_empty() {
            return Err(config_err!("data.root must name the dataset directory when data.source = \"directory\""));
        }
        if d.source == DataSource::Synthetic {
            d.synth.validate()?;
            if d.synth.tile_size < d.crop {
                return Err(config_err!(
                    "data.synth.tile_size {} is smaller than data.crop {}",
                    d.synth.tile_size,
                    d.crop
                ));
            }
            if m.num_classes != crate::data::SYNTH_CLASSES {
                return Err(config_err!(
                    "synthetic data has {} classes but model.num_classes = {}",
                    crate::data::SYNTH_CLASSES,
                    m.num_classes
                ));
            }
            if self.backbone.aux_channels != 1 {
                return Err(config_err!("synthetic data has one aux channel; set backbone.aux_channels = 1"));
            }
        }
        self.encoder_spec().validate()?;
        let c = &self.cpia;
        crate::cpia::CpiaDims::new(self.backbone.embed_dim, c.r_p, c.r_a)?;
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(config_err!("cpia.dropout must lie in [0, 1), got {}", c.dropout));
        }
        self.dgfm.validate()?;
        self.mcrm.validate()?;
        if self.mcrm.enabled {
            self.mcrm.geometry().check_feasible(d.crop, d.crop)?;
        }
        self.loss.validate()?;
        self.decoder.validate()?;
        let s = &self.schedule;
        if s.epochs == 0 || s.steps_per_epoch == 0 {
            return Err(config_err!("schedule.epochs and schedule.steps_per_epoch must be >= 1"));
        }
        if s.warmup_epochs > s.epochs {
            return Err(config_err!(
                "schedule.warmup_epochs {} exceeds schedule.epochs {}",
                s.warmup_epochs,
                s.epochs
            ));
        }
        if !(s.base_lr > 0.0 && s.lr_min >= 0.0 && s.lr_min <= s.base_lr) {
            return Err(config_err!("schedule needs base_lr > 0 and 0 <= lr_min <= base_lr"));
        }
        if !(s.weight_decay >= 0.0 && s.eps > 0.0 && (0.0..1.0).contains(&s.beta1) && (0.0..1.0).contains(&s.beta2)) {
            return Err(config_err!("schedule optimizer settings out of range"));
        }
        if s.grad_clip < 0.0 {
            return Err(config_err!("schedule.grad_clip must be >= 0"));
        }
        let e = &self.eval;
        if e.stride == 0 || e.stride > d.crop {
            return Err(config_err!("eval.stride {} must lie in 1..={}", e.stride, d.crop));
        }
        if e.batch == 0 {
            return Err(config_err!("eval.batch must be >= 1"));
        }
        Ok(())
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    let text = toml::to_string(cfg).map_err(|e| config_err!("{e}"))?;
    toml::from_str(&text).map_err(|e| config_err!("{e}"))
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `section.key=value` override. The path must already exist
/// so typos are caught here with the full key in the message.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err!("override {spec:?} is not of the form key.path=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = table;
    for (i, k) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        let entry = node
            .get_mut(*k)
            .ok_or_else(|| config_err!("unknown config key {path:?}"))?;
        if last {
            let value = parse_value(raw.trim());
            // Integers are accepted where floats are expected.
            *entry = match (&*entry, value) {
                (Value::Float(_), Value::Integer(n)) => Value::Float(n as f64),
                (_, v) => v,
            };
            return Ok(());
        }
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(config_err!("config key {path:?}: {k} is not a section")),
        };
    }
    Err(config_err!("empty override key in {spec:?}"))
}
