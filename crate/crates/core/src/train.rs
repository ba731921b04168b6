//! Freeze-aware training loop, parameter accounting and evaluation
//! protocols (full input and modality-missing).

use std::fmt;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::{DataSource, RunConfig};
use crate::data::{
    read_classes, read_split, sample_batch, sliding_window_inference, synth_dataset, Batch, NormalizedTile, Segmenter,
};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mode};
use crate::losses::{argmax_classes, objective, LossBreakdown};
use crate::mcrm::{apply_masking, plan_masking, Assignment, MaskPlan};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::Model;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::params::{derived_rng, ParamGroup, ParamId, ParamStore};
use crate::schedule::{lr_at, ScheduleSpec};

/// `(frozen, trainable)`; together they cover every parameter exactly once.
pub fn partition_parameters(store: &ParamStore) -> (Vec<ParamId>, Vec<ParamId>) {
    store.iter().map(|(id, _)| id).partition(|&id| !store.is_trainable(id))
}

pub fn count_params(store: &ParamStore, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.param(id).numel()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: ParamGroup,
    pub frozen: bool,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub groups: Vec<GroupCount>,
    pub total: usize,
    pub frozen: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn of(store: &ParamStore) -> Self {
        let groups = ParamGroup::ALL
            .iter()
            .map(|&g| GroupCount {
                group: g,
                frozen: g.is_frozen(),
                count: store.count(|p| p.group == g),
            })
            .collect();
        let (frozen, trainable) = partition_parameters(store);
        Self {
            groups,
            total: store.count(|_| true),
            frozen: count_params(store, &frozen),
            trainable: count_params(store, &trainable),
        }
    }

    pub fn group(&self, g: ParamGroup) -> usize {
        self.groups.iter().find(|c| c.group == g).map_or(0, |c| c.count)
    }

    pub fn trainable_millions(&self) -> f64 {
        self.trainable as f64 / 1e6
    }

    pub fn trainable_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Full,
    /// The auxiliary raster is replaced by zeros after normalization.
    RgbOnly,
    /// The optical raster is replaced by zeros after normalization.
    AuxOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Full, EvalMode::RgbOnly, EvalMode::AuxOnly];
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Full => "full",
            EvalMode::RgbOnly => "rgb_only",
            EvalMode::AuxOnly => "aux_only",
        })
    }
}

/// Applies an evaluation mode to normalized rasters.
pub fn apply_mode(rgb: &Array3<f64>, aux: &Array3<f64>, mode: EvalMode) -> (Array3<f64>, Array3<f64>) {
    match mode {
        EvalMode::Full => (rgb.clone(), aux.clone()),
        EvalMode::RgbOnly => (rgb.clone(), Array3::zeros(aux.raw_dim())),
        EvalMode::AuxOnly => (Array3::zeros(rgb.raw_dim()), aux.clone()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub crop: usize,
    pub stride: usize,
    pub batch: usize,
    pub background: Option<usize>,
    pub ignore: Option<usize>,
    pub class_names: Vec<String>,
}

impl EvalSettings {
    pub fn from_config(cfg: &RunConfig, class_names: Vec<String>) -> Self {
        Self {
            crop: cfg.data.crop,
            stride: cfg.eval.stride,
            batch: cfg.eval.batch,
            background: cfg.background(),
            ignore: cfg.loss.ignore(),
            class_names,
        }
    }
}

/// Sliding-window inference over every tile, scored with one confusion
/// matrix. Only the model's inference path is used.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    tiles: &[NormalizedTile],
    mode: EvalMode,
    s: &EvalSettings,
) -> Result<MetricsReport> {
    let k = model.num_classes();
    let mut cm = ConfusionMatrix::with_background(k, s.background);
    for tile in tiles {
        let (rgb, aux) = apply_mode(&tile.rgb, &tile.aux, mode);
        let logits = sliding_window_inference(model, &rgb, &aux, s.crop, s.stride, s.batch)?;
        let pred = argmax_classes(&logits.insert_axis(Axis(0)).into_dyn());
        let pred: Vec<usize> = pred.iter().copied().collect();
        let gt: Vec<usize> = tile.labels.iter().copied().collect();
        cm.accumulate(&pred, &gt, s.ignore)?;
    }
    Ok(cm.report(&s.class_names))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDrop {
    pub oa: f64,
    pub mf1: f64,
    pub miou: f64,
}

impl MetricDrop {
    /// `full − degraded` for each headline metric.
    pub fn between(full: &MetricsReport, degraded: &MetricsReport) -> Self {
        Self {
            oa: full.oa - degraded.oa,
            mf1: full.mf1 - degraded.mf1,
            miou: full.miou - degraded.miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub full: MetricsReport,
    pub rgb_only: MetricsReport,
    pub aux_only: MetricsReport,
    pub rgb_only_drop: MetricDrop,
    pub aux_only_drop: MetricDrop,
}

pub fn robustness<S: Segmenter + ?Sized>(model: &S, tiles: &[NormalizedTile], s: &EvalSettings) -> Result<RobustnessReport> {
    let full = evaluate(model, tiles, EvalMode::Full, s)?;
    let rgb_only = evaluate(model, tiles, EvalMode::RgbOnly, s)?;
    let aux_only = evaluate(model, tiles, EvalMode::AuxOnly, s)?;
    Ok(RobustnessReport {
        rgb_only_drop: MetricDrop::between(&full, &rgb_only),
        aux_only_drop: MetricDrop::between(&full, &aux_only),
        full,
        rgb_only,
        aux_only,
    })
}

/// Normalized train/test tiles plus class names.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<NormalizedTile>,
    pub test: Vec<NormalizedTile>,
    pub class_names: Vec<String>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let family = cfg.model.family;
    let (train, test, classes) = match cfg.data.source {
        DataSource::Synthetic => {
            let d = synth_dataset(&cfg.data.synth, cfg.seed)?;
            (d.train, d.test, d.classes)
        }
        DataSource::Directory => {
            let root = Path::new(&cfg.data.root);
            if !root.is_dir() {
                return Err(config_err!("data.root {:?} is not a directory", cfg.data.root));
            }
            if cfg.backbone.aux_channels != 1 {
                return Err(config_err!("directory datasets carry one DSM channel; set backbone.aux_channels = 1"));
            }
            let classes = read_classes(&root.join("classes.txt"))?;
            if classes.len() != cfg.model.num_classes {
                return Err(config_err!(
                    "classes.txt lists {} classes but model.num_classes = {}",
                    classes.len(),
                    cfg.model.num_classes
                ));
            }
            let train = read_split(root, "train", &classes)?;
            let test = read_split(root, "test", &classes)?;
            (train, test, classes)
        }
    };
    for t in train.iter().chain(&test) {
        t.validate(cfg.model.num_classes)?;
    }
    if let Some(t) = train.iter().find(|t| t.height().min(t.width()) < cfg.data.crop) {
        return Err(config_err!(
            "training tile {} ({}x{}) is smaller than data.crop {}",
            t.tile_id,
            t.height(),
            t.width(),
            cfg.data.crop
        ));
    }
    let norm = |v: Vec<crate::data::TilePair>| v.iter().map(|p| NormalizedTile::new(p, family)).collect();
    Ok(Dataset {
        train: norm(train),
        test: norm(test),
        class_names: classes.into_iter().map(|c| c.name).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Mean fusion gate per stage.
    pub gate_means: Vec<f64>,
    pub masked_rgb: usize,
    pub masked_aux: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub gate_means: Vec<f64>,
    pub eval: Option<MetricsReport>,
}

/// State captured when a step produces a non-finite loss or gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortSnapshot {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub reason: String,
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Abort(&'a AbortSnapshot),
}

/// Zeroes planned regions; refuses to run outside training mode.
pub fn corrupt_batch(mode: Mode, batch: &Batch, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    if mode != Mode::Train {
        return Err(Error::Contract("masking is training-only".into()));
    }
    apply_masking(&batch.rgb, &batch.aux, plan)
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: ScheduleSpec,
    step: usize,
    mask_rng: ChaCha8Rng,
    /// Set when the last step aborted.
    pub abort: Option<AbortSnapshot>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let cfg = &model.config;
        let optimizer = AdamW::new(&model.store, AdamWConfig::from_schedule(&cfg.schedule));
        let schedule = ScheduleSpec::from_config(&cfg.schedule);
        let mask_rng = derived_rng(cfg.seed, "mcrm");
        Self {
            optimizer,
            schedule,
            step: 0,
            mask_rng,
            abort: None,
            model,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Plan masking → corrupt → forward → objective → backward → AdamW on
    /// the trainable parameters.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let cfg = self.model.config.clone();
        let (h, w) = (batch.labels.dim().1, batch.labels.dim().2);
        let plan = if cfg.mcrm.enabled {
            plan_masking(batch.size(), cfg.mcrm.ratio, &cfg.mcrm.geometry(), h, w, &mut self.mask_rng)?
        } else {
            MaskPlan::full(batch.size(), h, w)
        };
        let (rgb, aux) = corrupt_batch(Mode::Train, batch, &plan)?;
        let lr = lr_at(self.step, &self.schedule);
        let dropout_seed = cfg.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (mut grads, loss, gate_means) = {
            let mut g = Graph::train(&self.model.store, dropout_seed);
            let out = self.model.forward(&mut g, &rgb, &aux)?;
            let (total, loss) = objective(&mut g.tape, out.logits, out.aux, &batch.labels, &cfg.loss)?;
            let gates = Model::gate_means(&g, &out.stages);
            if !loss.total.is_finite() {
                return Err(self.fail(lr, loss, "loss is not finite"));
            }
            (g.backward(total), loss, gates)
        };
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            let name = self.model.store.param(*id).name.clone();
            return Err(self.fail(lr, loss, &format!("gradient of {name} is not finite")));
        }
        if cfg.schedule.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.schedule.grad_clip);
        }
        self.optimizer.step(&mut self.model.store, &grads, lr);
        let record = StepRecord {
            step: self.step,
            epoch: self.step / cfg.schedule.steps_per_epoch,
            lr,
            loss,
            gate_means,
            masked_rgb: plan.count(Assignment::MaskRgb),
            masked_aux: plan.count(Assignment::MaskAux),
        };
        self.step += 1;
        Ok(record)
    }

    fn fail(&mut self, lr: f64, loss: LossBreakdown, reason: &str) -> Error {
        self.abort = Some(AbortSnapshot {
            step: self.step,
            lr,
            loss,
            reason: reason.to_string(),
        });
        Error::NonFinite(format!("step {}: {reason}", self.step))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub params: ParamCounts,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub test: MetricsReport,
}

/// Runs the configured schedule, evaluating on the test split every
/// `eval.every_epochs` epochs and after the last one.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(Trainer, RunSummary)> {
    let model = Model::new(cfg)?;
    let params = ParamCounts::of(&model.store);
    let mut trainer = Trainer::new(model);
    let mut data_rng = derived_rng(cfg.seed, "data");
    let settings = EvalSettings::from_config(cfg, data.class_names.clone());
    let s = &cfg.schedule;
    let mut epochs = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        let mut loss_sum = 0.0;
        let mut gate_sum: Vec<f64> = Vec::new();
        for _ in 0..s.steps_per_epoch {
            let batch = sample_batch(&data.train, cfg.data.batch, cfg.data.crop, &mut data_rng)?;
            let rec = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(snap) = &trainer.abort {
                        observer(TrainEvent::Abort(snap));
                    }
                    return Err(e);
                }
            };
            loss_sum += rec.loss.total;
            if gate_sum.is_empty() {
                gate_sum = vec![0.0; rec.gate_means.len()];
            }
            for (a, b) in gate_sum.iter_mut().zip(&rec.gate_means) {
                *a += b;
            }
            observer(TrainEvent::Step(&rec));
        }
        let n = s.steps_per_epoch as f64;
        let last = epoch + 1 == s.epochs;
        let periodic = cfg.eval.every_epochs > 0 && (epoch + 1) % cfg.eval.every_epochs == 0;
        let eval = if (periodic || last) && !data.test.is_empty() {
            Some(evaluate(&trainer.model, &data.test, EvalMode::Full, &settings)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / n,
            gate_means: gate_sum.iter().map(|g| g / n).collect(),
            eval,
        };
        observer(TrainEvent::Epoch(&rec));
        epochs.push(rec);
    }
    let test = match epochs.last().and_then(|e| e.eval.clone()) {
        Some(r) => r,
        None => ConfusionMatrix::with_background(cfg.model.num_classes, cfg.background()).report(&settings.class_names),
    };
    let summary = RunSummary {
        seed: cfg.seed,
        params,
        steps: trainer.step_index(),
        epochs,
        test,
    };
    Ok((trainer, summary))
}

/// The four rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Base,
    Cpia,
    CpiaDgfm,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Base,
        AblationVariant::Cpia,
        AblationVariant::CpiaDgfm,
        AblationVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Base => "Base",
            AblationVariant::Cpia => "+CPIA",
            AblationVariant::CpiaDgfm => "+CPIA+DGFM",
            AblationVariant::Full => "Full",
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == label)
    }

    /// `cfg` with the component toggles of this row.
    pub fn configure(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let (cpia, dgfm, mcrm) = match self {
            AblationVariant::Base => (false, false, false),
            AblationVariant::Cpia => (true, false, false),
            AblationVariant::CpiaDgfm => (true, true, false),
            AblationVariant::Full => (true, true, true),
        };
        c.cpia.enabled = cpia;
        c.dgfm.enabled = dgfm;
        c.mcrm.enabled = mcrm;
        c
    }
}
