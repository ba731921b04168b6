//! The full segmentation model: frozen dual-stream encoder, per-stage CPIA
//! and fusion, decoder, and (when masking training is on) auxiliary heads.

use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, DType};
use crate::autograd::{Tensor, Var};
use crate::backbone::{resize_positional, Backbone, Modality, TokenGrid};
use crate::config::RunConfig;
use crate::cpia::{cpia_forward, CpiaDims, CpiaStage};
use crate::data::Segmenter;
use crate::decoder::{AuxHeads, DecoderWeights};
use crate::dgfm::{average_stage, fuse_stage, DgfmWeights, StageBundle};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;

/// Name prefix of the auxiliary-head parameters.
pub const AUX_HEAD_PREFIX: &str = "aux_heads.";

pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// One entry per stage; empty when CPIA is disabled.
    pub cpia: Vec<CpiaStage>,
    /// One entry per stage; empty when gated fusion is disabled (fusion is
    /// then the plain average).
    pub dgfm: Vec<DgfmWeights>,
    pub decoder: DecoderWeights,
    pub aux_heads: Option<AuxHeads>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// `(P_rgb, P_aux)`, only in training mode with auxiliary heads.
    pub aux: Option<(Var, Var)>,
    pub stages: Vec<StageBundle>,
    /// Final-stage unimodal tokens `(X^S, Y^S)`.
    pub last: (TokenGrid, TokenGrid),
}

impl Model {
    /// Materialized model seeded from `config.seed`. Auxiliary heads exist
    /// exactly when masking training is enabled.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut model = Self::build(config, ParamStore::new(config.seed), config.mcrm.enabled)?;
        if !config.model.weights.is_empty() {
            let path = Path::new(&config.model.weights);
            model.load_frozen(&Archive::load(path)?)?;
        }
        Ok(model)
    }

    /// Same construction with the auxiliary heads forced on or off.
    pub fn with_aux_heads(config: &RunConfig, aux_heads: bool) -> Result<Self> {
        Self::build(config, ParamStore::new(config.seed), aux_heads)
    }

    /// Shapes only; nothing is allocated, so paper-scale layouts are cheap.
    pub fn layout(config: &RunConfig) -> Result<Self> {
        Self::build(config, ParamStore::layout_only(), config.mcrm.enabled)
    }

    fn build(config: &RunConfig, mut store: ParamStore, aux_heads: bool) -> Result<Self> {
        config.validate()?;
        let spec = config.encoder_spec();
        let backbone = Backbone::new(&mut store, &spec)?;
        let stages = spec.num_stages();
        let c = spec.embed_dim;
        let cpia = if config.cpia.enabled {
            let dims = CpiaDims::new(c, config.cpia.r_p, config.cpia.r_a)?;
            (1..=stages)
                .map(|s| CpiaStage::new(&mut store, &format!("cpia.stage{s}"), dims, config.cpia.dropout))
                .collect()
        } else {
            Vec::new()
        };
        let dgfm = if config.dgfm.enabled {
            (1..=stages)
                .map(|s| DgfmWeights::new(&mut store, &format!("dgfm.stage{s}"), c, &config.dgfm))
                .collect()
        } else {
            Vec::new()
        };
        let k = config.model.num_classes;
        let decoder = DecoderWeights::new(&mut store, &vec![c; stages], k, &config.decoder);
        let aux_heads = aux_heads.then(|| AuxHeads::new(&mut store, c, k));
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            cpia,
            dgfm,
            decoder,
            aux_heads,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.backbone.stages().len()
    }

    /// Normalized `rgb [B, 3, H, W]` and `aux [B, C_a, H, W]` → logits
    /// `[B, K, H, W]`, plus auxiliary logits in training mode.
    pub fn forward(&self, g: &mut Graph, rgb: &Tensor, aux: &Tensor) -> Result<ForwardOutput> {
        let (rs, as_) = (rgb.shape(), aux.shape());
        if rs.len() != 4 || as_.len() != 4 || rs[0] != as_[0] || rs[2..] != as_[2..] {
            return Err(shape_err!("rgb {rs:?} and aux {as_:?} batches do not pair up"));
        }
        let out_hw = (rs[2], rs[3]);
        let mut x = self.backbone.embed_rgb(g, rgb)?;
        let mut y = self.backbone.embed_aux(g, aux)?;
        let mut stages = Vec::with_capacity(self.num_stages());
        for s in 1..=self.num_stages() {
            if let Some(stage) = self.cpia.get(s - 1) {
                (x, y) = cpia_forward(g, x, y, stage)?;
            }
            (x, y) = self.backbone.run_stage(g, s, x, y)?;
            let bundle = match self.dgfm.get(s - 1) {
                Some(w) => fuse_stage(g, &x, &y, w)?,
                None => average_stage(&mut g.tape, &x, &y)?,
            };
            stages.push(bundle);
        }
        let logits = self.decoder.decode_fused(g, &stages, out_hw)?;
        let aux = match (&self.aux_heads, g.mode()) {
            (Some(h), crate::graph::Mode::Train) => Some((
                h.decode_aux(g, &x, Modality::Rgb, out_hw)?,
                h.decode_aux(g, &y, Modality::Aux, out_hw)?,
            )),
            _ => None,
        };
        Ok(ForwardOutput {
            logits,
            aux,
            stages,
            last: (x, y),
        })
    }

    /// Mean gate value per stage (empty without gated fusion).
    pub fn gate_means(g: &Graph, stages: &[StageBundle]) -> Vec<f64> {
        stages
            .iter()
            .filter_map(|b| b.gate)
            .map(|v| g.value(v).mean().unwrap_or(0.0))
            .collect()
    }

    /// Trainable parameters, double precision, with the config and seed in
    /// the metadata. Frozen weights are rebuilt from the seed on load.
    pub fn checkpoint(&self) -> Archive {
        let meta = CheckpointMeta {
            seed: self.config.seed,
            config: self.config.to_toml(),
        };
        let mut a = Archive::new(DType::F64, serde_json::to_string(&meta).expect("meta serializes"));
        for (id, p) in self.store.iter().filter(|(_, p)| p.trainable()) {
            a.push(p.name.clone(), self.store.value(id).clone());
        }
        a
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a model for inference from a checkpoint: no auxiliary heads,
    /// frozen weights from the recorded seed (or weight file).
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&archive.meta)
            .map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        let mut config = RunConfig::from_toml(&meta.config)?;
        config.seed = meta.seed;
        let mut model = Self::build(&config, ParamStore::new(config.seed), false)?;
        if !config.model.weights.is_empty() {
            model.load_frozen(&Archive::load(Path::new(&config.model.weights))?)?;
        }
        model.load_trainable(&archive)?;
        Ok(model)
    }

    /// Copies trainable values from `archive`. Auxiliary-head entries are
    /// skipped when this model has no heads; any other mismatch is an error.
    pub fn load_trainable(&mut self, archive: &Archive) -> Result<()> {
        for (name, t) in &archive.entries {
            let Some(id) = self.store.id(name) else {
                if name.starts_with(AUX_HEAD_PREFIX) {
                    continue;
                }
                return Err(config_err!("checkpoint entry {name} does not exist in this model"));
            };
            if !self.store.is_trainable(id) {
                return Err(config_err!("checkpoint entry {name} names a frozen parameter"));
            }
            set_checked(&mut self.store, id, name, t)?;
        }
        let missing: Vec<&str> = self
            .store
            .iter()
            .filter(|(_, p)| p.trainable() && archive.get(&p.name).is_none())
            .map(|(_, p)| p.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(config_err!("checkpoint lacks trainable parameters: {}", missing.join(", ")));
        }
        Ok(())
    }

    /// Frozen weights in the external weight-file layout (single precision).
    pub fn export_frozen(&self) -> Archive {
        let mut a = Archive::new(DType::F32, "{}");
        for (id, p) in self.store.iter().filter(|(_, p)| !p.trainable()) {
            a.push(p.name.clone(), self.store.value(id).clone());
        }
        a
    }

    /// Replaces every frozen tensor from an external archive keyed by
    /// canonical names. A positional table on a different grid is resized
    /// bicubically to this model's native grid.
    pub fn load_frozen(&mut self, archive: &Archive) -> Result<()> {
        let frozen: Vec<_> = self
            .store
            .iter()
            .filter(|(_, p)| !p.trainable())
            .map(|(id, p)| (id, p.name.clone(), p.shape.clone()))
            .collect();
        for (id, name, shape) in frozen {
            let t = archive
                .get(&name)
                .ok_or_else(|| config_err!("weight file lacks frozen parameter {name}"))?;
            let t = if id == self.backbone.pos_embed && t.ndim() == 3 && t.shape()[2] == shape[2] {
                resize_positional(t, shape[0], shape[1]).into_dyn()
            } else {
                t.clone()
            };
            set_checked(&mut self.store, id, &name, &t)?;
        }
        Ok(())
    }
}

fn set_checked(store: &mut ParamStore, id: crate::params::ParamId, name: &str, t: &Tensor) -> Result<()> {
    let expected = &store.param(id).shape;
    if t.shape() != expected.as_slice() {
        return Err(shape_err!("{name}: stored shape {:?}, model expects {expected:?}", t.shape()));
    }
    *store.value_mut(id) = t.to_owned().into_shape_with_order(IxDyn(expected)).expect("same shape");
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    config: String,
}

impl Segmenter for Model {
    fn num_classes(&self) -> usize {
        self.config.model.num_classes
    }

    /// Inference-mode forward: no dropout, no auxiliary heads, no gradients.
    fn predict(&self, rgb: &Tensor, aux: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval(&self.store);
        let out = self.forward(&mut g, rgb, aux)?;
        Ok(g.value(out.logits).clone())
    }
}
