//! Named parameter storage with freeze groups and deterministic init.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

/// Partition of the model's parameters. The first three groups form the
/// frozen backbone; everything else is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    BackboneBlocks,
    RgbPatchEmbed,
    PositionalEncoding,
    AuxPatchEmbed,
    Cpia,
    Dgfm,
    Decoder,
    AuxHeads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::BackboneBlocks,
        ParamGroup::RgbPatchEmbed,
        ParamGroup::PositionalEncoding,
        ParamGroup::AuxPatchEmbed,
        ParamGroup::Cpia,
        ParamGroup::Dgfm,
        ParamGroup::Decoder,
        ParamGroup::AuxHeads,
    ];

    pub fn is_frozen(self) -> bool {
        matches!(
            self,
            ParamGroup::BackboneBlocks | ParamGroup::RgbPatchEmbed | ParamGroup::PositionalEncoding
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::BackboneBlocks => "backbone_blocks",
            ParamGroup::RgbPatchEmbed => "rgb_patch_embed",
            ParamGroup::PositionalEncoding => "positional_encoding",
            ParamGroup::AuxPatchEmbed => "aux_patch_embed",
            ParamGroup::Cpia => "cpia",
            ParamGroup::Dgfm => "dgfm",
            ParamGroup::Decoder => "decoder",
            ParamGroup::AuxHeads => "aux_heads",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    /// `None` in a layout-only store.
    pub value: Option<Tensor>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn trainable(&self) -> bool {
        !self.group.is_frozen()
    }
}

/// Every parameter's initial value depends only on `(seed, name)`, so adding
/// or removing a module never changes the initialization of the others.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    materialize: bool,
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            materialize: true,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// A store that records names and shapes without allocating values.
    pub fn layout_only() -> Self {
        Self {
            materialize: false,
            ..Self::new(0)
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialize
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], group: ParamGroup, init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name} registered twice"
        );
        let value = self.materialize.then(|| init_tensor(self.seed, name, shape, init));
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            group,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.params[id.0]
            .value
            .as_ref()
            .expect("parameter values are not materialized in a layout-only store")
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.params[id.0]
            .value
            .as_mut()
            .expect("parameter values are not materialized in a layout-only store")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable()
    }

    /// Total element count of the parameters accepted by `filter`.
    pub fn count(&self, filter: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(Param::numel).sum()
    }
}

/// FNV-1a, used to derive a per-parameter RNG stream from its name.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives an independent RNG stream from a seed and a label.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()))
}

fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::ones(IxDyn(shape)),
        Init::Normal(std) => {
            let mut rng = derived_rng(seed, name);
            ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
        }
    }
}
