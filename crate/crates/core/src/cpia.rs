//! Cross-modal prompt-injected adapters, inserted before each stage.
//!
//! A shared base `Z` is generated from both streams (down-project each,
//! concatenate, fuse, up-project), modulated per modality by a channel-wise
//! affine (`P = Z + Z⊙γ + β`), and injected as a bias into the bottleneck of
//! each stream's adapter: `X + W_up(ReLU(W_down X + W_prompt P))`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{Modality, TokenGrid};
use crate::error::{config_err, shape_err, Result};
use crate::graph::Graph;
use crate::nn::{lecun_std, Linear};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Std of the small random init used for adapter down and prompt maps.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpiaConfig {
    pub enabled: bool,
    pub r_p: f64,
    pub r_a: f64,
    pub dropout: f64,
}

impl Default for CpiaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            r_p: 0.25,
            r_a: 0.25,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpiaDims {
    pub channels: usize,
    /// `C_p = floor(r_p · C)`
    pub prompt_dim: usize,
    /// `d = floor(r_a · C)`
    pub bottleneck: usize,
}

impl CpiaDims {
    pub fn new(channels: usize, r_p: f64, r_a: f64) -> Result<Self> {
        for (key, r) in [("cpia.r_p", r_p), ("cpia.r_a", r_a)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(config_err!("{key} must lie in (0, 1], got {r}"));
            }
        }
        let prompt_dim = (r_p * channels as f64).floor() as usize;
        let bottleneck = (r_a * channels as f64).floor() as usize;
        if prompt_dim == 0 {
            return Err(config_err!("cpia.r_p = {r_p} gives a zero prompt width for C = {channels}"));
        }
        if bottleneck == 0 {
            return Err(config_err!("cpia.r_a = {r_a} gives a zero bottleneck for C = {channels}"));
        }
        Ok(Self {
            channels,
            prompt_dim,
            bottleneck,
        })
    }

    /// Parameters of one stage's CPIA (generator, TFT and both adapters).
    pub fn params_per_stage(&self) -> usize {
        let (c, cp, d) = (self.channels, self.prompt_dim, self.bottleneck);
        let generator = 2 * c * cp + (2 * cp * cp + cp) + (cp * c + c);
        let tft = 4 * c;
        let adapters = 2 * 3 * c * d;
        generator + tft + adapters
    }
}

#[derive(Clone, Debug)]
pub struct CpgWeights {
    pub rgb_down: ParamId,
    pub aux_down: ParamId,
    pub fuse: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub struct TftParams {
    pub gamma_rgb: ParamId,
    pub beta_rgb: ParamId,
    pub gamma_aux: ParamId,
    pub beta_aux: ParamId,
}

#[derive(Clone, Debug)]
pub struct PromptAdapterWeights {
    pub down: ParamId,
    pub up: ParamId,
    pub prompt: ParamId,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct CpiaStage {
    pub dims: CpiaDims,
    pub cpg: CpgWeights,
    pub tft: TftParams,
    pub rgb_adapter: PromptAdapterWeights,
    pub aux_adapter: PromptAdapterWeights,
}

impl CpiaStage {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: CpiaDims, dropout: f64) -> Self {
        let (c, cp, d) = (dims.channels, dims.prompt_dim, dims.bottleneck);
        let grp = ParamGroup::Cpia;
        let cpg = CpgWeights {
            rgb_down: store.register(&format!("{prefix}.cpg.rgb_down"), &[c, cp], grp, Init::Normal(lecun_std(c))),
            aux_down: store.register(&format!("{prefix}.cpg.aux_down"), &[c, cp], grp, Init::Normal(lecun_std(c))),
            fuse: Linear::new(store, &format!("{prefix}.cpg.fuse"), 2 * cp, cp, true, grp, Init::Normal(lecun_std(2 * cp))),
            up: Linear::new(store, &format!("{prefix}.cpg.up"), cp, c, true, grp, Init::Normal(lecun_std(cp))),
        };
        let tft = TftParams {
            gamma_rgb: store.register(&format!("{prefix}.tft.gamma_rgb"), &[c], grp, Init::Zeros),
            beta_rgb: store.register(&format!("{prefix}.tft.beta_rgb"), &[c], grp, Init::Zeros),
            gamma_aux: store.register(&format!("{prefix}.tft.gamma_aux"), &[c], grp, Init::Zeros),
            beta_aux: store.register(&format!("{prefix}.tft.beta_aux"), &[c], grp, Init::Zeros),
        };
        let adapter = |store: &mut ParamStore, name: &str| PromptAdapterWeights {
            down: store.register(&format!("{prefix}.{name}.down"), &[c, d], grp, Init::Normal(ADAPTER_INIT_STD)),
            up: store.register(&format!("{prefix}.{name}.up"), &[d, c], grp, Init::Zeros),
            prompt: store.register(&format!("{prefix}.{name}.prompt"), &[c, d], grp, Init::Normal(ADAPTER_INIT_STD)),
            dropout,
        };
        let rgb_adapter = adapter(store, "adapter_rgb");
        let aux_adapter = adapter(store, "adapter_aux");
        Self {
            dims,
            cpg,
            tft,
            rgb_adapter,
            aux_adapter,
        }
    }
}

/// Shared semantic base `Z = Up(Fuse([X W_rgb; Y W_aux]))`, `[B, H', W', C]`.
pub fn generate_shared_base(g: &mut Graph, x: &TokenGrid, y: &TokenGrid, w: &CpgWeights) -> Result<Var> {
    if x.dims() != y.dims() {
        return Err(shape_err!(
            "prompt generator inputs differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        ));
    }
    let wr = g.param(w.rgb_down);
    let wa = g.param(w.aux_down);
    let xd = g.tape.matmul_last(x.var, wr);
    let yd = g.tape.matmul_last(y.var, wa);
    let cat = g.tape.concat(&[xd, yd], 3);
    let fused = w.fuse.forward(g, cat);
    Ok(w.up.forward(g, fused))
}

/// Modality-specific prompt `P_m = Z + (Z ⊙ γ_m + β_m)`.
pub fn apply_tft(g: &mut Graph, z: Var, modality: Modality, t: &TftParams) -> Var {
    let (gamma, beta) = match modality {
        Modality::Rgb => (t.gamma_rgb, t.beta_rgb),
        Modality::Aux => (t.gamma_aux, t.beta_aux),
    };
    let gm = g.param(gamma);
    let bt = g.param(beta);
    let scaled = g.tape.mul_last(z, gm);
    let shifted = g.tape.add_last(scaled, bt);
    g.tape.add(z, shifted)
}

/// `X + W_up(Dropout(ReLU(X W_down + P W_prompt)))`; dropout only when the
/// graph has it enabled.
pub fn prompt_adapter(
    g: &mut Graph,
    tokens: TokenGrid,
    prompt: Var,
    w: &PromptAdapterWeights,
) -> Result<TokenGrid> {
    if g.tape.shape(prompt) != tokens.dims() {
        return Err(shape_err!(
            "prompt shape {:?} does not match tokens {:?}",
            g.tape.shape(prompt),
            tokens.dims()
        ));
    }
    let down = g.param(w.down);
    let inj = g.param(w.prompt);
    let up = g.param(w.up);
    let h = g.tape.matmul_last(tokens.var, down);
    let hp = g.tape.matmul_last(prompt, inj);
    let h = g.tape.add(h, hp);
    let h = g.tape.relu(h);
    let h = g.dropout(h, w.dropout);
    let delta = g.tape.matmul_last(h, up);
    Ok(tokens.with_var(g.tape.add(tokens.var, delta)))
}

/// Full CPIA for one stage: shared base, per-modality prompts, and one
/// prompt-injected adapter per stream.
pub fn cpia_forward(
    g: &mut Graph,
    x: TokenGrid,
    y: TokenGrid,
    stage: &CpiaStage,
) -> Result<(TokenGrid, TokenGrid)> {
    let z = generate_shared_base(g, &x, &y, &stage.cpg)?;
    let p_rgb = apply_tft(g, z, Modality::Rgb, &stage.tft);
    let p_aux = apply_tft(g, z, Modality::Aux, &stage.tft);
    let x_out = prompt_adapter(g, x, p_rgb, &stage.rgb_adapter)?;
    let y_out = prompt_adapter(g, y, p_aux, &stage.aux_adapter)?;
    Ok((x_out, y_out))
}
