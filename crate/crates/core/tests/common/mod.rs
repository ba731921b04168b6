#![allow(dead_code)]

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use symfuse::autograd::{Tape, Tensor, Var};
use symfuse::graph::Graph;
use symfuse::params::{ParamId, ParamStore};
use symfuse::RunConfig;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Gradient check of a tape expression with respect to each input. `f`
/// must return a scalar. Returns the relative error per input.
pub fn check_tape(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<f64> {
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), false)).collect();
        let out = f(&mut t, &vars);
        t.item(out)
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let out = f(&mut t, &vars);
    let grads = t.backward(out);
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.raw_dim()));
            let mut numeric = Tensor::zeros(x.raw_dim());
            let mut vals = inputs.to_vec();
            for j in 0..x.len() {
                let orig = x.as_slice().unwrap()[j];
                vals[i].as_slice_mut().unwrap()[j] = orig + FD_STEP;
                let up = eval(&vals);
                vals[i].as_slice_mut().unwrap()[j] = orig - FD_STEP;
                let down = eval(&vals);
                vals[i].as_slice_mut().unwrap()[j] = orig;
                numeric.as_slice_mut().unwrap()[j] = (up - down) / (2.0 * FD_STEP);
            }
            rel_err(&analytic, &numeric)
        })
        .collect()
}

/// Gradient check of a graph-built scalar with respect to store parameters.
/// Dropout is off so the loss is deterministic. Returns `(name, rel err)`.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    build: impl Fn(&mut Graph) -> Var,
) -> Vec<(String, f64)> {
    let loss = |store: &ParamStore| {
        let mut g = Graph::train(store, 0).without_dropout().without_grads();
        let l = build(&mut g);
        g.tape.item(l)
    };
    let grads = {
        let mut g = Graph::train(store, 0).without_dropout();
        let l = build(&mut g);
        g.backward(l)
    };
    ids.iter()
        .map(|&id| {
            let shape = store.value(id).raw_dim();
            let analytic = grads
                .iter()
                .find(|(g, _)| *g == id)
                .map(|(_, t)| t.clone())
                .unwrap_or_else(|| Tensor::zeros(shape.clone()));
            let mut numeric = Tensor::zeros(shape);
            for j in 0..numeric.len() {
                let orig = store.value(id).as_slice().unwrap()[j];
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig + FD_STEP;
                let up = loss(store);
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig - FD_STEP;
                let down = loss(store);
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig;
                numeric.as_slice_mut().unwrap()[j] = (up - down) / (2.0 * FD_STEP);
            }
            (store.param(id).name.clone(), rel_err(&analytic, &numeric))
        })
        .collect()
}

/// Overwrites every parameter whose name starts with `prefix` with
/// `N(0, std²)` values.
pub fn randomize(store: &mut ParamStore, prefix: &str, std: f64, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.param(id).shape.clone();
        *store.value_mut(id) = randn(rng, &shape, std);
    }
}

pub fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect()
}

/// A four-stage model small enough to train in seconds.
pub fn small_config() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "backbone.depth=4".into(),
            "backbone.embed_dim=32".into(),
            "backbone.num_heads=2".into(),
            "backbone.taps=[1,2,3,4]".into(),
            "data.crop=32".into(),
            "decoder.channels=32".into(),
            "decoder.ppm_bins=[1,2]".into(),
            "eval.stride=32".into(),
        ])
        .expect("small config is valid")
}
