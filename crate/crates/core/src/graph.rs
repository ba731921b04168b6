//! Binds a [`ParamStore`] to a [`Tape`] for one forward/backward pass.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::params::{derived_rng, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Auxiliary heads are available and dropout is active.
    Train,
    /// Inference: auxiliary heads are unavailable, dropout is off.
    Eval,
}

pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    dropout: bool,
    track_grads: bool,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            dropout: mode == Mode::Train,
            track_grads: true,
            rng: derived_rng(dropout_seed, "dropout"),
        }
    }

    pub fn train(store: &'s ParamStore, dropout_seed: u64) -> Self {
        Self::new(store, Mode::Train, dropout_seed)
    }

    /// Inference graph without gradient tracking.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, Mode::Eval, 0).without_grads()
    }

    pub fn without_dropout(mut self) -> Self {
        self.dropout = false;
        self
    }

    pub fn without_grads(mut self) -> Self {
        self.track_grads = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dropout_active(&self) -> bool {
        self.dropout
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The tape node for a parameter; trainable parameters require a
    /// gradient, frozen ones never do.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let requires = self.track_grads && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.value(id).clone(), requires);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout; identity when dropout is inactive or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.dropout || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = ArrayD::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    /// Back-propagates `loss` and returns gradients of every bound trainable
    /// parameter.
    pub fn backward(&self, loss: Var) -> Vec<(ParamId, Tensor)> {
        let mut grads = self.tape.backward(loss);
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .filter_map(|(i, v)| grads.take(v).map(|g| (ParamId::from_index(i), g)))
            .collect()
    }
}
