//! Small parameterized building blocks shared by the model stages.

use rand::Rng;

use crate::tensor::{ParamId, ParamInit, ParamStore, Tape, Var};

/// Affine map `x·W (+ b)` with `W: in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.create(
            format!("{name}.weight"),
            &[inp, out],
            ParamInit::Glorot { fan_in: inp, fan_out: out },
            rng,
        );
        let bias = bias.then(|| store.create(format!("{name}.bias"), &[out], ParamInit::Zeros, rng));
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, self.weight));
        match self.bias {
            Some(b) => y + tape.param(store, b),
            None => y,
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            scale: store.create(format!("{name}.scale"), &[width], ParamInit::Ones, rng),
            shift: store.create(format!("{name}.shift"), &[width], ParamInit::Zeros, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.layer_norm(
            tape.param(store, self.scale),
            tape.param(store, self.shift),
            crate::model::LAYER_NORM_EPS,
        )
    }
}
