//! Temporal encoder over per-node return probabilities.
//!
//! Each node's series `s_i[t] = P(t)_ii` is lifted to `h_g` channels, read by
//! a forward and a backward GRU (all nodes batched as rows), and the final
//! states of both directions are concatenated, mean-pooled over nodes and
//! passed through a two-layer FFN.

use rand::Rng;

use crate::nn::Linear;
use crate::qwe::Evolution;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Gate weights of one GRU direction. Input maps carry the gate biases.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub update_in: Linear,
    pub update_rec: Linear,
    pub reset_in: Linear,
    pub reset_rec: Linear,
    pub candidate_in: Linear,
    pub candidate_rec: Linear,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) -> Self {
        let lin = |store: &mut ParamStore, name: &str, bias: bool, rng: &mut _| {
            Linear::new(store, &format!("{prefix}.{name}"), width, width, bias, rng)
        };
        GruParams {
            update_in: lin(store, "w_z", true, rng),
            update_rec: lin(store, "u_z", false, rng),
            reset_in: lin(store, "w_r", true, rng),
            reset_rec: lin(store, "u_r", false, rng),
            candidate_in: lin(store, "w_h", true, rng),
            candidate_rec: lin(store, "u_h", false, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QwgrParams {
    pub input: Linear,
    pub forward: GruParams,
    pub backward: GruParams,
    pub readout_hidden: Linear,
    pub readout_out: Linear,
}

impl QwgrParams {
    pub fn new(store: &mut ParamStore, prefix: &str, gru_width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        QwgrParams {
            input: Linear::new(store, &format!("{prefix}.input"), 1, gru_width, true, rng),
            forward: GruParams::new(store, &format!("{prefix}.gru_fwd"), gru_width, rng),
            backward: GruParams::new(store, &format!("{prefix}.gru_bwd"), gru_width, rng),
            readout_hidden: Linear::new(store, &format!("{prefix}.readout.0"), 2 * gru_width, hidden, true, rng),
            readout_out: Linear::new(store, &format!("{prefix}.readout.1"), hidden, hidden, true, rng),
        }
    }

    pub fn gru_width(&self, store: &ParamStore) -> usize {
        self.input.out_dim(store)
    }
}

/// `n × T` matrix of return probabilities.
pub fn extract_diagonals<'t>(evolution: &Evolution<'t>) -> Var<'t> {
    let columns: Vec<Var<'t>> = evolution
        .slices
        .iter()
        .map(|p| {
            let n = p.shape()[0];
            p.diagonal().reshape(&[n, 1])
        })
        .collect();
    Var::concat(&columns, 1)
}

/// One GRU step for a batch of rows:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell<'t>(tape: &'t Tape, store: &ParamStore, p: &GruParams, x: Var<'t>, h_prev: Var<'t>) -> Var<'t> {
    let gates = InputGates::project(tape, store, p, x);
    gru_step(tape, store, p, gates, Some(h_prev))
}

/// Input-side gate pre-activations `W x + b` for a block of rows.
#[derive(Clone, Copy)]
struct InputGates<'t> {
    update: Var<'t>,
    reset: Var<'t>,
    candidate: Var<'t>,
}

impl<'t> InputGates<'t> {
    fn project(tape: &'t Tape, store: &ParamStore, p: &GruParams, x: Var<'t>) -> Self {
        InputGates {
            update: p.update_in.forward(tape, store, x),
            reset: p.reset_in.forward(tape, store, x),
            candidate: p.candidate_in.forward(tape, store, x),
        }
    }

    fn rows(&self, start: usize, len: usize) -> Self {
        InputGates {
            update: self.update.slice(0, start, len),
            reset: self.reset.slice(0, start, len),
            candidate: self.candidate.slice(0, start, len),
        }
    }
}

/// `h_prev = None` stands for the zero state, where every recurrent term
/// vanishes: `h' = z ⊙ tanh(W_h x + b_h)`.
fn gru_step<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &GruParams,
    gates: InputGates<'t>,
    h_prev: Option<Var<'t>>,
) -> Var<'t> {
    tape.bump(|s| s.gru_cell_calls += 1);
    let Some(h) = h_prev else {
        return gates.update.sigmoid() * gates.candidate.tanh();
    };
    let z = (gates.update + p.update_rec.forward(tape, store, h)).sigmoid();
    let r = (gates.reset + p.reset_rec.forward(tape, store, h)).sigmoid();
    let candidate = (gates.candidate + p.candidate_rec.forward(tape, store, r * h)).tanh();
    h + z * (candidate - h)
}

/// Final forward and backward states per node, `n × 2h_g`, both directions
/// starting from the zero state.
pub fn encode_temporal<'t>(tape: &'t Tape, store: &ParamStore, params: &QwgrParams, series: Var<'t>) -> Var<'t> {
    let shape = series.shape();
    let (n, steps) = (shape[0], shape[1]);
    // time-major rows: step t occupies rows t·n .. (t+1)·n
    let lifted = params.input.forward(tape, store, series.transpose().reshape(&[n * steps, 1]));
    let run = |p: &GruParams, order: &mut dyn Iterator<Item = usize>| {
        let gates = InputGates::project(tape, store, p, lifted);
        order.fold(None, |h, t| Some(gru_step(tape, store, p, gates.rows(t * n, n), h)))
    };
    let fwd = run(&params.forward, &mut (0..steps));
    let bwd = run(&params.backward, &mut (0..steps).rev());
    match (fwd, bwd) {
        (Some(f), Some(b)) => Var::concat(&[f, b], 1),
        _ => {
            let width = params.gru_width(store);
            tape.constant(Tensor::zeros(&[n, 2 * width]))
        }
    }
}

/// `FFN(mean over nodes)`, a vector of width `h`.
pub fn graph_readout<'t>(tape: &'t Tape, store: &ParamStore, params: &QwgrParams, node_states: Var<'t>) -> Var<'t> {
    let width = node_states.shape()[1];
    let pooled = node_states.mean(0).reshape(&[1, width]);
    let hidden = params.readout_hidden.forward(tape, store, pooled).relu();
    let out = params.readout_out.forward(tape, store, hidden);
    let h = out.shape()[1];
    out.reshape(&[h])
}
