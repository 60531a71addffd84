//! Graph transformer layer with a walk-derived attention bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamStore, Tape, Var};

/// Expansion factor of the feed-forward block.
pub const FFN_EXPANSION: usize = 4;

/// Additive attention bias `B = ln(1 + P̂)`, `P̂` the column-normalized
/// final-step walk probabilities.
#[derive(Debug, Clone, Copy)]
pub struct StructuralBias<'t> {
    pub matrix: Var<'t>,
}

pub fn structural_bias(p_final: Var<'_>) -> Result<StructuralBias<'_>> {
    let col_sums = p_final.sum(0);
    if let Some(s) = col_sums.with_value(|v| v.data().iter().copied().find(|&s| !(s > 1e-12))) {
        return Err(Error::Contract(format!(
            "walk probability column sums to {s:e}; evolution tensor is corrupt"
        )));
    }
    // [n, n] / [n] divides column j by its sum
    let normalized = p_final / col_sums;
    Ok(StructuralBias {
        matrix: normalized.add_scalar(1.0).log()?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct QwgtParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_ffn: LayerNorm,
}

impl QwgtParams {
    pub fn new(store: &mut ParamStore, prefix: &str, hidden: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden width {hidden} is not divisible by {heads} attention heads"
            )));
        }
        let wide = FFN_EXPANSION * hidden;
        Ok(QwgtParams {
            heads,
            query: Linear::new(store, &format!("{prefix}.w_q"), hidden, hidden, false, rng),
            key: Linear::new(store, &format!("{prefix}.w_k"), hidden, hidden, false, rng),
            value: Linear::new(store, &format!("{prefix}.w_v"), hidden, hidden, false, rng),
            output: Linear::new(store, &format!("{prefix}.w_o"), hidden, hidden, true, rng),
            norm_attn: LayerNorm::new(store, &format!("{prefix}.norm_attn"), hidden, rng),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn.0"), hidden, wide, true, rng),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn.1"), wide, hidden, true, rng),
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm_ffn"), hidden, rng),
        })
    }
}

/// Per-head attention matrices `softmax(Q_h K_hᵀ / sqrt(d_h) + B)` and the
/// value projection they act on.
pub fn attention_weights<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &QwgtParams,
    h: Var<'t>,
    bias: Option<&StructuralBias<'t>>,
) -> (Vec<Var<'t>>, Var<'t>) {
    let width = h.shape()[1];
    let head_dim = width / params.heads;
    let q = params.query.forward(tape, store, h);
    let k = params.key.forward(tape, store, h);
    let v = params.value.forward(tape, store, h);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let weights = (0..params.heads)
        .map(|head| {
            let qh = q.slice(1, head * head_dim, head_dim);
            let kh = k.slice(1, head * head_dim, head_dim);
            let scores = qh.matmul(kh.transpose()).scale(scale);
            let scores = match bias {
                Some(b) => scores + b.matrix,
                None => scores,
            };
            scores.softmax()
        })
        .collect();
    (weights, v)
}

/// Attention → add & norm → FFN → add & norm. Node-level in, node-level out.
pub fn qwgt_layer<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &QwgtParams,
    h: Var<'t>,
    bias: Option<&StructuralBias<'t>>,
    dropout: f64,
    train: bool,
) -> Var<'t> {
    let head_dim = h.shape()[1] / params.heads;
    let (weights, v) = attention_weights(tape, store, params, h, bias);
    let heads: Vec<Var<'t>> = weights
        .iter()
        .enumerate()
        .map(|(i, a)| a.matmul(v.slice(1, i * head_dim, head_dim)))
        .collect();
    let attended = params
        .output
        .forward(tape, store, Var::concat(&heads, 1))
        .dropout(dropout, train);
    let x = params.norm_attn.forward(tape, store, h + attended);
    let inner = params.ffn_in.forward(tape, store, x).relu().dropout(dropout, train);
    let ffn = params.ffn_out.forward(tape, store, inner);
    params.norm_ffn.forward(tape, store, x + ffn)
}
