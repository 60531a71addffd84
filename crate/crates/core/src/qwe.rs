//! Quantum walk encoder.
//!
//! Node features are embedded by a small MLP; an edge MLP scores both
//! orientations of every edge from the concatenated endpoint embeddings;
//! the symmetrized scores form a weighted Laplacian `H = D' − A_sym`,
//! and `|exp(−iHt)|²` for `t = 1..T` gives one column-stochastic matrix per
//! time step (column `j` is the distribution of a walker started at `j`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{cexpm_minus_iht, cmatmul, symmetric_eig, ParamStore, Tape, Tensor, Var};
use crate::tu_io::Graph;

#[derive(Debug, Clone, Copy)]
pub struct QweParams {
    pub embed_hidden: Linear,
    pub embed_out: Linear,
    /// `2h → h_e`, no bias.
    pub edge_hidden: Linear,
    /// `h_e → 1`, no bias.
    pub edge_out: Linear,
}

impl QweParams {
    pub fn new(store: &mut ParamStore, feature_dim: usize, hidden: usize, edge_hidden: usize, rng: &mut impl Rng) -> Self {
        QweParams {
            embed_hidden: Linear::new(store, "qwe.embed.0", feature_dim, hidden, true, rng),
            embed_out: Linear::new(store, "qwe.embed.1", hidden, hidden, true, rng),
            edge_hidden: Linear::new(store, "qwe.edge_mlp.0", 2 * hidden, edge_hidden, false, rng),
            edge_out: Linear::new(store, "qwe.edge_mlp.1", edge_hidden, 1, false, rng),
        }
    }

    /// Looks the encoder up by name in a loaded checkpoint.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            store
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let linear = |prefix: &str, bias: bool| -> Result<Linear> {
            Ok(Linear {
                weight: id(&format!("{prefix}.weight"))?,
                bias: if bias { Some(id(&format!("{prefix}.bias"))?) } else { None },
            })
        };
        Ok(QweParams {
            embed_hidden: linear("qwe.embed.0", true)?,
            embed_out: linear("qwe.embed.1", true)?,
            edge_hidden: linear("qwe.edge_mlp.0", false)?,
            edge_out: linear("qwe.edge_mlp.1", false)?,
        })
    }
}

/// `H⁽⁰⁾ = W₂·relu(W₁·X + b₁) + b₂`, shape `n × h`.
pub fn initial_embeddings<'t>(tape: &'t Tape, store: &ParamStore, params: &QweParams, x: Var<'t>) -> Result<Var<'t>> {
    let want = params.embed_hidden.in_dim(store);
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::Contract(format!(
            "node features {shape:?} do not match feature_dim {want}"
        )));
    }
    let hidden = params.embed_hidden.forward(tape, store, x).relu();
    Ok(params.embed_out.forward(tape, store, hidden))
}

/// `w_ij = sigmoid(W₂·relu(W₁·[h_i ‖ h_j]))` for each directed pair, as a
/// vector aligned with `directed`.
pub fn edge_weights<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &QweParams,
    h0: Var<'t>,
    directed: &[(usize, usize)],
) -> Var<'t> {
    let m = directed.len();
    if m == 0 {
        return tape.constant(Tensor::zeros(&[0]));
    }
    let src: Vec<usize> = directed.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = directed.iter().map(|e| e.1).collect();
    let pair = Var::concat(&[h0.gather_rows(&src), h0.gather_rows(&dst)], 1);
    let hidden = params.edge_hidden.forward(tape, store, pair).relu();
    params
        .edge_out
        .forward(tape, store, hidden)
        .sigmoid()
        .reshape(&[m])
}

/// Trainable Laplacian Hamiltonian on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Hamiltonian<'t> {
    pub matrix: Var<'t>,
}

/// `W` from directed weights, `A = (W + Wᵀ)/2`, `H = diag(A·1) − A`.
pub fn build_hamiltonian<'t>(tape: &'t Tape, weights: Var<'t>, directed: &[(usize, usize)], n: usize) -> Hamiltonian<'t> {
    if directed.is_empty() {
        return Hamiltonian {
            matrix: tape.constant(Tensor::zeros(&[n, n])),
        };
    }
    let w = weights.scatter_matrix(directed, n, n);
    let a = (w + w.transpose()).scale(0.5);
    let degree = a.sum(1).diag_embed();
    Hamiltonian { matrix: degree - a }
}

/// Diagnostics of a Hamiltonian's defining properties.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianReport {
    pub asymmetry: f64,
    pub max_abs_row_sum: f64,
    pub min_eigenvalue: f64,
    /// Smallest and largest off-diagonal entry.
    pub off_diagonal_range: (f64, f64),
}

impl HamiltonianReport {
    pub fn of(h: &Tensor) -> Result<Self> {
        let n = h.rows();
        let mut max_abs_row_sum: f64 = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += h.at(i, j);
                if i != j {
                    lo = lo.min(h.at(i, j));
                    hi = hi.max(h.at(i, j));
                }
            }
            max_abs_row_sum = max_abs_row_sum.max(s.abs());
        }
        if n < 2 {
            (lo, hi) = (0.0, 0.0);
        }
        let eig = symmetric_eig(h)?;
        Ok(HamiltonianReport {
            asymmetry: h.asymmetry(),
            max_abs_row_sum,
            min_eigenvalue: eig.values.first().copied().unwrap_or(0.0),
            off_diagonal_range: (lo, hi),
        })
    }

    /// Symmetric, zero row sums, PSD, off-diagonals in `[−1, 0]`.
    pub fn is_valid(&self) -> bool {
        self.asymmetry <= 1e-10
            && self.max_abs_row_sum <= 1e-9
            && self.min_eigenvalue >= -1e-8
            && self.off_diagonal_range.0 >= -1.0
            && self.off_diagonal_range.1 <= 0.0
    }
}

/// `P(t) = |U(t)|²` for `t = 1..T`, on the tape.
#[derive(Debug, Clone)]
pub struct Evolution<'t> {
    pub slices: Vec<Var<'t>>,
}

impl<'t> Evolution<'t> {
    pub fn steps(&self) -> usize {
        self.slices.len()
    }

    pub fn last(&self) -> Var<'t> {
        *self.slices.last().expect("evolution has at least one step")
    }

    pub fn to_tensor(&self) -> EvolutionTensor {
        let n = self.slices[0].shape()[0];
        let mut data = Vec::with_capacity(self.slices.len() * n * n);
        for s in &self.slices {
            s.with_value(|v| data.extend_from_slice(v.data()));
        }
        EvolutionTensor {
            probs: Tensor::new(&[self.slices.len(), n, n], data),
            time_grid: (1..=self.slices.len()).map(|t| t as f64).collect(),
        }
    }
}

/// Computes `U(1)` once and obtains `U(t) = U(t−1)·U(1)`.
pub fn simulate_ctqw<'t>(hamiltonian: &Hamiltonian<'t>, steps: usize) -> Result<Evolution<'t>> {
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    let tape = hamiltonian.matrix.tape();
    tape.bump(|s| s.ctqw_simulations += 1);
    let u1 = cexpm_minus_iht(hamiltonian.matrix, 1.0)?;
    let mut slices = Vec::with_capacity(steps);
    let mut u = u1;
    slices.push(u.abs_squared());
    for _ in 1..steps {
        u = cmatmul(&u, &u1);
        slices.push(u.abs_squared());
    }
    Ok(Evolution { slices })
}

/// Everything the later stages need from the encoder.
#[derive(Debug, Clone)]
pub struct Encoded<'t> {
    pub h0: Var<'t>,
    pub hamiltonian: Hamiltonian<'t>,
    pub evolution: Evolution<'t>,
}

pub fn encode<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &QweParams,
    graph: &Graph,
    steps: usize,
) -> Result<Encoded<'t>> {
    let x = tape.constant(graph.features.clone());
    let h0 = initial_embeddings(tape, store, params, x)?;
    let directed = graph.directed_edges();
    let w = edge_weights(tape, store, params, h0, &directed);
    let hamiltonian = build_hamiltonian(tape, w, &directed, graph.node_count);
    let evolution = simulate_ctqw(&hamiltonian, steps)?;
    Ok(Encoded {
        h0,
        hamiltonian,
        evolution,
    })
}

/// Plain `T × n × n` evolution tensor with its time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionTensor {
    pub probs: Tensor,
    pub time_grid: Vec<f64>,
}

impl EvolutionTensor {
    pub fn steps(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Probability of finding the walker at `i` at step `t` (0-based index
    /// into the time grid) after starting at `j`; clamped to `[0, 1]`.
    pub fn prob(&self, t: usize, i: usize, j: usize) -> f64 {
        let n = self.nodes();
        self.probs.data()[(t * n + i) * n + j].clamp(0.0, 1.0)
    }

    pub fn slice(&self, t: usize) -> Tensor {
        let n = self.nodes();
        Tensor::new(&[n, n], self.probs.data()[t * n * n..(t + 1) * n * n].to_vec())
    }

    /// Largest `|Σ_i P(t)_ij − 1|`.
    pub fn column_sum_deviation(&self) -> f64 {
        let n = self.nodes();
        let mut worst: f64 = 0.0;
        for t in 0..self.steps() {
            for j in 0..n {
                let s: f64 = (0..n).map(|i| self.probs.data()[(t * n + i) * n + j]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    pub fn symmetry_deviation(&self) -> f64 {
        (0..self.steps()).map(|t| self.slice(t).asymmetry()).fold(0.0, f64::max)
    }

    /// Entries furthest outside `[0, 1]` (0 when all are inside).
    pub fn range_violation(&self) -> f64 {
        self.probs
            .data()
            .iter()
            .map(|&p| (-p).max(p - 1.0).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edgeless_hamiltonian_is_zero_and_walk_stays() {
        let tape = Tape::new(0);
        let h = build_hamiltonian(&tape, tape.constant(Tensor::zeros(&[0])), &[], 3);
        assert_eq!(h.matrix.value(), Tensor::zeros(&[3, 3]));
        let p = simulate_ctqw(&h, 4).unwrap().to_tensor();
        for t in 0..4 {
            assert_eq!(p.slice(t), Tensor::eye(3));
        }
    }

    #[test]
    fn single_unit_edge() {
        let tape = Tape::new(0);
        let w = tape.constant(Tensor::full(&[2], 1.0));
        let h = build_hamiltonian(&tape, w, &[(0, 1), (1, 0)], 2);
        assert_eq!(h.matrix.value(), Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));
    }

    #[test]
    fn unit_triangle_spectrum() {
        let tape = Tape::new(0);
        let directed = [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)];
        let h = build_hamiltonian(&tape, tape.constant(Tensor::full(&[6], 1.0)), &directed, 3).matrix.value();
        let mut expect = Tensor::full(&[3, 3], -1.0);
        for i in 0..3 {
            expect.set(i, i, 2.0);
        }
        assert_eq!(h, expect);
        let eig = symmetric_eig(&h).unwrap();
        for (got, want) in eig.values.iter().zip([0.0, 3.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(HamiltonianReport::of(&h).unwrap().is_valid());
    }

    #[test]
    fn asymmetric_orientation_weights_are_symmetrized() {
        let tape = Tape::new(0);
        let w = tape.constant(Tensor::new(&[2], vec![0.2, 0.6]));
        let h = build_hamiltonian(&tape, w, &[(0, 1), (1, 0)], 2).matrix.value();
        assert!((h.at(0, 1) + 0.4).abs() < 1e-15);
        assert_eq!(h.at(0, 1), h.at(1, 0));
        assert!((h.at(0, 0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_rejected() {
        let tape = Tape::new(0);
        let h = build_hamiltonian(&tape, tape.constant(Tensor::zeros(&[0])), &[], 2);
        assert!(matches!(simulate_ctqw(&h, 0), Err(Error::Config(_))));
    }
}
