//! Central-difference verification of the full model's backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{Model, Owner, Trace};
use crate::parallel::{self, Execution};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::tu_io::Graph;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
/// Fraction of coordinates that must fall within the threshold.
pub const REQUIRED_FRACTION: f64 = 0.99;

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by itself.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Serialize)]
pub struct Coordinate {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub threshold: f64,
    pub total: usize,
    pub within: usize,
    /// Worst coordinates, largest error first (at most five).
    pub worst: Vec<Coordinate>,
}

impl GradcheckReport {
    pub fn fraction_within(&self) -> f64 {
        self.within as f64 / self.total.max(1) as f64
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.worst.first().map_or(0.0, |c| c.rel_err)
    }

    pub fn passed(&self) -> bool {
        self.total > 0 && self.fraction_within() >= REQUIRED_FRACTION
    }
}

/// Random connected graph: a shuffled spanning path plus each remaining pair
/// with probability 0.3; Gaussian-ish features in [−1, 1].
pub fn random_graph(n: usize, feature_dim: usize, num_classes: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut edges: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.3) {
                edges.push((i, j));
            }
        }
    }
    let features: Vec<f64> = (0..n * feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let label = rng.random_range(0..num_classes.max(1));
    Graph::new(n, edges, Tensor::new(&[n, feature_dim], features), label).expect("generated graph is valid")
}

/// Compares backprop against central differences on every coordinate of
/// every parameter. Dropout runs with the fixed `seed`, so both sides see the
/// same masks.
///
/// Each perturbed loss is the full model's loss, but stages upstream of the
/// perturbed parameter (and branches it cannot reach) are taken from one
/// traced unperturbed pass; they are bitwise what a fresh pass would compute.
pub fn check_model(
    model: &Model,
    store: &ParamStore,
    graph: &Graph,
    eps: f64,
    threshold: f64,
    seed: u64,
    exec: Execution,
) -> Result<GradcheckReport> {
    let (_, grads, _) = model.graph_gradients(store, graph, seed, true)?;
    let trace = {
        let tape = Tape::new(seed);
        model.forward_traced(&tape, store, graph, true, None)?.1
    };
    let mut coords: Vec<(usize, usize)> = Vec::with_capacity(store.numel());
    for (id, _, t) in store.iter() {
        coords.extend((0..t.numel()).map(|k| (id.index(), k)));
    }
    let workers = if exec.is_parallel() { rayon_workers() } else { 1 };
    let chunk = coords.len().div_ceil(workers * 8).max(1);
    let chunks: Vec<&[(usize, usize)]> = coords.chunks(chunk).collect();

    let results = parallel::map(exec, &chunks, |part| -> Result<Vec<Coordinate>> {
        let mut local = store.clone();
        let ids: Vec<_> = local.ids().collect();
        let mut out = Vec::with_capacity(part.len());
        for &(p, k) in part.iter() {
            let id = ids[p];
            let owner = Model::owner_of(local.name(id));
            let original = local.get(id).data()[k];
            local.get_mut(id).data_mut()[k] = original + eps;
            let plus = loss_value(model, &local, graph, seed, (&trace, owner))?;
            local.get_mut(id).data_mut()[k] = original - eps;
            let minus = loss_value(model, &local, graph, seed, (&trace, owner))?;
            local.get_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.param(id).map_or(0.0, |g| g[k]);
            out.push(Coordinate {
                parameter: local.name(id).to_string(),
                index: k,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            });
        }
        Ok(out)
    });

    let mut total = 0;
    let mut within = 0;
    let mut worst: Vec<Coordinate> = Vec::new();
    for part in results {
        for c in part? {
            total += 1;
            if c.rel_err <= threshold {
                within += 1;
            }
            worst.push(c);
            if worst.len() > 64 {
                keep_worst(&mut worst);
            }
        }
    }
    keep_worst(&mut worst);
    Ok(GradcheckReport {
        eps,
        threshold,
        total,
        within,
        worst,
    })
}

fn keep_worst(v: &mut Vec<Coordinate>) {
    v.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    v.truncate(5);
}

fn loss_value(model: &Model, store: &ParamStore, graph: &Graph, seed: u64, reuse: (&Trace, Owner)) -> Result<f64> {
    let tape = Tape::new(seed);
    let (logits, _) = model.forward_traced(&tape, store, graph, true, Some(reuse))?;
    Ok(model.loss(logits, graph.label)?.item())
}

fn rayon_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
