mod common;

use ctqwformer::gradcheck::random_graph;
use ctqwformer::qwe::{build_hamiltonian, encode, simulate_ctqw, Evolution, QweParams};
use ctqwformer::qwgr::*;
use ctqwformer::tensor::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn module(gru_width: usize, hidden: usize, seed: u64) -> (ParamStore, QwgrParams) {
    let mut store = ParamStore::new();
    let p = QwgrParams::new(&mut store, "r", gru_width, hidden, &mut common::rng(seed));
    (store, p)
}

fn cell_weights(p: &GruParams) -> Vec<ctqwformer::tensor::ParamId> {
    let mut ids = Vec::new();
    for l in [p.update_in, p.update_rec, p.reset_in, p.reset_rec, p.candidate_in, p.candidate_rec] {
        ids.push(l.weight);
        ids.extend(l.bias);
    }
    ids
}

fn identity_evolution(tape: &Tape, n: usize, steps: usize) -> Evolution<'_> {
    Evolution {
        slices: (0..steps).map(|_| tape.constant(Tensor::eye(n))).collect(),
    }
}

#[test]
fn identity_walk_gives_constant_one_series() {
    let tape = Tape::new(0);
    let s = extract_diagonals(&identity_evolution(&tape, 3, 4)).value();
    assert_eq!(s.shape(), &[3, 4]);
    assert!(s.data().iter().all(|&x| x == 1.0));
}

#[test]
fn two_node_path_series_is_cos_squared() {
    let tape = Tape::new(0);
    let w = tape.constant(Tensor::full(&[2], 1.0));
    let h = build_hamiltonian(&tape, w, &[(0, 1), (1, 0)], 2);
    let s = extract_diagonals(&simulate_ctqw(&h, 5).unwrap()).value();
    for i in 0..2 {
        for t in 1..=5 {
            assert!((s.at(i, t - 1) - (t as f64).cos().powi(2)).abs() <= 1e-8);
        }
    }
}

#[test]
fn zero_cell_halves_the_state() {
    let (mut store, p) = module(3, 4, 1);
    for id in cell_weights(&p.forward) {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let tape = Tape::new(0);
    let x = tape.constant(common::random_tensor(&mut common::rng(2), &[2, 3], -1.0, 1.0));
    let h_prev = common::random_tensor(&mut common::rng(3), &[2, 3], -1.0, 1.0);
    let h = gru_cell(&tape, &store, &p.forward, x, tape.constant(h_prev.clone())).value();
    for (a, b) in h.data().iter().zip(h_prev.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
    let from_rest = gru_cell(&tape, &store, &p.forward, x, tape.constant(Tensor::zeros(&[2, 3]))).value();
    assert!(from_rest.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_dim_cell_matches_hand_unrolled_recurrence() {
    let (mut store, p) = module(2, 4, 1);
    let g = p.forward;
    let set = |store: &mut ParamStore, id, rows: [[f64; 2]; 2]| {
        *store.get_mut(id) = Tensor::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]);
    };
    let wz = [[0.5, -0.3], [0.2, 0.1]];
    let uz = [[0.1, 0.4], [-0.2, 0.3]];
    let wr = [[-0.6, 0.2], [0.3, 0.5]];
    let ur = [[0.2, -0.1], [0.4, 0.2]];
    let wh = [[0.7, 0.1], [-0.4, 0.9]];
    let uh = [[-0.3, 0.6], [0.5, -0.2]];
    let (bz, br, bh) = ([0.1, -0.2], [0.05, 0.3], [-0.1, 0.2]);
    set(&mut store, g.update_in.weight, wz);
    set(&mut store, g.update_rec.weight, uz);
    set(&mut store, g.reset_in.weight, wr);
    set(&mut store, g.reset_rec.weight, ur);
    set(&mut store, g.candidate_in.weight, wh);
    set(&mut store, g.candidate_rec.weight, uh);
    *store.get_mut(g.update_in.bias.unwrap()) = Tensor::new(&[2], bz.to_vec());
    *store.get_mut(g.reset_in.bias.unwrap()) = Tensor::new(&[2], br.to_vec());
    *store.get_mut(g.candidate_in.bias.unwrap()) = Tensor::new(&[2], bh.to_vec());

    // row-vector convention: (x·W)_k = Σ_j x_j W_jk
    let vm = |x: [f64; 2], m: [[f64; 2]; 2]| [x[0] * m[0][0] + x[1] * m[1][0], x[0] * m[0][1] + x[1] * m[1][1]];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let xs = [[0.3, -0.8], [1.2, 0.4]];
    let mut h = [0.0, 0.0];
    for x in xs {
        let (a, b) = (vm(x, wz), vm(h, uz));
        let z = [sig(a[0] + b[0] + bz[0]), sig(a[1] + b[1] + bz[1])];
        let (a, b) = (vm(x, wr), vm(h, ur));
        let r = [sig(a[0] + b[0] + br[0]), sig(a[1] + b[1] + br[1])];
        let a = vm(x, wh);
        let b = vm([r[0] * h[0], r[1] * h[1]], uh);
        let cand = [(a[0] + b[0] + bh[0]).tanh(), (a[1] + b[1] + bh[1]).tanh()];
        h = [
            (1.0 - z[0]) * h[0] + z[0] * cand[0],
            (1.0 - z[1]) * h[1] + z[1] * cand[1],
        ];
    }

    let tape = Tape::new(0);
    let mut state = tape.constant(Tensor::zeros(&[1, 2]));
    for x in xs {
        state = gru_cell(&tape, &store, &g, tape.constant(Tensor::new(&[1, 2], x.to_vec())), state);
    }
    let got = state.value();
    assert!((got.data()[0] - h[0]).abs() < 1e-14 && (got.data()[1] - h[1]).abs() < 1e-14);
    assert_eq!(tape.stats().gru_cell_calls, 2);
}

#[test]
fn single_step_applies_each_direction_once() {
    let (mut store, p) = module(4, 8, 3);
    // same weights in both directions: the two halves must coincide
    for (f, b) in cell_weights(&p.forward).into_iter().zip(cell_weights(&p.backward)) {
        *store.get_mut(b) = store.get(f).clone();
    }
    let tape = Tape::new(0);
    let s = tape.constant(Tensor::new(&[3, 1], vec![0.2, 0.9, 0.5]));
    let out = encode_temporal(&tape, &store, &p, s).value();
    assert_eq!(tape.stats().gru_cell_calls, 2);
    assert_eq!(out.shape(), &[3, 8]);
    for i in 0..3 {
        for c in 0..4 {
            assert_eq!(out.at(i, c), out.at(i, c + 4));
        }
    }
}

#[test]
fn identical_series_give_identical_embeddings() {
    let (store, p) = module(4, 8, 2);
    let row = [0.9, 0.4, 0.6, 0.3];
    let tape = Tape::new(0);
    let s = tape.constant(Tensor::from_rows(&[row.to_vec(), row.to_vec(), row.to_vec()]));
    let out = encode_temporal(&tape, &store, &p, s).value();
    for i in 1..3 {
        for c in 0..8 {
            assert_eq!(out.at(i, c), out.at(0, c));
        }
    }
}

#[test]
fn reversed_series_with_swapped_directions_swaps_halves() {
    let (store, p) = module(5, 8, 7);
    let swapped = QwgrParams {
        forward: p.backward,
        backward: p.forward,
        ..p
    };
    let series = common::random_tensor(&mut common::rng(4), &[4, 6], 0.0, 1.0);
    let mut reversed = Tensor::zeros(&[4, 6]);
    for i in 0..4 {
        for t in 0..6 {
            reversed.set(i, t, series.at(i, 5 - t));
        }
    }
    let tape = Tape::new(0);
    let a = encode_temporal(&tape, &store, &p, tape.constant(series)).value();
    let b = encode_temporal(&tape, &store, &swapped, tape.constant(reversed)).value();
    for i in 0..4 {
        for c in 0..5 {
            assert!((a.at(i, c) - b.at(i, c + 5)).abs() <= 1e-12);
            assert!((a.at(i, c + 5) - b.at(i, c)).abs() <= 1e-12);
        }
    }
}

#[test]
fn readout_ignores_duplication_and_order() {
    let (store, p) = module(3, 8, 5);
    let rows = common::random_tensor(&mut common::rng(6), &[5, 6], -1.0, 1.0);
    let tape = Tape::new(0);
    let base = graph_readout(&tape, &store, &p, tape.constant(rows.clone())).value();
    assert_eq!(base.shape(), &[8]);

    let doubled = Var::concat(&[tape.constant(rows.clone()), tape.constant(rows.clone())], 0);
    let dup = graph_readout(&tape, &store, &p, doubled).value();
    assert!(base.max_abs_diff(&dup) <= 1e-12);

    let order = [3, 0, 4, 1, 2];
    let shuffled = tape.constant(rows.clone()).gather_rows(&order);
    let perm = graph_readout(&tape, &store, &p, shuffled).value();
    assert!(base.max_abs_diff(&perm) <= 1e-12);

    let single = tape.constant(rows.clone()).slice(0, 2, 1);
    let expected = {
        let h = p.readout_hidden.forward(&tape, &store, single).relu();
        p.readout_out.forward(&tape, &store, h).value()
    };
    let one = graph_readout(&tape, &store, &p, single).value();
    assert_eq!(one.data(), expected.data());
}

#[test]
fn relabeling_leaves_module_output_unchanged() {
    // one store for both modules: tapes cache parameters by id
    let mut store = ParamStore::new();
    let qp = QweParams::new(&mut store, 3, 8, 8, &mut common::rng(1));
    let p = QwgrParams::new(&mut store, "r", 6, 12, &mut common::rng(2));
    let mut rng = common::rng(3);
    for seed in 0..10 {
        let n = rng.random_range(2..12);
        let graph = random_graph(n, 3, 2, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let out = |g| {
            let tape = Tape::new(0);
            let e = encode(&tape, &store, &qp, g, 4).unwrap();
            let s = extract_diagonals(&e.evolution);
            graph_readout(&tape, &store, &p, encode_temporal(&tape, &store, &p, s)).value()
        };
        assert!(out(&graph).max_abs_diff(&out(&graph.permuted(&perm))) <= 1e-9);
    }
}

#[test]
fn module_gradients_match_finite_differences() {
    let (store, p) = module(3, 6, 9);
    let series = common::random_tensor(&mut common::rng(1), &[4, 5], 0.0, 1.0);
    let target = common::random_tensor(&mut common::rng(2), &[6], -1.0, 1.0);
    let (total, ok, worst) = common::param_fd_check(
        &store,
        &|store: &ParamStore, tape: &Tape| {
            let states = encode_temporal(tape, store, &p, tape.constant(series.clone()));
            (graph_readout(tape, store, &p, states) * tape.constant(target.clone())).sum_all()
        },
        1e-5,
        1e-4,
    );
    assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}, worst {worst:e}");

    let (total, ok, worst) = common::finite_difference_check(
        std::slice::from_ref(&series),
        &|tape: &Tape, v: &[Var]| {
            let states = encode_temporal(tape, &store, &p, v[0]);
            (graph_readout(tape, &store, &p, states) * tape.constant(target.clone())).sum_all()
        },
        1e-5,
        1e-4,
    );
    assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}, worst {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hidden_states_stay_inside_unit_box(steps in 1usize..10, seed in any::<u64>()) {
        let (store, p) = module(4, 8, seed);
        let mut rng = common::rng(seed ^ 7);
        let tape = Tape::new(0);
        let mut h = tape.constant(Tensor::zeros(&[3, 4]));
        for _ in 0..steps {
            // beyond |arg| ≈ 19 tanh rounds to exactly ±1 in f64
            let scale = rng.random_range(0.1..4.0);
            let x = tape.constant(common::random_tensor(&mut rng, &[3, 4], -scale, scale));
            h = gru_cell(&tape, &store, &p.forward, x, h);
            prop_assert!(h.value().data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn return_series_lie_in_unit_interval(n in 1usize..14, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let qp = QweParams::new(&mut store, 3, 8, 8, &mut common::rng(seed));
        let graph = random_graph(n, 3, 2, seed);
        let tape = Tape::new(0);
        let e = encode(&tape, &store, &qp, &graph, 4).unwrap();
        let s = extract_diagonals(&e.evolution).value();
        prop_assert!(s.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }
}
