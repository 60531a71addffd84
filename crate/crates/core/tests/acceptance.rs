//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line. A global lock runs them one at a time
//! so the runtime budgets are measured without contention.

mod common;

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ctqwformer::gradcheck::{self, random_graph};
use ctqwformer::model::{Ablation, Model, ModelConfig};
use ctqwformer::parallel::Execution;
use ctqwformer::qwe::{build_hamiltonian, simulate_ctqw, Hamiltonian};
use ctqwformer::qwgt::{qwgt_layer, QwgtParams, StructuralBias};
use ctqwformer::tensor::{cexpm_minus_iht, symmetric_eig, ParamStore, Tape, Tensor};
use ctqwformer::trainer::{cross_validate, fit, run_ablation, CVResult, TrainConfig};
use ctqwformer::tu_io::{augment_degree_features, parse_tu_dataset, Dataset, Graph};
use rand::seq::SliceRandom;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, name: &str, passed: bool, detail: String) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("criterion {id}: {verdict} {name}: {detail}");
    assert!(passed, "criterion {id} ({name}) failed: {detail}");
}

fn data_root() -> PathBuf {
    std::env::var_os("CTQW_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn load(name: &str) -> Option<Dataset> {
    let root = data_root();
    if !root.join(name).is_dir() {
        return None;
    }
    Some(augment_degree_features(&parse_tu_dataset(&root, name).expect("dataset parses")))
}

fn unit_laplacian(edges: &[(usize, usize)], n: usize) -> Tensor {
    let g = Graph::new(n, edges.iter().copied(), Tensor::zeros(&[n, 1]), 0).unwrap();
    let tape = Tape::new(0);
    let directed = g.directed_edges();
    build_hamiltonian(&tape, tape.constant(Tensor::full(&[directed.len()], 1.0)), &directed, n)
        .matrix
        .value()
}

fn walk(h: &Tensor, t: f64) -> Tensor {
    let tape = Tape::new(0);
    cexpm_minus_iht(tape.constant(h.clone()), t).unwrap().abs_squared().value()
}

#[test]
fn criterion_1_analytic_walks() {
    let _g = serial();
    let start = Instant::now();
    let path = unit_laplacian(&[(0, 1)], 2);
    let triangle = unit_laplacian(&[(0, 1), (1, 2), (0, 2)], 3);
    let mut worst: f64 = 0.0;
    for t in [0.5, 1.0, 2.0, 3.0] {
        let p = walk(&path, t);
        for i in 0..2 {
            worst = worst.max((p.at(i, i) - t.cos().powi(2)).abs());
            worst = worst.max((p.at(1 - i, i) - t.sin().powi(2)).abs());
        }
        let p = walk(&triangle, t);
        let want = (5.0 + 4.0 * (3.0 * t).cos()) / 9.0;
        for i in 0..3 {
            worst = worst.max((p.at(i, i) - want).abs());
        }
    }
    let elapsed = start.elapsed();
    report(
        "1",
        "analytic path and triangle walks",
        worst <= 1e-8 && elapsed < Duration::from_secs(1),
        format!("max abs error {worst:.2e} (tol 1e-8), {elapsed:.2?} (budget 1 s)"),
    );
}

#[test]
fn criterion_2_spectral_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = common::rng(2024);
    let (mut oracle, mut unitarity, mut column, mut symmetry) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let p = rng.random_range(0.2..0.9);
        let h = common::random_laplacian(&mut rng, n, p);
        let t = rng.random_range(0.0..=8.0);
        let tape = Tape::new(0);
        let u = cexpm_minus_iht(tape.constant(h.clone()), t).unwrap();
        let value = u.value();
        oracle = oracle.max(value.max_abs_diff(&symmetric_eig(&h).unwrap().evolution(t)));
        unitarity = unitarity.max(value.unitarity_defect());
        let p = u.abs_squared().value();
        for j in 0..n {
            let s: f64 = (0..n).map(|i| p.at(i, j)).sum();
            column = column.max((s - 1.0).abs());
        }
        symmetry = symmetry.max(p.asymmetry());
    }
    let elapsed = start.elapsed();
    let passed = oracle <= 1e-9
        && unitarity <= 1e-8
        && column <= 1e-8
        && symmetry <= 1e-8
        && elapsed < Duration::from_secs(30);
    report(
        "2",
        "exponential against eigendecomposition oracle",
        passed,
        format!(
            "oracle {oracle:.2e} (1e-9), unitarity {unitarity:.2e} (1e-8), column sums {column:.2e} (1e-8), \
             symmetry {symmetry:.2e} (1e-8), {elapsed:.2?} (budget 30 s)"
        ),
    );
}

fn mutag_shaped_config() -> ModelConfig {
    // 7 one-hot atom labels plus the degree feature
    ModelConfig::new(8, 2)
}

#[test]
fn criterion_3_full_model_gradients() {
    let _g = serial();
    let start = Instant::now();
    let (model, store) = Model::init(&mutag_shaped_config(), 3).unwrap();
    let graph = random_graph(6, 8, 2, 3);
    let r = gradcheck::check_model(
        &model,
        &store,
        &graph,
        gradcheck::DEFAULT_EPS,
        gradcheck::DEFAULT_THRESHOLD,
        3,
        Execution::Parallel,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let worst: Vec<String> = r
        .worst
        .iter()
        .map(|c| format!("{}[{}] {:.1e}", c.parameter, c.index, c.rel_err))
        .collect();
    report(
        "3",
        "full-model finite differences",
        r.passed() && elapsed < Duration::from_secs(300),
        format!(
            "{}/{} coordinates within 1e-4 ({:.3}%, need 99%), worst: {}; {elapsed:.2?} (budget 5 min)",
            r.within,
            r.total,
            100.0 * r.fraction_within(),
            worst.join(", ")
        ),
    );
}

#[test]
fn criterion_4_permutation_invariance() {
    let _g = serial();
    let start = Instant::now();
    let (model, store) = Model::init(&mutag_shaped_config(), 4).unwrap();
    let mut rng = common::rng(4);
    let mut worst: f64 = 0.0;
    for pair in 0..50 {
        let n = rng.random_range(2..=28);
        let graph = random_graph(n, 8, 2, 1000 + pair);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = model.logits(&store, &graph).unwrap();
        let b = model.logits(&store, &graph.permuted(&perm)).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    let elapsed = start.elapsed();
    report(
        "4",
        "permutation invariance of logits",
        worst <= 1e-6 && elapsed < Duration::from_secs(120),
        format!("max logit difference {worst:.2e} over 50 pairs (tol 1e-6), {elapsed:.2?} (budget 2 min)"),
    );
}

#[test]
fn criterion_5_constant_bias_shift() {
    let _g = serial();
    let cfg = mutag_shaped_config();
    let mut store = ParamStore::new();
    let mut rng = common::rng(5);
    let params = QwgtParams::new(&mut store, "layer", cfg.hidden, cfg.heads, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let h = common::random_tensor(&mut rng, &[n, cfg.hidden], -2.0, 2.0);
        let c = rng.random_range(-5.0..5.0);
        let run = |bias: Option<Tensor>| {
            let tape = Tape::new(0);
            let b = bias.map(|m| StructuralBias {
                matrix: tape.constant(m),
            });
            qwgt_layer(&tape, &store, &params, tape.constant(h.clone()), b.as_ref(), cfg.dropout, false).value()
        };
        let zero = run(Some(Tensor::zeros(&[n, n])));
        let constant = run(Some(Tensor::full(&[n, n], c)));
        worst = worst.max(zero.max_abs_diff(&constant));
    }
    report(
        "5",
        "constant structural bias matches zero bias",
        worst <= 1e-12,
        format!("max output difference {worst:.2e} over 50 inputs (tol 1e-12)"),
    );
}

#[test]
fn criterion_6_overfit_sixteen_graphs() {
    let _g = serial();
    let Some(mutag) = load("MUTAG") else {
        report("6", "overfit smoke", false, format!("MUTAG not found under {}", data_root().display()));
        return;
    };
    let start = Instant::now();
    let mut rng = common::rng(6);
    let mut picked = Vec::new();
    for class in 0..2 {
        let mut members: Vec<usize> = (0..mutag.len()).filter(|&i| mutag.graphs[i].label == class).collect();
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..8]);
    }
    let subset: Vec<&Graph> = picked.iter().map(|&i| &mutag.graphs[i]).collect();
    let cfg = ModelConfig::new(mutag.feature_dim, mutag.num_classes);
    let (model, store) = Model::init(&cfg, 6).unwrap();
    // the subset is both training and selection set; run the full budget
    let train_cfg = TrainConfig {
        epochs: 300,
        patience: 300,
        ..TrainConfig::default()
    };
    let outcome = fit(&model, store, &subset, &subset, &train_cfg, 6, Execution::Parallel).unwrap();
    let first_perfect = outcome.history.iter().find(|e| e.val_accuracy == 1.0).map(|e| e.epoch);
    let elapsed = start.elapsed();
    report(
        "6",
        "overfit a balanced 16-graph MUTAG subset",
        first_perfect.is_some() && elapsed < Duration::from_secs(600),
        format!(
            "first epoch at 100% train accuracy: {first_perfect:?}, best {:.3}; {elapsed:.2?} (budget 10 min)",
            outcome.best_val_accuracy
        ),
    );
}

static FULL_MUTAG: OnceLock<Option<CVResult>> = OnceLock::new();

fn full_mutag() -> Option<&'static CVResult> {
    FULL_MUTAG
        .get_or_init(|| {
            let mutag = load("MUTAG")?;
            let cfg = ModelConfig::new(mutag.feature_dim, mutag.num_classes);
            Some(cross_validate(&mutag, &cfg, &TrainConfig::default(), Execution::Parallel).unwrap())
        })
        .as_ref()
}

fn folds(r: &CVResult) -> String {
    let f: Vec<String> = r.fold_accuracies.iter().map(|a| format!("{:.3}", a)).collect();
    format!("[{}]", f.join(" "))
}

#[test]
fn criterion_7_mutag_reproduction() {
    let _g = serial();
    let Some(r) = full_mutag() else {
        report("7", "MUTAG 10-fold accuracy", false, format!("MUTAG not found under {}", data_root().display()));
        return;
    };
    assert!(r.is_consistent());
    let mutag_ok = r.mean >= 0.85 && r.seconds <= 45.0 * 60.0;
    let mutag_line = format!(
        "MUTAG {:.2} ± {:.2} (floor 85.00; reference 92.54 ± 5.39), folds {}, {:.0} s (budget 2700 s)",
        100.0 * r.mean,
        100.0 * r.std,
        folds(r),
        r.seconds
    );
    let ptc_line = match load("PTC_MR") {
        None => "PTC_MR UNVERIFIED: dataset not present".to_string(),
        Some(ptc) => {
            let cfg = ModelConfig::new(ptc.feature_dim, ptc.num_classes);
            let p = cross_validate(&ptc, &cfg, &TrainConfig::default(), Execution::Parallel).unwrap();
            let ok = p.mean >= 0.60;
            println!(
                "criterion 7b: {} PTC_MR {:.2} ± {:.2} (floor 60.00; reference 69.16 ± 5.17)",
                if ok { "PASS" } else { "FAIL" },
                100.0 * p.mean,
                100.0 * p.std
            );
            assert!(ok, "PTC_MR mean {:.4} below 0.60", p.mean);
            format!("PTC_MR {:.2}", 100.0 * p.mean)
        }
    };
    report("7", "desk-scale reproduction", mutag_ok, format!("{mutag_line}; {ptc_line}"));
}

#[test]
fn criterion_8_ablation_ordering() {
    let _g = serial();
    let Some(full) = full_mutag() else {
        report("8", "ablation ordering", false, format!("MUTAG not found under {}", data_root().display()));
        return;
    };
    let mutag = load("MUTAG").unwrap();
    let cfg = ModelConfig::new(mutag.feature_dim, mutag.num_classes);
    let tc = TrainConfig::default();
    let no_qwgt = run_ablation(&mutag, &cfg, &tc, Ablation::NoQwgt, Execution::Parallel).unwrap();
    let no_qwgr = run_ablation(&mutag, &cfg, &tc, Ablation::NoQwgr, Execution::Parallel).unwrap();
    let ordered = full.mean > no_qwgt.mean && no_qwgt.mean > no_qwgr.mean;
    let gap = full.mean - no_qwgr.mean;
    report(
        "8",
        "ablation ordering full > w/o QWGT > w/o QWGR",
        ordered && gap >= 0.05,
        format!(
            "full {:.2}, w/o QWGT {:.2}, w/o QWGR {:.2}, full minus w/o QWGR {:.2} points (need ≥ 5; reference 92.54 / 89.39 / 74.97)",
            100.0 * full.mean,
            100.0 * no_qwgt.mean,
            100.0 * no_qwgr.mean,
            100.0 * gap
        ),
    );
}

/// Full-scale tables are out of scope; this measures the cubic simulation
/// cost and extrapolates it to the largest DD graph to document why.
#[test]
fn criterion_9_full_scale_out_of_scope() {
    let _g = serial();
    let mut rng = common::rng(9);
    let sizes = [32usize, 64, 128];
    let mut seconds = Vec::new();
    for &n in &sizes {
        let h = common::random_laplacian(&mut rng, n, 0.1);
        let tape = Tape::new(0);
        let ham = Hamiltonian {
            matrix: tape.constant(h),
        };
        let start = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            let evo = simulate_ctqw(&ham, 4).unwrap();
            std::hint::black_box(evo.last().value());
        }
        seconds.push(start.elapsed().as_secs_f64() / reps as f64);
    }
    let exponent = (seconds[2] / seconds[1]).ln() / 2f64.ln();
    let per_graph = seconds[2] * (5748.0f64 / 128.0).powi(3);
    report(
        "9",
        "full-scale tables and DD timing are out of desk scope",
        seconds.iter().all(|s| s.is_finite() && *s > 0.0),
        format!(
            "T=4 simulation {:.2e} / {:.2e} / {:.2e} s at n = 32 / 64 / 128 (empirical exponent {exponent:.2}); \
             cubic extrapolation to DD's 5748-node graph: ~{per_graph:.0} s per forward simulation alone; \
             criteria 1-6 serve as the property-based substitute",
            seconds[0], seconds[1], seconds[2]
        ),
    );
}
