use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ctqwformer::gradcheck::{check_model, random_graph};
use ctqwformer::model::{ablate, Ablation, Model};
use ctqwformer::parallel::{configure_threads, Execution};
use ctqwformer::qwe::{build_hamiltonian, edge_weights, initial_embeddings, simulate_ctqw, QweParams};
use ctqwformer::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor};
use ctqwformer::trainer::{
    cross_validate_detailed, fit_to_dataset, fold_csv_rows, run_ablation, sweep, write_atomic, CVResult, SweepGrid,
    FOLD_CSV_HEADER,
};
use ctqwformer::tu_io::{augment_degree_features, parse_tu_dataset, read_fixture, Dataset};
use ctqwformer::{Error, Result, VERSION};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Cli, Command};

struct Context {
    config: RunConfig,
    exec: Execution,
}

impl Context {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.config.output.dir.clone();
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn config_json(&self) -> Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    /// JSON document with the reproducibility header.
    fn document(&self, command: &str, body: Value) -> Value {
        let mut doc = json!({
            "version": VERSION,
            "command": command,
            "config": self.config_json(),
        });
        if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
            d.extend(b);
        }
        doc
    }

    fn csv_preamble(&self, command: &str) -> String {
        format!("# ctqwformer {VERSION} {command} config={}\n", self.config_json())
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let root = self.config.root();
        let raw = parse_tu_dataset(&root, &self.config.dataset.name)?;
        Ok(if self.config.dataset.degree_features {
            augment_degree_features(&raw)
        } else {
            raw
        })
    }

    fn model_config(&self, dataset: &Dataset) -> ctqwformer::model::ModelConfig {
        self.config.model.to_model_config(dataset.feature_dim, dataset.num_classes)
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.resolve_root(cli.dataset_root.clone());
    if let Some(out) = cli.out.clone() {
        config.output.dir = out;
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    configure_threads(cli.threads);
    let ctx = Context {
        config,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match cli.command {
        Command::Cv { save_checkpoints } => cmd_cv(&ctx, save_checkpoints),
        Command::Simulate {
            graph,
            steps,
            checkpoint,
            fixture,
        } => cmd_simulate(&ctx, graph, steps, checkpoint.as_deref(), fixture.as_deref()),
        Command::Gradcheck {
            nodes,
            threshold,
            eps,
            features,
            classes,
        } => cmd_gradcheck(&ctx, nodes, threshold, eps, features, classes),
        Command::Ablate { which } => cmd_ablate(&ctx, &which),
        Command::Sweep { grid, values } => cmd_sweep(&ctx, &grid, values),
    }
}

fn summary_line(r: &CVResult) -> String {
    let tag = r.ablation.as_deref().map(|a| format!(" [{a}]")).unwrap_or_default();
    format!("{}{tag}: {:.2} ± {:.2}", r.dataset, 100.0 * r.mean, 100.0 * r.std)
}

fn write_run(ctx: &Context, command: &str, stem: &str, result: &CVResult) -> Result<()> {
    let dir = ctx.out_dir()?;
    let doc = ctx.document(
        command,
        json!({
            "ablation": result.ablation,
            "result": result,
        }),
    );
    write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
    let csv = format!(
        "{}{FOLD_CSV_HEADER}\n{}",
        ctx.csv_preamble(command),
        fold_csv_rows(stem, result)
    );
    write_atomic(&dir.join(format!("{stem}_folds.csv")), csv.as_bytes())
}

fn cmd_cv(ctx: &Context, save_checkpoints: bool) -> Result<u8> {
    let dataset = ctx.load_dataset()?;
    let model_cfg = ctx.model_config(&dataset);
    let train_cfg = ctx.config.train.to_train_config();
    let (result, outcomes) = cross_validate_detailed(&dataset, &model_cfg, &train_cfg, ctx.exec)?;
    let stem = format!("cv_{}", dataset.name);
    if save_checkpoints {
        let dir = ctx.out_dir()?.join(format!("{stem}_checkpoints"));
        std::fs::create_dir_all(&dir)?;
        for o in &outcomes {
            save_checkpoint(&dir.join(format!("fold_{}.ckpt", o.summary.fold)), &o.params)?;
        }
    }
    write_run(ctx, "cv", &stem, &result)?;
    println!("{}", summary_line(&result));
    Ok(0)
}

fn cmd_ablate(ctx: &Context, which: &[Ablation]) -> Result<u8> {
    let dataset = ctx.load_dataset()?;
    let mut model_cfg = fit_to_dataset(&ctx.model_config(&dataset), &dataset);
    // all but the last removal are applied up front; the last goes through
    // run_ablation so the result carries its name
    let (last, rest) = which.split_last().expect("clap requires one value");
    for &w in rest {
        model_cfg = ablate(&model_cfg, w)?;
    }
    let train_cfg = ctx.config.train.to_train_config();
    let result = run_ablation(&dataset, &model_cfg, &train_cfg, *last, ctx.exec)?;
    write_run(ctx, "ablate", &format!("ablation_{}_{}", dataset.name, last.name()), &result)?;
    println!("{}", summary_line(&result));
    Ok(0)
}

fn cmd_sweep(ctx: &Context, grid: &str, values: Option<Vec<usize>>) -> Result<u8> {
    let grid = match (grid, values) {
        ("time_steps", None) => SweepGrid::time_steps(),
        ("layers", None) => SweepGrid::layers(),
        ("time_steps", Some(v)) => SweepGrid::TimeSteps(v),
        ("layers", Some(v)) => SweepGrid::Layers(v),
        (other, _) => {
            return Err(Error::Config(format!(
                "unknown sweep grid {other:?} (expected time_steps or layers)"
            )))
        }
    };
    let dataset = ctx.load_dataset()?;
    let model_cfg = ctx.model_config(&dataset);
    let train_cfg = ctx.config.train.to_train_config();
    let results = sweep(&dataset, &model_cfg, &train_cfg, &grid, ctx.exec)?;
    let dir = ctx.out_dir()?;
    let param = grid.parameter();
    let mut combined = format!(
        "{}parameter,value,mean,std,seconds,fold_accuracies\n",
        ctx.csv_preamble("sweep")
    );
    for (value, r) in &results {
        let point_ctx = Context {
            config: {
                let mut c = ctx.config.clone();
                match grid {
                    SweepGrid::TimeSteps(_) => c.model.time_steps = *value,
                    SweepGrid::Layers(_) => c.model.layers = *value,
                }
                c
            },
            exec: ctx.exec,
        };
        let doc = point_ctx.document(
            "sweep",
            json!({ "parameter": param, "value": value, "ablation": r.ablation, "result": r }),
        );
        let path = dir.join(format!("sweep_{}_{param}_{value}.json", dataset.name));
        write_atomic(&path, serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
        let folds: Vec<String> = r.fold_accuracies.iter().map(|a| a.to_string()).collect();
        combined.push_str(&format!(
            "{param},{value},{},{},{},{}\n",
            r.mean,
            r.std,
            r.seconds,
            folds.join(";")
        ));
        println!("{param} = {value}: {}", summary_line(r));
    }
    write_atomic(&dir.join(format!("sweep_{}_{param}.csv", dataset.name)), combined.as_bytes())?;
    Ok(0)
}

fn cmd_simulate(
    ctx: &Context,
    index: usize,
    steps: Option<usize>,
    checkpoint: Option<&Path>,
    fixture: Option<&Path>,
) -> Result<u8> {
    let dataset = match fixture {
        Some(path) => {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            read_fixture(BufReader::new(File::open(path)?), &name)?
        }
        None => ctx.load_dataset()?,
    };
    let graph = dataset.graphs.get(index).ok_or_else(|| {
        Error::Config(format!("graph index {index} out of range ({} graphs)", dataset.len()))
    })?;
    let steps = steps.unwrap_or(ctx.config.model.time_steps);
    let tape = Tape::new(0);
    let directed = graph.directed_edges();
    let weights = match checkpoint {
        None => tape.constant(Tensor::full(&[directed.len()], 1.0)),
        Some(path) => {
            let store = load_checkpoint(path)?;
            let params = QweParams::from_store(&store)?;
            let h0 = initial_embeddings(&tape, &store, &params, tape.constant(graph.features.clone()))?;
            edge_weights(&tape, &store, &params, h0, &directed)
        }
    };
    let hamiltonian = build_hamiltonian(&tape, weights, &directed, graph.node_count);
    let evolution = simulate_ctqw(&hamiltonian, steps)?.to_tensor();

    let dir = ctx.out_dir()?;
    let stem = format!("simulate_{}_{index}", dataset.name);
    let n = graph.node_count;
    let mut csv = format!("{}t,i,j,p\n", ctx.csv_preamble("simulate"));
    for t in 0..steps {
        for i in 0..n {
            for j in 0..n {
                csv.push_str(&format!("{},{i},{j},{}\n", t + 1, evolution.prob(t, i, j)));
            }
        }
    }
    let summary = json!({
        "dataset": dataset.name,
        "graph_index": index,
        "nodes": n,
        "edges": graph.edges.len(),
        "steps": steps,
        "weights": if checkpoint.is_some() { "checkpoint" } else { "unit" },
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
        "column_sum_max_deviation": evolution.column_sum_deviation(),
        "symmetry_max_deviation": evolution.symmetry_deviation(),
        "time_grid": evolution.time_grid,
    });
    let doc = ctx.document("simulate", json!({ "summary": summary }));
    write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
    println!(
        "{} graph {index}: {n} nodes, {steps} steps, column-sum deviation {:.3e}, symmetry deviation {:.3e}",
        dataset.name,
        evolution.column_sum_deviation(),
        evolution.symmetry_deviation()
    );
    Ok(0)
}

fn cmd_gradcheck(ctx: &Context, nodes: usize, threshold: f64, eps: f64, features: usize, classes: usize) -> Result<u8> {
    if nodes == 0 {
        return Err(Error::Config("gradcheck needs at least one node".into()));
    }
    if !(eps > 0.0) || !(threshold >= 0.0) {
        return Err(Error::Config(format!("invalid eps {eps} or threshold {threshold}")));
    }
    let model_cfg = ctx.config.model.to_model_config(features, classes);
    let seed = ctx.config.train.seed;
    let (model, store) = Model::init(&model_cfg, seed)?;
    let graph = random_graph(nodes, features, classes, seed);
    let report = check_model(&model, &store, &graph, eps, threshold, seed, ctx.exec)?;
    println!(
        "{} of {} coordinates within {threshold:e} ({:.4}%), worst relative error {:.3e}",
        report.within,
        report.total,
        100.0 * report.fraction_within(),
        report.worst_rel_err()
    );
    for c in &report.worst {
        println!(
            "  {}[{}]: analytic {:.6e} numeric {:.6e} rel err {:.3e}",
            c.parameter, c.index, c.analytic, c.numeric, c.rel_err
        );
    }
    let passed = report.passed();
    println!("{}", if passed { "PASS" } else { "FAIL" });
    let doc = ctx.document(
        "gradcheck",
        json!({ "nodes": nodes, "seed": seed, "passed": passed, "report": report }),
    );
    let dir = ctx.out_dir()?;
    write_atomic(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
    Ok(if passed { 0 } else { 3 })
}
