//! End-to-end forward map: encoder, stacked transformer/recurrent layers
//! with per-layer fusion, mean pooling and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::parallel::{self, Execution};
use crate::qwe::{self, QweParams};
use crate::qwgr::{self, QwgrParams};
use crate::qwgt::{self, QwgtParams};
use crate::tensor::{Gradients, ParamStore, Tape, TapeStats, Tensor, Var};
use crate::tu_io::Graph;

/// Variance floor inside every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub time_steps: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub use_qwgt: bool,
    pub use_qwgr: bool,
}

impl ModelConfig {
    /// Defaults: 2 layers, 4 time steps, width 64, 4 heads, dropout 0.3.
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            layers: 2,
            time_steps: 4,
            hidden: 64,
            heads: 4,
            dropout: 0.3,
            num_classes,
            feature_dim,
            use_qwgt: true,
            use_qwgr: true,
        }
    }

    /// Edge-MLP hidden width.
    pub fn edge_hidden(&self) -> usize {
        self.hidden
    }

    /// Width of each GRU direction.
    pub fn gru_width(&self) -> usize {
        (self.hidden / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.time_steps == 0 || self.hidden == 0 {
            return fail(format!(
                "layers ({}), time steps ({}) and hidden width ({}) must be positive",
                self.layers, self.time_steps, self.hidden
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden width {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_classes < 2 || self.feature_dim == 0 {
            return fail(format!(
                "need at least 2 classes and 1 feature (got {} and {})",
                self.num_classes, self.feature_dim
            ));
        }
        if !self.use_qwgt && !self.use_qwgr {
            return fail("at least one of the transformer and recurrent modules must stay enabled".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoQwgt,
    NoQwgr,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoQwgt => "no_qwgt",
            Ablation::NoQwgr => "no_qwgr",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_qwgt" => Ok(Ablation::NoQwgt),
            "no_qwgr" => Ok(Ablation::NoQwgr),
            other => Err(Error::Config(format!("unknown ablation {other:?} (expected no_qwgt or no_qwgr)"))),
        }
    }
}

/// Clears the flag for `which`; fails if that leaves neither module.
pub fn ablate(config: &ModelConfig, which: Ablation) -> Result<ModelConfig> {
    let mut c = config.clone();
    match which {
        Ablation::NoQwgt => c.use_qwgt = false,
        Ablation::NoQwgr => c.use_qwgr = false,
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub qwgt: Option<QwgtParams>,
    pub qwgr: Option<QwgrParams>,
    /// `2h → h`.
    pub fusion: Linear,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub qwe: QweParams,
    pub layers: Vec<LayerParams>,
    pub classifier_hidden: Linear,
    pub classifier_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Builds the parameter layout and a freshly initialized store.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let qwe = QweParams::new(&mut store, config.feature_dim, h, config.edge_hidden(), &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let qwgt = if config.use_qwgt {
                Some(QwgtParams::new(&mut store, &format!("layer.{l}.qwgt"), h, config.heads, &mut rng)?)
            } else {
                None
            };
            let qwgr = config.use_qwgr.then(|| {
                QwgrParams::new(&mut store, &format!("layer.{l}.qwgr"), config.gru_width(), h, &mut rng)
            });
            let fusion = Linear::new(&mut store, &format!("layer.{l}.fusion"), 2 * h, h, true, &mut rng);
            layers.push(LayerParams { qwgt, qwgr, fusion });
        }
        let half = (h / 2).max(1);
        let classifier_hidden = Linear::new(&mut store, "classifier.0", h, half, true, &mut rng);
        let classifier_out = Linear::new(&mut store, "classifier.1", half, config.num_classes, true, &mut rng);
        let model = Model {
            config: config.clone(),
            params: ModelParams {
                qwe,
                layers,
                classifier_hidden,
                classifier_out,
            },
        };
        Ok((model, store))
    }

    /// Class logits (shape `[C]`) for one graph.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, graph: &Graph, train: bool) -> Result<Var<'t>> {
        let cfg = &self.config;
        if graph.feature_dim() != cfg.feature_dim {
            return Err(Error::Contract(format!(
                "graph has {} features, model expects {}",
                graph.feature_dim(),
                cfg.feature_dim
            )));
        }
        Ok(self.forward_traced(tape, store, graph, train, None)?.0)
    }

    /// Forward pass that also returns the per-stage values it computed.
    /// With `reuse = Some((trace, owner))`, stages that a change to `owner`'s
    /// parameters cannot affect are read from `trace` instead of recomputed;
    /// dropout streams are repositioned so the recomputed stages see the
    /// masks they saw in the traced pass.
    pub(crate) fn forward_traced<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        graph: &Graph,
        train: bool,
        reuse: Option<(&Trace, Owner)>,
    ) -> Result<(Var<'t>, Trace)> {
        let cfg = &self.config;
        let p = &self.params;
        let n = graph.node_count;
        let reuse = reuse.filter(|(_, owner)| *owner != Owner::Encoder);
        let cached = |t: &Tensor| tape.constant(t.clone());

        let (h0, bias, series) = match reuse {
            Some((trace, _)) => (
                cached(&trace.layer_inputs[0]),
                trace.bias.as_ref().map(|b| qwgt::StructuralBias { matrix: cached(b) }),
                trace.series.as_ref().map(cached),
            ),
            None => {
                let encoded = qwe::encode(tape, store, &p.qwe, graph, cfg.time_steps)?;
                check_finite("quantum walk encoder", encoded.h0)?;
                check_finite("quantum walk encoder", encoded.evolution.last())?;
                let bias = match cfg.use_qwgt {
                    true => Some(qwgt::structural_bias(encoded.evolution.last())?),
                    false => None,
                };
                let series = cfg.use_qwgr.then(|| qwgr::extract_diagonals(&encoded.evolution));
                (encoded.h0, bias, series)
            }
        };
        let mut trace = Trace {
            bias: bias.map(|b| b.matrix.value()),
            series: series.map(|s| s.value()),
            layer_inputs: vec![h0.value()],
            structural: Vec::with_capacity(p.layers.len()),
            temporal: Vec::with_capacity(p.layers.len()),
            dropout_marks: Vec::with_capacity(p.layers.len()),
        };
        let zeros = tape.constant(Tensor::zeros(&[n, cfg.hidden]));

        let mut h = h0;
        for (l, layer) in p.layers.iter().enumerate() {
            let redo = |stage: LayerStage| reuse.is_none_or(|(_, owner)| owner.affects(l, stage));
            let marks = reuse.map(|(trace, _)| trace.dropout_marks[l]);

            let structural_mark = tape.dropout_position();
            let structural = if !redo(LayerStage::Structural) {
                cached(&reuse.unwrap().0.structural[l])
            } else {
                if let Some((m, _)) = marks {
                    tape.seek_dropout(m);
                }
                match layer.qwgt {
                    Some(ref params) => qwgt::qwgt_layer(tape, store, params, h, bias.as_ref(), cfg.dropout, train),
                    None => h,
                }
            };
            let temporal = if !redo(LayerStage::Temporal) {
                cached(&reuse.unwrap().0.temporal[l])
            } else {
                match (layer.qwgr, series) {
                    (Some(ref params), Some(s)) => {
                        let states = qwgr::encode_temporal(tape, store, params, s);
                        zeros + qwgr::graph_readout(tape, store, params, states)
                    }
                    _ => zeros,
                }
            };
            let fusion_mark = tape.dropout_position();
            h = if !redo(LayerStage::Fusion) {
                cached(&reuse.unwrap().0.layer_inputs[l + 1])
            } else {
                if let Some((_, m)) = marks {
                    tape.seek_dropout(m);
                }
                let fused = Var::concat(&[structural, temporal], 1);
                layer.fusion.forward(tape, store, fused).relu().dropout(cfg.dropout, train)
            };
            check_finite(&format!("layer {l}"), h)?;
            trace.structural.push(structural.value());
            trace.temporal.push(temporal.value());
            trace.layer_inputs.push(h.value());
            trace.dropout_marks.push(marks.unwrap_or((structural_mark, fusion_mark)));
        }

        let pooled = h.mean(0).reshape(&[1, cfg.hidden]);
        let hidden = p.classifier_hidden.forward(tape, store, pooled).relu();
        let logits = p.classifier_out.forward(tape, store, hidden).reshape(&[cfg.num_classes]);
        check_finite("classifier", logits)?;
        Ok((logits, trace))
    }

    /// Which sub-module a parameter of this model belongs to, by name.
    pub(crate) fn owner_of(name: &str) -> Owner {
        let mut parts = name.split('.');
        match (parts.next(), parts.next().and_then(|l| l.parse().ok()), parts.next()) {
            (Some("layer"), Some(l), Some("qwgt")) => Owner::Qwgt(l),
            (Some("layer"), Some(l), Some("qwgr")) => Owner::Qwgr(l),
            (Some("layer"), Some(l), Some("fusion")) => Owner::Fusion(l),
            (Some("classifier"), _, _) => Owner::Classifier,
            _ => Owner::Encoder,
        }
    }

    pub fn loss<'t>(&self, logits: Var<'t>, label: usize) -> Result<Var<'t>> {
        if label >= self.config.num_classes {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(logits.cross_entropy(label))
    }

    /// Eval-mode logits as plain values.
    pub fn logits(&self, store: &ParamStore, graph: &Graph) -> Result<Tensor> {
        let tape = Tape::new(0);
        Ok(self.forward(&tape, store, graph, false)?.value())
    }

    pub fn predict(&self, store: &ParamStore, graph: &Graph) -> Result<usize> {
        let logits = self.logits(store, graph)?;
        Ok(argmax(logits.data()))
    }

    /// Loss, gradients and tape counters for one graph. `seed` fixes the
    /// dropout masks when `train` is set.
    pub fn graph_gradients(
        &self,
        store: &ParamStore,
        graph: &Graph,
        seed: u64,
        train: bool,
    ) -> Result<(f64, Gradients, TapeStats)> {
        let tape = Tape::new(seed);
        let logits = self.forward(&tape, store, graph, train)?;
        let loss = self.loss(logits, graph.label)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::numeric("loss", format!("non-finite loss {value}")));
        }
        let grads = tape.backward(loss)?;
        Ok((value, grads, tape.stats()))
    }

    /// Mean loss and mean gradient (indexed like the store) over a batch.
    /// Per-graph work may run concurrently; the reduction runs in input
    /// order so results do not depend on scheduling.
    pub fn batch_gradients(
        &self,
        store: &ParamStore,
        batch: &[(&Graph, u64)],
        exec: Execution,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let per_graph = parallel::map(exec, batch, |&(g, seed)| {
            self.graph_gradients(store, g, seed, true).map(|(l, grads, _)| (l, grads))
        });
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut acc = store.zero_buffers();
        let mut loss = 0.0;
        for item in per_graph {
            let (l, grads) = item?;
            loss += l * scale;
            grads.accumulate_into(&mut acc, scale);
        }
        Ok((loss, acc))
    }
}

/// Values recorded by [`Model::forward_traced`]. `layer_inputs[l]` is the
/// node state entering layer `l`; the last entry leaves the final layer.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    bias: Option<Tensor>,
    series: Option<Tensor>,
    layer_inputs: Vec<Tensor>,
    structural: Vec<Tensor>,
    temporal: Vec<Tensor>,
    /// Dropout stream positions at the start of each layer's transformer
    /// branch and of its fusion.
    dropout_marks: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Owner {
    Encoder,
    Qwgt(usize),
    Qwgr(usize),
    Fusion(usize),
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerStage {
    Structural,
    Temporal,
    Fusion,
}

impl Owner {
    /// Whether changing this owner's parameters can change `stage` of layer `l`.
    fn affects(self, l: usize, stage: LayerStage) -> bool {
        // the recurrent branch reads only the walk, never the node states
        let input_changes = match self {
            Owner::Encoder => true,
            Owner::Qwgt(j) | Owner::Qwgr(j) | Owner::Fusion(j) => j < l,
            Owner::Classifier => false,
        };
        match stage {
            LayerStage::Structural => input_changes || self == Owner::Qwgt(l),
            LayerStage::Temporal => self == Owner::Encoder || self == Owner::Qwgr(l),
            LayerStage::Fusion => {
                input_changes || matches!(self, Owner::Qwgt(j) | Owner::Qwgr(j) | Owner::Fusion(j) if j == l)
            }
        }
    }
}

fn check_finite(stage: &str, v: Var<'_>) -> Result<()> {
    if v.with_value(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::numeric(stage, "non-finite activation"))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
