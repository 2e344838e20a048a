//! Mini-batch training, evaluation and metric logging.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::GraphDataset;
use crate::error::{CcpError, Result};
use crate::graph::AffinityGraph;
use crate::network::{build_network, Network, NetworkConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.01;
/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Adds `N(0, 0.01²)` to every training signal.
    #[serde(default)]
    pub noise_injection: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: default_epochs(),
            batch_size: default_batch(),
            noise_injection: false,
        }
    }
}

/// Which affinity structure the network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphSource {
    /// The dataset's own graph.
    #[default]
    Structured,
    /// A random connected graph with the same node and edge counts.
    Random,
}

impl GraphSource {
    pub fn name(self) -> &'static str {
        match self {
            GraphSource::Structured => "structured",
            GraphSource::Random => "random",
        }
    }

    /// The graph to train on for `dataset`; `Random` draws from `seed`.
    pub fn resolve(self, dataset: &GraphDataset, seed: u64) -> Result<AffinityGraph> {
        match self {
            GraphSource::Structured => Ok(dataset.graph.clone()),
            GraphSource::Random => crate::graph::build_random_isomorphic(&dataset.graph, seed),
        }
    }
}

impl std::str::FromStr for GraphSource {
    type Err = CcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(GraphSource::Structured),
            "random" => Ok(GraphSource::Random),
            _ => Err(CcpError::InvalidArgument(format!("unknown graph source `{}`", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub l0: f64,
    pub lk: f64,
    /// Accuracy on the training batches as seen during the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn divergence(err: CcpError, epoch: usize, batch: usize) -> CcpError {
    match err {
        CcpError::NonFinite { op } => CcpError::Divergence {
            name: format!("{} output (epoch {}, batch {})", op, epoch, batch),
        },
        other => other,
    }
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.row_argmax().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Runs one optimisation step on `indices`, returning the batch's task
/// loss, clustering objective, total loss and correct predictions.
pub fn train_step(
    net: &mut Network,
    adam: &mut AdamState,
    dataset: &GraphDataset,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
    noise: bool,
) -> Result<(f64, f64, f64, usize)> {
    let (mut x, labels) = dataset.batch(indices);
    if noise {
        let dist = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        x.data_mut().iter_mut().for_each(|v| *v += dist.sample(rng));
    }
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, &x, &labels, Some(rng))?;
    let grads = tape.backward(rec.total)?;
    let names = net.param_names();
    let mut grad_refs = Vec::with_capacity(rec.params.len());
    for (slot, name) in rec.params.iter().zip(&names) {
        let g = slot.and_then(|v| grads.get(v));
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(CcpError::Divergence {
                    name: format!("gradient of {}", name),
                });
            }
        }
        grad_refs.push(g);
    }
    adam.step(&mut net.params_mut(), &grad_refs)?;
    for (p, name) in net.params().iter().zip(&names) {
        if !p.is_finite() {
            return Err(CcpError::Divergence { name: name.clone() });
        }
    }
    let hits = correct(tape.value(rec.logits), &labels);
    Ok((tape.scalar(rec.task), tape.scalar(rec.cluster), tape.scalar(rec.total), hits))
}

/// Trains a freshly built network on `dataset` using `graph` as its
/// affinity structure.
pub fn train(
    cfg: &NetworkConfig,
    opts: &TrainOptions,
    graph: &AffinityGraph,
    dataset: &GraphDataset,
) -> Result<Checkpoint> {
    if dataset.train.is_empty() {
        return Err(CcpError::InvalidArgument("training split is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(CcpError::InvalidArgument("batch size must be positive".into()));
    }
    if graph.n() != dataset.graph.n() {
        return Err(CcpError::Graph(format!(
            "graph has {} nodes, dataset signals have {}",
            graph.n(),
            dataset.graph.n()
        )));
    }
    if cfg.classes != dataset.classes() {
        return Err(CcpError::InvalidArgument(format!(
            "config has {} classes, dataset has {}",
            cfg.classes,
            dataset.classes()
        )));
    }
    let dataset_graph = dataset.graph.clone();
    let grid = dataset.grid;
    let dataset = dataset.with_graph(graph.clone())?;
    let mut net = build_network(cfg, graph, dataset.d_in())?;
    let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_7a1e);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order = dataset.train.clone();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut l0, mut lk, mut hits) = (0.0, 0.0, 0.0, 0);
        let batches = order.chunks(opts.batch_size);
        let n_batches = batches.len();
        for (b, chunk) in batches.enumerate() {
            let (task, cluster, total, h) =
                train_step(&mut net, &mut adam, &dataset, chunk, &mut rng, opts.noise_injection)
                    .map_err(|e| divergence(e, epoch, b + 1))?;
            loss += total;
            l0 += task;
            lk += cluster;
            hits += h;
        }
        let nb = n_batches as f64;
        let test_acc = if dataset.test.is_empty() {
            0.0
        } else {
            evaluate_indices(&net, &dataset, &dataset.test)?.accuracy
        };
        history.push(EpochMetrics {
            epoch,
            train_loss: loss / nb,
            l0: l0 / nb,
            lk: lk / nb,
            train_acc: hits as f64 / order.len() as f64,
            test_acc,
        });
    }
    Ok(Checkpoint {
        network: net,
        epoch: opts.epochs,
        history,
        options: opts.clone(),
        graph_source: if graph == &dataset_graph { GraphSource::Structured } else { GraphSource::Random },
        grid: if graph == &dataset_graph { grid } else { None },
    })
}

/// Predictions for the samples at `indices`, dropout off.
pub fn predict(net: &Network, dataset: &GraphDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = dataset.batch(chunk);
        out.extend(net.logits(&x, chunk.len())?.row_argmax());
    }
    Ok(out)
}

pub fn evaluate_indices(net: &Network, dataset: &GraphDataset, indices: &[usize]) -> Result<EvalReport> {
    let classes = net.config.classes;
    let mut confusion = vec![vec![0; classes]; classes];
    let preds = predict(net, dataset, indices)?;
    for (&i, &p) in indices.iter().zip(&preds) {
        let label = dataset.samples[i].label;
        if label >= classes {
            return Err(CcpError::InvalidArgument(format!(
                "label {} outside the network's {} classes",
                label, classes
            )));
        }
        confusion[label][p] += 1;
    }
    let hits: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: if indices.is_empty() { 0.0 } else { hits as f64 / indices.len() as f64 },
        confusion,
    })
}

/// Accuracy and confusion matrix on the dataset's test split.
pub fn evaluate(ckpt: &Checkpoint, dataset: &GraphDataset) -> Result<EvalReport> {
    let net = &ckpt.network;
    if net.graph != dataset.graph {
        return Err(CcpError::Graph("checkpoint graph does not match the dataset graph".into()));
    }
    if net.d_in != dataset.d_in() {
        return Err(CcpError::InvalidArgument(format!(
            "checkpoint expects {} channels, dataset has {}",
            net.d_in,
            dataset.d_in()
        )));
    }
    evaluate_indices(net, dataset, &dataset.test)
}

pub const METRICS_HEADER: &str = "epoch,train_loss,L0,LK,train_acc,test_acc";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.train_loss, m.l0, m.lk, m.train_acc, m.test_acc
        );
    }
    out
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(history)).map_err(|e| CcpError::io(path, e))
}
