//! Stacked CCP layers with a two-layer fully connected head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::ccp::{CcpLayer, LayerSpec, LayerVars, Ordering};
use crate::error::{CcpError, Result};
use crate::graph::{AffinityGraph, DEGREE_EPS};
use crate::objectives::{self, LossBreakdown, VOLUME_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Loss and gradient-masking regime, one per row of the optimisation ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Task loss plus clustering objective, full gradients.
    #[default]
    Joint,
    /// Task loss only.
    TaskOnly,
    /// Task loss only; memberships stay at their random initialization.
    TaskOnlyFrozenU,
    /// Both losses, but the task loss sends no gradient to the memberships.
    JointFrozenUFromTask,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Joint,
        TrainMode::TaskOnly,
        TrainMode::TaskOnlyFrozenU,
        TrainMode::JointFrozenUFromTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::TaskOnly => "task-only",
            TrainMode::TaskOnlyFrozenU => "task-only-frozen-u",
            TrainMode::JointFrozenUFromTask => "joint-frozen-u-from-task",
        }
    }

    pub fn uses_cluster_loss(self) -> bool {
        matches!(self, TrainMode::Joint | TrainMode::JointFrozenUFromTask)
    }

    /// Memberships are cached once and never updated.
    pub fn freezes_clustering(self) -> bool {
        self == TrainMode::TaskOnlyFrozenU
    }
}

impl std::str::FromStr for TrainMode {
    type Err = CcpError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CcpError::InvalidArgument(format!("unknown mode `{}`", s)))
    }
}

fn default_dropout() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    1.0
}
fn default_weight_decay() -> f64 {
    objectives::DEFAULT_WEIGHT_DECAY
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    pub fc_width: usize,
    pub classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_lambda")]
    pub lambda_k: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub ordering: Ordering,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(layers: Vec<LayerSpec>, fc_width: usize, classes: usize) -> Self {
        NetworkConfig {
            layers,
            fc_width,
            classes,
            dropout: default_dropout(),
            lambda_k: default_lambda(),
            weight_decay: default_weight_decay(),
            learning_rate: default_lr(),
            mode: TrainMode::default(),
            ordering: Ordering::default(),
            seed: 0,
        }
    }

    /// Three-level network for the 16×16 shape task: 256 → 64 → 16 → 1
    /// clusters.
    pub fn desk_grid() -> Self {
        NetworkConfig {
            learning_rate: 1e-2,
            dropout: 0.2,
            ..NetworkConfig::new(
                vec![LayerSpec::new(64, 16, 8), LayerSpec::new(16, 32, 8), LayerSpec::new(1, 64, 16)],
                64,
                4,
            )
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(CcpError::InvalidArgument(msg));
        if self.layers.is_empty() {
            return bad("at least one CCP layer is required".into());
        }
        let mut k_in = n;
        for (m, spec) in self.layers.iter().enumerate() {
            if spec.k_out == 0 || spec.k_out >= k_in && !(k_in == 1 && spec.k_out == 1) {
                return bad(format!(
                    "layer {}: cluster counts must strictly decrease, got {} after {}",
                    m + 1,
                    spec.k_out,
                    k_in
                ));
            }
            if spec.l == 0 || spec.l > k_in {
                return bad(format!("layer {}: L={} must be in 1..={}", m + 1, spec.l, k_in));
            }
            k_in = spec.k_out;
        }
        if k_in != 1 {
            return bad(format!("the last layer must pool to one cluster, got {}", k_in));
        }
        if self.fc_width == 0 || self.classes < 2 {
            return bad("fc_width must be positive and classes at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// λ actually applied to the clustering objective.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.uses_cluster_loss() {
            self.lambda_k
        } else {
            0.0
        }
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid uniform");
        Dense {
            w: Tensor::new(vec![d_in, d_out], (0..d_in * d_out).map(|_| dist.sample(rng)).collect())
                .expect("sized"),
            b: Tensor::zeros(&[d_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub graph: AffinityGraph,
    pub d_in: usize,
    pub layers: Vec<CcpLayer>,
    pub fc1: Dense,
    pub fc2: Dense,
    /// Clustering objective per level of the cached hierarchy.
    frozen_objective: Option<Vec<f64>>,
}

/// Which parameter a tensor is, for naming and masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Memberships,
    Kernel,
    Bias,
    Gate,
    DenseWeight,
    DenseBias,
}

/// Everything one recorded batch leaves on the tape.
#[derive(Debug)]
pub struct Recorded {
    /// One entry per parameter, in [`Network::param_names`] order; `None`
    /// for parameters recorded as constants.
    pub params: Vec<Option<Var>>,
    pub logits: Var,
    pub task: Var,
    pub cluster: Var,
    pub per_level: Vec<Var>,
    pub reg: Option<Var>,
    pub total: Var,
}

impl Recorded {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            task: tape.scalar(self.task),
            cluster: tape.scalar(self.cluster),
            reg: self.reg.map_or(0.0, |r| tape.scalar(r)),
            total: tape.scalar(self.total),
            per_level: self.per_level.iter().map(|&v| tape.scalar(v)).collect(),
        }
    }
}

/// Builds the network for `graph` and `d_in` input channels. All randomness
/// comes from `cfg.seed`.
pub fn build_network(cfg: &NetworkConfig, graph: &AffinityGraph, d_in: usize) -> Result<Network> {
    cfg.validate(graph.n())?;
    if d_in == 0 {
        return Err(CcpError::InvalidArgument("input signals need at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::with_capacity(cfg.layers.len());
    let (mut k_in, mut d) = (graph.n(), d_in);
    for spec in &cfg.layers {
        layers.push(CcpLayer::new(k_in, d, *spec, cfg.ordering, &mut rng)?);
        k_in = spec.k_out;
        d = spec.d_out;
    }
    let fc1 = Dense::new(d, cfg.fc_width, &mut rng);
    let fc2 = Dense::new(cfg.fc_width, cfg.classes, &mut rng);
    let mut net = Network {
        config: cfg.clone(),
        graph: graph.clone(),
        d_in,
        layers,
        fc1,
        fc2,
        frozen_objective: None,
    };
    net.refresh_frozen()?;
    Ok(net)
}

impl Network {
    /// Rebuilds the cached clustering hierarchy when the mode freezes it.
    pub fn refresh_frozen(&mut self) -> Result<()> {
        if !self.config.mode.freezes_clustering() {
            for layer in &mut self.layers {
                layer.frozen = None;
            }
            self.frozen_objective = None;
            return Ok(());
        }
        let mut a = self.graph.weights().clone();
        for layer in &mut self.layers {
            a = layer.freeze(&a)?.coarsen.a_norm.clone();
        }
        self.frozen_objective = Some(self.frozen_level_values()?);
        Ok(())
    }

    pub fn frozen(&self) -> bool {
        self.config.mode.freezes_clustering()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_kinds().into_iter().map(|(name, _)| name).collect()
    }

    pub fn param_kinds(&self) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        for m in 1..=self.layers.len() {
            out.push((format!("layer{}.U", m), ParamKind::Memberships));
            out.push((format!("layer{}.W", m), ParamKind::Kernel));
            out.push((format!("layer{}.b", m), ParamKind::Bias));
            out.push((format!("layer{}.alpha", m), ParamKind::Gate));
            out.push((format!("layer{}.beta", m), ParamKind::Gate));
        }
        for f in 1..=2 {
            out.push((format!("fc{}.W", f), ParamKind::DenseWeight));
            out.push((format!("fc{}.b", f), ParamKind::DenseBias));
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.u, &l.w, &l.b, &l.alpha, &l.beta]);
        }
        out.extend([&self.fc1.w, &self.fc1.b, &self.fc2.w, &self.fc2.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([&mut l.u, &mut l.w, &mut l.b, &mut l.alpha, &mut l.beta]);
        }
        out.extend([&mut self.fc1.w, &mut self.fc1.b, &mut self.fc2.w, &mut self.fc2.b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Whether the optimizer updates parameter `kind` in this mode.
    pub fn trains(&self, kind: ParamKind) -> bool {
        !(kind == ParamKind::Memberships && self.frozen())
    }

    /// Records a batch of stacked signals (`batch·n × d_in`). `dropout` is
    /// `Some` in training mode and supplies the mask randomness.
    pub fn record(
        &self,
        tape: &mut Tape,
        signals: &Tensor,
        labels: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Recorded> {
        let n = self.graph.n();
        let batch = labels.len();
        if signals.dims2() != Some((batch * n, self.d_in)) {
            return Err(CcpError::shape(
                "network",
                format!(
                    "signals {:?}, expected [{}, {}] for {} samples",
                    signals.shape(),
                    batch * n,
                    self.d_in,
                    batch
                ),
            ));
        }
        let mode = self.config.mode;
        let kinds = self.param_kinds();
        let params: Vec<Option<Var>> = self
            .params()
            .into_iter()
            .zip(&kinds)
            .map(|(t, (_, kind))| self.trains(*kind).then(|| tape.param(t.clone())))
            .collect();
        let var_or_const = |tape: &mut Tape, idx: usize, t: &Tensor| match params[idx] {
            Some(v) => v,
            None => tape.constant(t.clone()),
        };
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for (m, layer) in self.layers.iter().enumerate() {
            let base = 5 * m;
            let mut u = var_or_const(tape, base, &layer.u);
            if mode == TrainMode::JointFrozenUFromTask {
                u = tape.constant(layer.u.clone());
            }
            layer_vars.push(LayerVars {
                u,
                w: var_or_const(tape, base + 1, &layer.w),
                b: var_or_const(tape, base + 2, &layer.b),
                alpha: var_or_const(tape, base + 3, &layer.alpha),
                beta: var_or_const(tape, base + 4, &layer.beta),
            });
        }

        let graph_var = tape.constant(self.graph.weights().clone());
        let mut a_in = graph_var;
        let mut f = tape.constant(signals.clone());
        let mut task_levels = Vec::new();
        for (layer, vars) in self.layers.iter().zip(&layer_vars) {
            let trace = layer.record(tape, a_in, f, batch, vars, self.frozen())?;
            if let Some(cv) = trace.cluster {
                task_levels.push((a_in, cv.k, cv.a_out));
            }
            a_in = trace.a_norm;
            f = trace.f_out;
        }

        let (cluster, per_level) = if self.frozen() {
            let values = self
                .frozen_objective
                .clone()
                .ok_or_else(|| CcpError::InvalidArgument("frozen hierarchy missing".into()))?;
            let vars: Vec<Var> = values.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
            let total = tape.constant(Tensor::scalar(values.iter().sum()));
            (total, vars)
        } else if mode == TrainMode::JointFrozenUFromTask {
            let us: Vec<Var> = (0..self.layers.len())
                .map(|m| var_or_const(tape, 5 * m, &self.layers[m].u))
                .collect();
            let levels = record_cluster_levels(tape, graph_var, &us)?;
            objectives::record_cluster_loss(tape, &levels, VOLUME_EPS)?
        } else {
            let mut levels = Vec::with_capacity(task_levels.len());
            let mut prev = graph_var;
            for &(_, k, a_out) in &task_levels {
                levels.push((prev, k));
                prev = a_out;
            }
            objectives::record_cluster_loss(tape, &levels, VOLUME_EPS)?
        };

        let base = 5 * self.layers.len();
        let fc = [
            var_or_const(tape, base, &self.fc1.w),
            var_or_const(tape, base + 1, &self.fc1.b),
            var_or_const(tape, base + 2, &self.fc2.w),
            var_or_const(tape, base + 3, &self.fc2.b),
        ];
        let mut rng = dropout;
        let h = self.apply_dropout(tape, f, rng.as_deref_mut())?;
        let z = tape.matmul(h, fc[0])?;
        let z = tape.add_row(z, fc[1])?;
        let z = tape.elu(z)?;
        let z = self.apply_dropout(tape, z, rng)?;
        let logits = tape.matmul(z, fc[2])?;
        let logits = tape.add_row(logits, fc[3])?;
        let task = objectives::record_cross_entropy(tape, logits, labels)?;

        let decayed: Vec<Var> = kinds
            .iter()
            .zip(&params)
            .filter(|((_, kind), _)| matches!(kind, ParamKind::Kernel | ParamKind::DenseWeight))
            .filter_map(|(_, v)| *v)
            .collect();
        let reg = objectives::record_l2(tape, &decayed, self.config.weight_decay)?;

        let lambda = self.config.effective_lambda();
        let mut total = task;
        if lambda != 0.0 {
            let weighted = tape.scale(cluster, lambda)?;
            total = tape.sub(total, weighted)?;
        }
        if let Some(r) = reg {
            total = tape.add(total, r)?;
        }
        Ok(Recorded {
            params,
            logits,
            task,
            cluster,
            per_level,
            reg,
            total,
        })
    }

    fn apply_dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.value(x).shape().to_vec();
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }

    /// Per-level clustering objective from the cached hierarchy.
    fn frozen_level_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut prev = self.graph.weights().clone();
        for layer in &self.layers {
            let cache = layer
                .frozen
                .as_ref()
                .ok_or_else(|| CcpError::InvalidArgument("frozen hierarchy missing".into()))?;
            out.push(objectives::objective_c(&prev, &cache.coarsen.k, VOLUME_EPS)?);
            prev = cache.coarsen.a_out.clone();
        }
        Ok(out)
    }

    /// Smallest gap between consecutive ranks among the `L + 1` best nodes of
    /// any cluster at any level. Selection is locally constant wherever this
    /// is positive.
    pub fn rank_margin(&self) -> Result<f64> {
        let mut a = self.graph.weights().clone();
        let mut margin = f64::INFINITY;
        for layer in &self.layers {
            let coarsen = crate::ccp::cluster_step(&a, layer, DEGREE_EPS)?;
            let ranks = crate::ccp::rank_matrix(&a, &coarsen.k)?;
            for c in 0..layer.k_out {
                let mut col: Vec<f64> = (0..layer.k_in).map(|i| ranks.at(i, c)).collect();
                col.sort_by(|x, y| y.total_cmp(x));
                let top = (layer.l + 1).min(col.len());
                for w in col[..top].windows(2) {
                    margin = margin.min(w[0] - w[1]);
                }
            }
            a = coarsen.a_norm;
        }
        Ok(margin)
    }

    /// Membership matrices of every level, in order.
    pub fn memberships(&self) -> Vec<Tensor> {
        self.layers.iter().map(CcpLayer::memberships).collect()
    }

    /// `(A_m, K_m)` pairs feeding the clustering objective: the input graph
    /// for the first level, then each level's unnormalized coarsened affinity.
    pub fn cluster_levels(&self) -> Result<Vec<(Tensor, Tensor)>> {
        let mut tape = Tape::new();
        let graph = tape.constant(self.graph.weights().clone());
        let us: Vec<Var> = self.layers.iter().map(|l| tape.constant(l.u.clone())).collect();
        let levels = record_cluster_levels(&mut tape, graph, &us)?;
        Ok(levels
            .into_iter()
            .map(|(a, k)| (tape.value(a).clone(), tape.value(k).clone()))
            .collect())
    }

    /// Current value of the multi-level clustering objective.
    pub fn cluster_objective(&self) -> Result<f64> {
        objectives::cluster_loss(&self.cluster_levels()?, VOLUME_EPS)
    }

    /// Class logits for stacked signals, dropout off.
    pub fn logits(&self, signals: &Tensor, batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let labels = vec![0; batch];
        let rec = self.record(&mut tape, signals, &labels, None)?;
        Ok(tape.value(rec.logits).clone())
    }
}

/// Records the membership hierarchy from logits `us` on top of `graph`,
/// returning `(A_m, K_m)` per level.
pub fn record_cluster_levels(tape: &mut Tape, graph: Var, us: &[Var]) -> Result<Vec<(Var, Var)>> {
    let mut levels = Vec::with_capacity(us.len());
    let mut a_in = graph;
    let mut a_level = graph;
    for &u in us {
        let cv = crate::ccp::record_cluster_step(tape, a_in, u, DEGREE_EPS)?;
        levels.push((a_level, cv.k));
        a_level = cv.a_out;
        a_in = cv.a_norm;
    }
    Ok(levels)
}
