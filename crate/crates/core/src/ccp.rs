//! The convolutional cluster pooling layer.
//!
//! A layer soft-assigns its `k_in` input nodes to `k_out` clusters
//! (`K = rowsoftmax(U)`), coarsens the affinity matrix with the quadratic
//! form `Kᵀ(A − I∘A)K`, and then pools features: for every cluster it picks
//! the `L` nodes most central to that cluster, orders them by centrality,
//! gates each one by `σ(α·rank + β)` and applies one kernel `W` shared by all
//! clusters, like a strided 1-d convolution over the ordered neighborhoods.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CcpError, Result};
use crate::graph::DEGREE_EPS;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Shape of one layer: output clusters, output channels, neighborhood size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub k_out: usize,
    pub d_out: usize,
    pub l: usize,
}

impl LayerSpec {
    pub fn new(k_out: usize, d_out: usize, l: usize) -> Self {
        LayerSpec { k_out, d_out, l }
    }
}

/// How the selected neighborhood is laid out against the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Descending within-cluster centrality.
    #[default]
    Centrality,
    /// A fixed random permutation per cluster, drawn once when the layer is built.
    Random,
}

/// Output of the cluster step.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsenResult {
    /// `Kᵀ(A − I∘A)K`, before normalization.
    pub a_out: Tensor,
    pub a_norm: Tensor,
    pub k: Tensor,
}

/// The `L` nodes pooled into one cluster, in kernel order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedNeighborhood {
    pub cluster: usize,
    pub members: Vec<usize>,
    pub ranks: Vec<f64>,
    /// Gate activations; empty until [`OrderedNeighborhood::with_gates`] runs.
    pub gates: Vec<f64>,
}

impl OrderedNeighborhood {
    pub fn with_gates(mut self, layer: &CcpLayer) -> Self {
        self.gates = self.ranks.iter().map(|&r| layer.gate(r)).collect();
        self
    }
}

/// Clustering computed once and reused by every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenClustering {
    pub coarsen: CoarsenResult,
    pub neighborhoods: Vec<OrderedNeighborhood>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcpLayer {
    pub k_in: usize,
    pub k_out: usize,
    pub l: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Membership logits, `k_in × k_out`.
    pub u: Tensor,
    /// Shared kernel, `L × d_in × d_out`.
    pub w: Tensor,
    pub b: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
    /// Per-cluster position permutations when ordering is random.
    pub permutations: Option<Vec<Vec<usize>>>,
    pub frozen: Option<FrozenClustering>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub u: Var,
    pub w: Var,
    pub b: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// Tape handles produced by the cluster step.
#[derive(Debug, Clone, Copy)]
pub struct ClusterVars {
    pub k: Var,
    /// `(A − I∘A)K`, shared by coarsening and ranking.
    pub ak: Var,
    pub a_out: Var,
    pub a_norm: Var,
}

/// What one recorded layer application leaves on the tape.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `None` for frozen layers, whose clustering is a constant.
    pub cluster: Option<ClusterVars>,
    pub a_norm: Var,
    pub f_out: Var,
    pub neighborhoods: Vec<OrderedNeighborhood>,
}

/// Value-level result of [`CcpLayer::forward`].
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub a_norm: Tensor,
    pub f_out: Tensor,
    pub coarsen: CoarsenResult,
    pub neighborhoods: Vec<OrderedNeighborhood>,
}

impl CcpLayer {
    /// Randomly initialized layer: `U ~ N(0, 0.01²)`, `W` Glorot-uniform,
    /// `b = 0`, `α ~ N(1, 0.1²)`, `β ~ N(0, 0.1²)`.
    pub fn new<R: Rng>(
        k_in: usize,
        d_in: usize,
        spec: LayerSpec,
        ordering: Ordering,
        rng: &mut R,
    ) -> Result<Self> {
        let LayerSpec { k_out, d_out, l } = spec;
        if k_out == 0 || k_out > k_in {
            return Err(CcpError::InvalidArgument(format!(
                "layer needs 1 <= k_out <= k_in, got k_out={} k_in={}",
                k_out, k_in
            )));
        }
        if l == 0 || l > k_in {
            return Err(CcpError::InvalidArgument(format!(
                "layer needs 1 <= L <= k_in, got L={} k_in={}",
                l, k_in
            )));
        }
        if d_in == 0 || d_out == 0 {
            return Err(CcpError::InvalidArgument("feature dimensions must be positive".into()));
        }
        let logit = Normal::new(0.0, 0.01).expect("valid normal");
        let u = Tensor::new(
            vec![k_in, k_out],
            (0..k_in * k_out).map(|_| logit.sample(rng)).collect(),
        )?;
        let bound = (6.0 / (l * d_in + d_out) as f64).sqrt();
        let kernel = Uniform::new_inclusive(-bound, bound).expect("valid uniform");
        let w = Tensor::new(
            vec![l, d_in, d_out],
            (0..l * d_in * d_out).map(|_| kernel.sample(rng)).collect(),
        )?;
        let alpha = Tensor::new(vec![1], vec![Normal::new(1.0, 0.1).expect("valid").sample(rng)])?;
        let beta = Tensor::new(vec![1], vec![Normal::new(0.0, 0.1).expect("valid").sample(rng)])?;
        let permutations = match ordering {
            Ordering::Centrality => None,
            Ordering::Random => Some(
                (0..k_out)
                    .map(|_| {
                        let mut p: Vec<usize> = (0..l).collect();
                        p.shuffle(rng);
                        p
                    })
                    .collect(),
            ),
        };
        Ok(CcpLayer {
            k_in,
            k_out,
            l,
            d_in,
            d_out,
            u,
            w,
            b: Tensor::zeros(&[d_out]),
            alpha,
            beta,
            permutations,
            frozen: None,
        })
    }

    pub fn ordering(&self) -> Ordering {
        if self.permutations.is_some() {
            Ordering::Random
        } else {
            Ordering::Centrality
        }
    }

    /// Row-stochastic membership matrix `rowsoftmax(U)`.
    pub fn memberships(&self) -> Tensor {
        self.u.row_softmax()
    }

    /// Gate activation `σ(α·rank + β)`.
    pub fn gate(&self, rank_value: f64) -> f64 {
        sigmoid(self.alpha.data()[0] * rank_value + self.beta.data()[0])
    }

    fn check_input(&self, a: &Tensor) -> Result<()> {
        match a.dims2() {
            Some((r, c)) if r == self.k_in && c == self.k_in => Ok(()),
            _ => Err(CcpError::shape(
                "cluster_step",
                format!("affinity {:?} vs membership logits {:?}", a.shape(), self.u.shape()),
            )),
        }
    }

    /// Computes and caches the clustering for input affinity `a`; later
    /// frozen forwards reuse it and memberships receive no gradient.
    pub fn freeze(&mut self, a: &Tensor) -> Result<&FrozenClustering> {
        let coarsen = cluster_step(a, self, DEGREE_EPS)?;
        let ranks = rank_matrix(a, &coarsen.k)?;
        let neighborhoods = (0..self.k_out)
            .map(|k| self.arrange(select_from_ranks(&ranks, k, self.l)))
            .collect();
        self.frozen = Some(FrozenClustering {
            coarsen,
            neighborhoods,
        });
        Ok(self.frozen.as_ref().expect("just set"))
    }

    /// Applies the fixed random permutation, if any, to a centrality-sorted
    /// neighborhood.
    fn arrange(&self, sorted: OrderedNeighborhood) -> OrderedNeighborhood {
        match &self.permutations {
            None => sorted,
            Some(perms) => {
                let perm = &perms[sorted.cluster];
                OrderedNeighborhood {
                    cluster: sorted.cluster,
                    members: perm.iter().map(|&p| sorted.members[p]).collect(),
                    ranks: perm.iter().map(|&p| sorted.ranks[p]).collect(),
                    gates: Vec::new(),
                }
            }
        }
    }

    /// Full layer application on plain values, ELU included.
    pub fn forward(&self, a: &Tensor, f_in: &Tensor, frozen: bool) -> Result<LayerOutput> {
        self.check_input(a)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let a_var = tape.constant(a.clone());
        let f_var = tape.constant(f_in.clone());
        let trace = self.record(&mut tape, a_var, f_var, 1, &vars, frozen)?;
        let coarsen = match (&trace.cluster, &self.frozen) {
            (Some(cv), _) => CoarsenResult {
                a_out: tape.value(cv.a_out).clone(),
                a_norm: tape.value(cv.a_norm).clone(),
                k: tape.value(cv.k).clone(),
            },
            (None, Some(cache)) => cache.coarsen.clone(),
            (None, None) => unreachable!("record fails for frozen layers without a cache"),
        };
        let neighborhoods = trace
            .neighborhoods
            .into_iter()
            .map(|nb| nb.with_gates(self))
            .collect();
        Ok(LayerOutput {
            a_norm: tape.value(trace.a_norm).clone(),
            f_out: tape.value(trace.f_out).clone(),
            coarsen,
            neighborhoods,
        })
    }

    /// Puts the layer's parameters on a tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LayerVars {
            u: leaf(&self.u),
            w: leaf(&self.w),
            b: leaf(&self.b),
            alpha: leaf(&self.alpha),
            beta: leaf(&self.beta),
        }
    }

    /// Records the layer on a tape for a batch of `batch` signals stacked
    /// row-wise in `f_in` (`batch·k_in × d_in`). The output stacks
    /// `batch·k_out × d_out` rows, sample-major.
    pub fn record(
        &self,
        tape: &mut Tape,
        a_in: Var,
        f_in: Var,
        batch: usize,
        vars: &LayerVars,
        frozen: bool,
    ) -> Result<LayerTrace> {
        let f_shape = tape.value(f_in).shape().to_vec();
        if f_shape != [batch * self.k_in, self.d_in] {
            return Err(CcpError::shape(
                "filter_step",
                format!(
                    "features {:?}, expected [{}, {}]",
                    f_shape,
                    batch * self.k_in,
                    self.d_in
                ),
            ));
        }
        let (cluster, a_norm, neighborhoods, rank_sel) = if frozen {
            let cache = self.frozen.as_ref().ok_or_else(|| {
                CcpError::InvalidArgument("frozen forward on a layer that was never frozen".into())
            })?;
            let ranks = cache
                .neighborhoods
                .iter()
                .flat_map(|nb| nb.ranks.iter().copied())
                .collect();
            let rank_sel = tape.constant(Tensor::column(ranks));
            let a_norm = tape.constant(cache.coarsen.a_norm.clone());
            (None, a_norm, cache.neighborhoods.clone(), rank_sel)
        } else {
            self.check_input(tape.value(a_in))?;
            let cv = record_cluster_step(tape, a_in, vars.u, DEGREE_EPS)?;
            let kp1 = tape.shift(cv.k, 1.0)?;
            let rank_var = tape.mul(kp1, cv.ak)?;
            let ranks = tape.value(rank_var).clone();
            let neighborhoods: Vec<_> = (0..self.k_out)
                .map(|k| self.arrange(select_from_ranks(&ranks, k, self.l)))
                .collect();
            let flat = neighborhoods
                .iter()
                .flat_map(|nb| nb.members.iter().map(move |&i| i * self.k_out + nb.cluster))
                .collect();
            let rank_sel = tape.gather_elements(rank_var, flat)?;
            (Some(cv), cv.a_norm, neighborhoods, rank_sel)
        };
        let f_out = self.record_filter(tape, f_in, batch, &neighborhoods, rank_sel, vars)?;
        let f_out = tape.elu(f_out)?;
        Ok(LayerTrace {
            cluster,
            a_norm,
            f_out,
            neighborhoods,
        })
    }

    /// Gated shared-kernel aggregation without the activation.
    /// `rank_sel` holds the rank of every neighborhood slot, cluster-major.
    pub fn record_filter(
        &self,
        tape: &mut Tape,
        f_in: Var,
        batch: usize,
        neighborhoods: &[OrderedNeighborhood],
        rank_sel: Var,
        vars: &LayerVars,
    ) -> Result<Var> {
        if neighborhoods.len() != self.k_out || neighborhoods.iter().any(|nb| nb.members.len() != self.l) {
            return Err(CcpError::shape(
                "filter_step",
                format!("expected {} neighborhoods of {} nodes", self.k_out, self.l),
            ));
        }
        let scaled = tape.mul_scalar(rank_sel, vars.alpha)?;
        let pre = tape.add_scalar(scaled, vars.beta)?;
        let gates = tape.sigmoid(pre)?;
        let gates = if batch > 1 { tape.tile_rows(gates, batch)? } else { gates };
        let rows: Vec<usize> = (0..batch)
            .flat_map(|s| {
                neighborhoods
                    .iter()
                    .flat_map(move |nb| nb.members.iter().map(move |&i| s * self.k_in + i))
            })
            .collect();
        let gathered = tape.gather_rows(f_in, rows)?;
        let gated = tape.mul_column(gathered, gates)?;
        let patches = tape.reshape(gated, &[batch * self.k_out, self.l * self.d_in])?;
        let kernel = tape.reshape(vars.w, &[self.l * self.d_in, self.d_out])?;
        let out = tape.matmul(patches, kernel)?;
        tape.add_row(out, vars.b)
    }
}

/// Records `K = rowsoftmax(U)`, `A_out = Kᵀ(A − I∘A)K` and its normalization.
pub fn record_cluster_step(tape: &mut Tape, a: Var, u: Var, eps: f64) -> Result<ClusterVars> {
    let k = tape.row_softmax(u)?;
    let a_nd = tape.zero_diagonal(a)?;
    let ak = tape.matmul(a_nd, k)?;
    let kt = tape.transpose(k)?;
    let a_out = tape.matmul(kt, ak)?;
    let a_norm = record_normalize(tape, a_out, eps)?;
    Ok(ClusterVars { k, ak, a_out, a_norm })
}

/// Records `D^{-1/2} A D^{-1/2}` with degrees floored at `eps`.
pub fn record_normalize(tape: &mut Tape, a: Var, eps: f64) -> Result<Var> {
    let d = tape.sum_rows(a)?;
    let d = tape.clamp_min(d, eps)?;
    let inv = tape.pow_neg_half(d)?;
    let inv_t = tape.transpose(inv)?;
    let outer = tape.matmul(inv, inv_t)?;
    tape.mul(a, outer)
}

/// Cluster step on plain values.
pub fn cluster_step(a: &Tensor, layer: &CcpLayer, eps: f64) -> Result<CoarsenResult> {
    layer.check_input(a)?;
    let mut tape = Tape::new();
    let a_var = tape.constant(a.clone());
    let u_var = tape.constant(layer.u.clone());
    let cv = record_cluster_step(&mut tape, a_var, u_var, eps)?;
    Ok(CoarsenResult {
        a_out: tape.value(cv.a_out).clone(),
        a_norm: tape.value(cv.a_norm).clone(),
        k: tape.value(cv.k).clone(),
    })
}

/// Centrality of node `i` in cluster `k`: `(1 + K_ik) · Σ_{j≠i} A_ij K_jk`.
pub fn rank(a: &Tensor, k: &Tensor, i: usize, cluster: usize) -> f64 {
    let n = a.rows();
    let neighbors: f64 = (0..n)
        .filter(|&j| j != i)
        .map(|j| a.at(i, j) * k.at(j, cluster))
        .sum();
    (1.0 + k.at(i, cluster)) * neighbors
}

/// Ranks of every node for every cluster, `k_in × k_out`.
pub fn rank_matrix(a: &Tensor, k: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n || k.rows() != n {
        return Err(CcpError::shape(
            "rank",
            format!("affinity {:?} vs memberships {:?}", a.shape(), k.shape()),
        ));
    }
    let mut a_nd = a.clone();
    for i in 0..n {
        a_nd.set(i, i, 0.0);
    }
    let ak = a_nd.matmul(k)?;
    let data = ak
        .data()
        .iter()
        .zip(k.data())
        .map(|(s, kik)| (1.0 + kik) * s)
        .collect();
    Tensor::new(ak.shape().to_vec(), data)
}

/// The `l` most central nodes of `cluster`, by descending rank and then
/// ascending node index.
pub fn select_neighborhood(a: &Tensor, k: &Tensor, cluster: usize, l: usize) -> Result<OrderedNeighborhood> {
    let n = a.rows();
    if l == 0 || l > n {
        return Err(CcpError::InvalidArgument(format!(
            "neighborhood size {} must be in 1..={}",
            l, n
        )));
    }
    if cluster >= k.cols() {
        return Err(CcpError::InvalidArgument(format!(
            "cluster {} out of {}",
            cluster,
            k.cols()
        )));
    }
    let ranks = rank_matrix(a, k)?;
    Ok(select_from_ranks(&ranks, cluster, l))
}

fn select_from_ranks(ranks: &Tensor, cluster: usize, l: usize) -> OrderedNeighborhood {
    let n = ranks.rows();
    let column: Vec<f64> = (0..n).map(|i| ranks.at(i, cluster)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    order.truncate(l);
    OrderedNeighborhood {
        cluster,
        ranks: order.iter().map(|&i| column[i]).collect(),
        members: order,
        gates: Vec::new(),
    }
}

/// Gated aggregation on plain values:
/// `F_out[k,j] = Σ_l Σ_i W[l,i,j]·σ_{k,l}·F_in[φ_k(l), i] + b_j`.
pub fn filter_step(f_in: &Tensor, neighborhoods: &[OrderedNeighborhood], layer: &CcpLayer) -> Result<Tensor> {
    if f_in.dims2() != Some((layer.k_in, layer.d_in)) {
        return Err(CcpError::shape(
            "filter_step",
            format!("features {:?}, expected [{}, {}]", f_in.shape(), layer.k_in, layer.d_in),
        ));
    }
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, false);
    let f = tape.constant(f_in.clone());
    let ranks = neighborhoods.iter().flat_map(|nb| nb.ranks.iter().copied()).collect();
    let rank_sel = tape.constant(Tensor::column(ranks));
    let out = layer.record_filter(&mut tape, f, 1, neighborhoods, rank_sel, &vars)?;
    Ok(tape.value(out).clone())
}
