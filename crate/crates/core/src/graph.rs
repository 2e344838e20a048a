//! The fixed graph shared by every sample: dense affinity storage, degree
//! bookkeeping, symmetric normalization and the graph builders used by the
//! experiments.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CcpError, Result};
use crate::tensor::Tensor;

/// Floor applied to degrees before taking `D^{-1/2}`.
pub const DEGREE_EPS: f64 = 1e-8;

/// Symmetric, nonnegative, zero-diagonal affinity matrix with cached degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    weights: Tensor,
    degrees: Vec<f64>,
}

/// Per-node feature vectors, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSignal {
    pub values: Tensor,
}

impl GraphSignal {
    pub fn new(graph: &AffinityGraph, values: Tensor) -> Result<Self> {
        if values.dims2().is_none() || values.rows() != graph.n() {
            return Err(CcpError::shape(
                "graph_signal",
                format!("{:?} rows vs {} nodes", values.shape(), graph.n()),
            ));
        }
        Ok(GraphSignal { values })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

impl AffinityGraph {
    /// Validates and wraps a weight matrix.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let (n, c) = weights
            .dims2()
            .ok_or_else(|| CcpError::Graph("weights must be a matrix".into()))?;
        if n != c {
            return Err(CcpError::Graph(format!("weights must be square, got {}x{}", n, c)));
        }
        for i in 0..n {
            if weights.at(i, i) != 0.0 {
                return Err(CcpError::Graph(format!("self-loop on node {}", i)));
            }
            for j in 0..n {
                let w = weights.at(i, j);
                if !w.is_finite() || w < 0.0 {
                    return Err(CcpError::Graph(format!("bad weight {} at ({}, {})", w, i, j)));
                }
                if w != weights.at(j, i) {
                    return Err(CcpError::Graph(format!("asymmetric at ({}, {})", i, j)));
                }
            }
        }
        let degrees = (0..n).map(|i| weights.row(i).iter().sum()).collect();
        Ok(AffinityGraph { weights, degrees })
    }

    /// Builds an unweighted graph from undirected edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let weighted: Vec<_> = edges.iter().map(|&(i, j)| (i, j, 1.0)).collect();
        Self::from_weighted_edges(n, &weighted)
    }

    pub fn from_weighted_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = Tensor::zeros(&[n, n]);
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(CcpError::Graph(format!("edge ({}, {}) outside {} nodes", i, j, n)));
            }
            if i == j {
                return Err(CcpError::Graph(format!("self-loop on node {}", i)));
            }
            w.set(i, j, weight);
            w.set(j, i, weight);
        }
        Self::from_weights(w)
    }

    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Undirected edges `(i, j, w)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.weights.at(i, j);
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for (j, s) in seen.iter_mut().enumerate() {
                if !*s && self.weights.at(i, j) != 0.0 {
                    *s = true;
                    reached += 1;
                    queue.push_back(j);
                }
            }
        }
        reached == n
    }

    /// Normalized affinity `D^{-1/2} A D^{-1/2}`.
    pub fn normalized(&self) -> Tensor {
        normalize(&self.weights, DEGREE_EPS).expect("graph weights are valid")
    }

    pub fn to_edge_list(&self) -> String {
        let edges = self.edges();
        let mut out = format!("{} {}\n", self.n(), edges.len());
        for (i, j, w) in edges {
            let _ = writeln!(out, "{} {} {}", i, j, w);
        }
        out
    }

    pub fn parse_edge_list(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| CcpError::Parse {
            path: origin.to_path_buf(),
            msg: format!("line {}: {}", line, msg),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let [n, m] = head.as_slice() else {
            return Err(err(1, format!("expected `n m`, got `{}`", header)));
        };
        let n: usize = n.parse().map_err(|_| err(1, format!("bad node count `{}`", n)))?;
        let m: usize = m.parse().map_err(|_| err(1, format!("bad edge count `{}`", m)))?;
        let mut edges = Vec::with_capacity(m);
        for (idx, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [i, j, w] = parts.as_slice() else {
                return Err(err(idx + 1, format!("expected `i j w`, got `{}`", line)));
            };
            let i: usize = i.parse().map_err(|_| err(idx + 1, format!("bad index `{}`", i)))?;
            let j: usize = j.parse().map_err(|_| err(idx + 1, format!("bad index `{}`", j)))?;
            let w: f64 = w.parse().map_err(|_| err(idx + 1, format!("bad weight `{}`", w)))?;
            edges.push((i, j, w));
        }
        if edges.len() != m {
            return Err(err(0, format!("header promises {} edges, found {}", m, edges.len())));
        }
        Self::from_weighted_edges(n, &edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| CcpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CcpError::io(path, e))?;
        Self::parse_edge_list(&text, path)
    }
}

/// `D^{-1/2} A D^{-1/2}` with `D_i = max(Σ_j A_ij, eps)`.
pub fn normalize(a: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c) = a.dims2().ok_or_else(|| CcpError::shape("normalize", "not a matrix"))?;
    if n != c {
        return Err(CcpError::shape("normalize", format!("{}x{} is not square", n, c)));
    }
    if let Some(bad) = a.data().iter().find(|&&x| x < 0.0) {
        return Err(CcpError::InvalidArgument(format!(
            "normalize: negative affinity {}",
            bad
        )));
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().max(eps).sqrt())
        .collect();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, a.at(i, j) * inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// Pixel grid with 8-connectivity; node `y * width + x`.
pub fn build_grid8(width: usize, height: usize) -> Result<AffinityGraph> {
    if width == 0 || height == 0 {
        return Err(CcpError::Graph(format!("grid dimensions must be positive, got {}x{}", width, height)));
    }
    let idx = |x: usize, y: usize| y * width + x;
    let mut edges = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if x + 1 < width {
                edges.push((idx(x, y), idx(x + 1, y)));
            }
            if y + 1 < height {
                edges.push((idx(x, y), idx(x, y + 1)));
                if x + 1 < width {
                    edges.push((idx(x, y), idx(x + 1, y + 1)));
                }
                if x > 0 {
                    edges.push((idx(x, y), idx(x - 1, y + 1)));
                }
            }
        }
    }
    AffinityGraph::from_edges(width * height, &edges)
}

/// Skeleton repeated over `frames`; node `t * joints + j`. Spatial edges
/// follow `skeleton_edges` inside each frame, temporal edges link each joint
/// to itself in the next frame. All weights are one.
pub fn build_spatiotemporal(
    joints: usize,
    frames: usize,
    skeleton_edges: &[(usize, usize)],
) -> Result<AffinityGraph> {
    if frames == 0 || joints == 0 {
        return Err(CcpError::Graph("need at least one joint and one frame".into()));
    }
    if let Some(&(a, b)) = skeleton_edges.iter().find(|&&(a, b)| a >= joints || b >= joints) {
        return Err(CcpError::Graph(format!(
            "skeleton edge ({}, {}) references a joint outside 0..{}",
            a, b, joints
        )));
    }
    let mut edges = Vec::new();
    for t in 0..frames {
        let base = t * joints;
        edges.extend(skeleton_edges.iter().map(|&(a, b)| (base + a, base + b)));
        if t + 1 < frames {
            edges.extend((0..joints).map(|j| (base + j, base + joints + j)));
        }
    }
    AffinityGraph::from_edges(joints * frames, &edges)
}

/// Connected unit-weight graph with the template's node and edge counts:
/// a uniformly shuffled spanning tree plus uniformly drawn extra edges.
pub fn build_random_isomorphic(template: &AffinityGraph, seed: u64) -> Result<AffinityGraph> {
    let n = template.n();
    let m = template.edge_count();
    if n == 0 {
        return Ok(template.clone());
    }
    if m + 1 < n {
        return Err(CcpError::Graph(format!(
            "template has {} edges, fewer than the {} a connected graph on {} nodes needs",
            m,
            n - 1,
            n
        )));
    }
    if !template.is_connected() {
        return Err(CcpError::Graph("template graph is not connected".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut present = vec![false; n * n];
    let mut edges = Vec::with_capacity(m);
    for i in 1..n {
        let a = order[i];
        let b = order[rng.random_range(0..i)];
        present[a * n + b] = true;
        present[b * n + a] = true;
        edges.push((a.min(b), a.max(b)));
    }
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !present[i * n + j])
        .collect();
    let extra = m - (n - 1);
    let (chosen, _) = candidates.partial_shuffle(&mut rng, extra);
    edges.extend_from_slice(chosen);
    AffinityGraph::from_edges(n, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_2x2_is_complete() {
        let g = build_grid8(2, 2).unwrap();
        assert_eq!(g.n(), 4);
        assert_eq!(g.edge_count(), 6);
    }

    #[test]
    fn grid_3x3_degrees() {
        let g = build_grid8(3, 3).unwrap();
        assert_eq!(g.degrees()[4], 8.0);
        assert_eq!(g.degrees()[0], 3.0);
        assert_eq!(g.degrees()[1], 5.0);
        assert_eq!(g.degrees()[3], 5.0);
    }

    #[test]
    fn grid_cifar_size() {
        let g = build_grid8(32, 32).unwrap();
        assert_eq!(g.n(), 1024);
        assert!(g.is_connected());
    }

    #[test]
    fn grid_zero_dimension_rejected() {
        assert!(build_grid8(0, 3).is_err());
        assert!(build_grid8(3, 0).is_err());
    }

    #[test]
    fn spatiotemporal_small() {
        let g = build_spatiotemporal(2, 2, &[(0, 1)]).unwrap();
        assert_eq!(g.n(), 4);
        assert_eq!(g.edge_count(), 4);
        assert_eq!(g.weights().at(0, 2), 1.0);
        assert_eq!(g.weights().at(1, 3), 1.0);
    }

    #[test]
    fn spatiotemporal_ntu_size() {
        let skeleton: Vec<_> = (1..25).map(|j| (0, j)).collect();
        let g = build_spatiotemporal(25, 80, &skeleton).unwrap();
        assert_eq!(g.n(), 2000);
    }

    #[test]
    fn spatiotemporal_single_frame_is_skeleton() {
        let skeleton = [(0, 1), (0, 2), (2, 3)];
        let g = build_spatiotemporal(4, 1, &skeleton).unwrap();
        assert_eq!(g, AffinityGraph::from_edges(4, &skeleton).unwrap());
    }

    #[test]
    fn spatiotemporal_bad_joint() {
        assert!(build_spatiotemporal(3, 2, &[(0, 3)]).is_err());
    }

    #[test]
    fn random_from_path_is_a_path() {
        let p3 = AffinityGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        for seed in 0..10 {
            let g = build_random_isomorphic(&p3, seed).unwrap();
            assert_eq!(g.n(), 3);
            assert_eq!(g.edge_count(), 2);
            assert!(g.is_connected());
            let mut degs = g.degrees().to_vec();
            degs.sort_by(f64::total_cmp);
            assert_eq!(degs, vec![1.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn random_from_grid_keeps_counts() {
        let grid = build_grid8(4, 4).unwrap();
        let g = build_random_isomorphic(&grid, 7).unwrap();
        assert_eq!(g.n(), 16);
        assert_eq!(g.edge_count(), 42);
        assert!(g.is_connected());
        assert_eq!(g, build_random_isomorphic(&grid, 7).unwrap());
        assert_ne!(g, build_random_isomorphic(&grid, 8).unwrap());
    }

    #[test]
    fn random_needs_enough_edges() {
        let sparse = AffinityGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(build_random_isomorphic(&sparse, 0).is_err());
    }

    #[test]
    fn normalize_single_edge_is_identity_map() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(normalize(&a, DEGREE_EPS).unwrap(), a);
    }

    #[test]
    fn normalize_regular_graph_divides_by_degree() {
        let g = build_grid8(2, 2).unwrap();
        let out = normalize(g.weights(), DEGREE_EPS).unwrap();
        let expected = g.weights().map(|x| x / 3.0);
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn normalize_path() {
        let g = AffinityGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let out = g.normalized();
        let s = 1.0 / 2f64.sqrt();
        assert!((out.at(0, 1) - s).abs() < 1e-15);
        assert!((out.at(1, 2) - s).abs() < 1e-15);
        assert_eq!(out.at(0, 2), 0.0);
    }

    #[test]
    fn normalize_rejects_negative() {
        let a = Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(normalize(&a, DEGREE_EPS).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let g = build_grid8(3, 4).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("12 "));
        let back = AffinityGraph::parse_edge_list(&text, Path::new("mem")).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn edge_list_count_mismatch() {
        let err = AffinityGraph::parse_edge_list("3 2\n0 1 1\n", Path::new("mem"));
        assert!(err.is_err());
    }
}
