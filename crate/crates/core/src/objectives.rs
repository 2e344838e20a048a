//! Loss terms: soft cohesion and volume, the balanced clustering objective,
//! its multi-level sum, cross-entropy and the combined training objective.
//!
//! Every term has a plain-value form and a tape form; the tape forms are what
//! training differentiates.

use serde::{Deserialize, Serialize};

use crate::error::{CcpError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on cluster volumes in the objective's denominators.
pub const VOLUME_EPS: f64 = 1e-8;

/// Default l2 penalty on kernels and fully connected weights.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub cluster: f64,
    pub reg: f64,
    pub total: f64,
    pub per_level: Vec<f64>,
}

fn check_memberships(op: &'static str, a: &Tensor, k: &Tensor) -> Result<()> {
    let n = a.rows();
    if a.cols() != n || k.rows() != n {
        return Err(CcpError::shape(
            op,
            format!("affinity {:?} vs memberships {:?}", a.shape(), k.shape()),
        ));
    }
    Ok(())
}

/// `Σ_i K_ik Σ_{j≠i} A_ij K_jk`: twice the soft within-cluster edge weight.
pub fn cohesion(a: &Tensor, k: &Tensor, cluster: usize) -> Result<f64> {
    check_memberships("cohesion", a, k)?;
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let kik = k.at(i, cluster);
        if kik == 0.0 {
            continue;
        }
        let inner: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| a.at(i, j) * k.at(j, cluster))
            .sum();
        total += kik * inner;
    }
    Ok(total)
}

/// `Σ_i D_i K_ik`.
pub fn volume(degrees: &[f64], k: &Tensor, cluster: usize) -> Result<f64> {
    if degrees.len() != k.rows() {
        return Err(CcpError::shape(
            "volume",
            format!("{} degrees vs memberships {:?}", degrees.len(), k.shape()),
        ));
    }
    Ok(degrees.iter().enumerate().map(|(i, d)| d * k.at(i, cluster)).sum())
}

/// Degrees of `A − I∘A`.
pub fn offdiagonal_degrees(a: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, w)| w).sum())
        .collect()
}

/// `½ Σ_k Cohesion_k / max(Vol_k, eps)`. Self-affinities on the diagonal are
/// ignored by both cohesion and volume.
pub fn objective_c(a: &Tensor, k: &Tensor, eps: f64) -> Result<f64> {
    check_memberships("objective_c", a, k)?;
    let d = offdiagonal_degrees(a);
    let mut total = 0.0;
    for c in 0..k.cols() {
        total += cohesion(a, k, c)? / volume(&d, k, c)?.max(eps);
    }
    Ok(0.5 * total)
}

/// Sum of [`objective_c`] over the levels of a hierarchy.
pub fn cluster_loss(levels: &[(Tensor, Tensor)], eps: f64) -> Result<f64> {
    levels.iter().map(|(a, k)| objective_c(a, k, eps)).sum()
}

/// Tape form of [`objective_c`].
pub fn record_objective_c(tape: &mut Tape, a: Var, k: Var, eps: f64) -> Result<Var> {
    check_memberships("objective_c", tape.value(a), tape.value(k))?;
    let a_nd = tape.zero_diagonal(a)?;
    let ak = tape.matmul(a_nd, k)?;
    let kt = tape.transpose(k)?;
    let q = tape.matmul(kt, ak)?;
    let coh = tape.diagonal(q)?;
    let deg = tape.sum_rows(a_nd)?;
    let vol = tape.matmul(kt, deg)?;
    let vol = tape.clamp_min(vol, eps)?;
    let ratio = tape.div(coh, vol)?;
    let s = tape.sum_all(ratio)?;
    tape.scale(s, 0.5)
}

/// Tape form of [`cluster_loss`]; returns the total and the per-level terms.
pub fn record_cluster_loss(tape: &mut Tape, levels: &[(Var, Var)], eps: f64) -> Result<(Var, Vec<Var>)> {
    let mut terms = Vec::with_capacity(levels.len());
    for &(a, k) in levels {
        terms.push(record_objective_c(tape, a, k, eps)?);
    }
    let mut iter = terms.iter().copied();
    let first = iter
        .next()
        .ok_or_else(|| CcpError::InvalidArgument("cluster loss needs at least one level".into()))?;
    let total = iter.try_fold(first, |acc, t| tape.add(acc, t))?;
    Ok((total, terms))
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = logits
        .dims2()
        .ok_or_else(|| CcpError::shape("cross_entropy", "logits must be a matrix"))?;
    if b == 0 || labels.is_empty() {
        return Err(CcpError::InvalidArgument("cross-entropy over an empty batch".into()));
    }
    if labels.len() != b {
        return Err(CcpError::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), b),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(CcpError::InvalidArgument(format!("label {} out of {} classes", bad, c)));
    }
    Ok((b, c))
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = record_cross_entropy(&mut tape, l, labels)?;
    Ok(tape.scalar(out))
}

pub fn record_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = check_labels(tape.value(logits), labels)?;
    let logp = tape.row_log_softmax(logits)?;
    let picked = tape.gather_elements(logp, labels.iter().enumerate().map(|(i, &y)| i * c + y).collect())?;
    let s = tape.sum_all(picked)?;
    tape.scale(s, -1.0 / b as f64)
}

/// `task − λ·cluster + weight_decay·Σ‖W‖²` over the given decayed tensors.
pub fn total_loss(
    task: f64,
    cluster: f64,
    decayed: &[&Tensor],
    lambda_k: f64,
    weight_decay: f64,
) -> LossBreakdown {
    let sq: f64 = decayed.iter().flat_map(|t| t.data()).map(|x| x * x).sum();
    let reg = weight_decay * sq;
    LossBreakdown {
        task,
        cluster,
        reg,
        total: task - lambda_k * cluster + reg,
        per_level: Vec::new(),
    }
}

/// Tape form of the l2 penalty.
pub fn record_l2(tape: &mut Tape, decayed: &[Var], weight_decay: f64) -> Result<Option<Var>> {
    if weight_decay == 0.0 || decayed.is_empty() {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for &w in decayed {
        let sq = tape.mul(w, w)?;
        let s = tape.sum_all(sq)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s)?,
            None => s,
        });
    }
    let total = acc.expect("non-empty");
    Ok(Some(tape.scale(total, weight_decay)?))
}
