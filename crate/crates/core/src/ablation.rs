//! The mode × ordering × graph ablation matrix.

use std::fmt::Write as _;

use serde::Serialize;

use crate::ccp::Ordering;
use crate::datasets::GraphDataset;
use crate::error::Result;
use crate::network::{NetworkConfig, TrainMode};
use crate::train::{train, EpochMetrics, GraphSource, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub mode: TrainMode,
    pub ordering: Ordering,
    pub graph: GraphSource,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{} / {} / {}",
            self.mode.name(),
            match self.ordering {
                Ordering::Centrality => "centrality",
                Ordering::Random => "random-order",
            },
            self.graph.name()
        )
    }
}

/// All 16 cells, modes outermost.
pub fn full_matrix() -> Vec<Cell> {
    let mut out = Vec::with_capacity(16);
    for mode in TrainMode::ALL {
        for ordering in [Ordering::Centrality, Ordering::Random] {
            for graph in [GraphSource::Structured, GraphSource::Random] {
                out.push(Cell { mode, ordering, graph });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub cell: Cell,
    pub seed: u64,
    pub test_acc: f64,
    pub history: Vec<EpochMetrics>,
}

/// Trains one cell with one seed. The random graph, when used, is drawn
/// from the same seed.
pub fn run_cell(
    base: &NetworkConfig,
    opts: &TrainOptions,
    dataset: &GraphDataset,
    cell: Cell,
    seed: u64,
) -> Result<RunResult> {
    let cfg = NetworkConfig {
        mode: cell.mode,
        ordering: cell.ordering,
        seed,
        ..base.clone()
    };
    let graph = cell.graph.resolve(dataset, seed)?;
    let ckpt = train(&cfg, opts, &graph, dataset)?;
    let test_acc = ckpt.history.last().map_or(0.0, |m| m.test_acc);
    Ok(RunResult {
        cell,
        seed,
        test_acc,
        history: ckpt.history,
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub cell: Cell,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(cells: &[Cell], runs: &[RunResult]) -> Vec<Summary> {
    cells
        .iter()
        .map(|&cell| {
            let accuracies: Vec<f64> = runs.iter().filter(|r| r.cell == cell).map(|r| r.test_acc).collect();
            let (mean, std) = mean_std(&accuracies);
            Summary {
                cell,
                accuracies,
                mean,
                std,
            }
        })
        .collect()
}

/// Plain-text table, one row per cell.
pub fn report(summaries: &[Summary]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<52} {:>6} {:>8} {:>8}", "mode / ordering / graph", "seeds", "mean", "std");
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<52} {:>6} {:>8.4} {:>8.4}",
            s.cell.label(),
            s.accuracies.len(),
            s.mean,
            s.std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_has_sixteen_distinct_cells() {
        let cells = full_matrix();
        assert_eq!(cells.len(), 16);
        for (i, a) in cells.iter().enumerate() {
            assert!(cells[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn population_statistics() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
