//! Procedural datasets of signals on fixed graphs, and their file format.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{CcpError, Result};
use crate::graph::{build_grid8, build_spatiotemporal, AffinityGraph, GraphSignal};
use crate::tensor::Tensor;

const SAMPLES_MAGIC: &[u8; 4] = b"CCPD";
pub const GRID_NOISE: f64 = 0.1;
pub const MOTION_NOISE: f64 = 0.05;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub signal: GraphSignal,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub graph: AffinityGraph,
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// `(width, height)` when the graph is a pixel grid.
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    class_names: Vec<String>,
    train: Vec<usize>,
    test: Vec<usize>,
    grid: Option<(usize, usize)>,
}

impl GraphDataset {
    /// Checks the type's invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n();
        let d = self.d_in();
        for (idx, s) in self.samples.iter().enumerate() {
            if s.signal.values.rows() != n || s.signal.dim() != d {
                return Err(CcpError::shape(
                    "dataset",
                    format!("sample {} has shape {:?}, expected [{}, {}]", idx, s.signal.values.shape(), n, d),
                ));
            }
            if s.label >= self.class_names.len() {
                return Err(CcpError::InvalidArgument(format!(
                    "sample {} has label {} with {} classes",
                    idx,
                    s.label,
                    self.class_names.len()
                )));
            }
        }
        let mut seen = vec![false; self.samples.len()];
        for &i in self.train.iter().chain(&self.test) {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(CcpError::InvalidArgument(format!(
                    "split index {} out of range or repeated",
                    i
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(CcpError::InvalidArgument("train/test split does not cover every sample".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.samples.first().map_or(1, |s| s.signal.dim())
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the signals at `indices` row-wise with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.graph.n();
        let d = self.d_in();
        let mut data = Vec::with_capacity(indices.len() * n * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].signal.values.data());
            labels.push(self.samples[i].label);
        }
        (Tensor::new(vec![indices.len() * n, d], data).expect("sized"), labels)
    }

    /// Same samples on another graph with the same node count.
    pub fn with_graph(&self, graph: AffinityGraph) -> Result<Self> {
        if graph.n() != self.graph.n() {
            return Err(CcpError::Graph(format!(
                "replacement graph has {} nodes, dataset has {}",
                graph.n(),
                self.graph.n()
            )));
        }
        Ok(GraphDataset {
            graph,
            grid: None,
            ..self.clone()
        })
    }
}

fn split(count: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let n_train = (count as f64 * TRAIN_FRACTION).round() as usize;
    let test = order.split_off(n_train);
    (order, test)
}

/// Grid shape classes, in label order.
pub const GRID_CLASSES: [&str; 4] = ["horizontal-bar", "vertical-bar", "diagonal-bar", "blob"];

/// Noiseless rendering of one shape on a `size × size` grid.
pub fn render_shape<R: Rng>(class: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    let len = size / 2;
    match class {
        0 => {
            let y = rng.random_range(0..size);
            let x0 = rng.random_range(0..=size - len);
            (x0..x0 + len).for_each(|x| img[y * size + x] = 1.0);
        }
        1 => {
            let x = rng.random_range(0..size);
            let y0 = rng.random_range(0..=size - len);
            (y0..y0 + len).for_each(|y| img[y * size + x] = 1.0);
        }
        2 => {
            let x0 = rng.random_range(0..=size - len);
            let y0 = rng.random_range(0..=size - len);
            let anti = rng.random_bool(0.5);
            for t in 0..len {
                let x = if anti { x0 + len - 1 - t } else { x0 + t };
                img[(y0 + t) * size + x] = 1.0;
            }
        }
        _ => {
            let r = size as f64 / 8.0 + 0.5;
            let margin = r.ceil() as usize;
            let cx = rng.random_range(margin..size - margin) as f64;
            let cy = rng.random_range(margin..size - margin) as f64;
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        img[y * size + x] = 1.0;
                    }
                }
            }
        }
    }
    img
}

/// Bars and blobs on an 8-connected `size × size` grid with Gaussian pixel
/// noise. Requires `size ≥ 8`.
pub fn gen_grid_shapes(size: usize, n_per_class: usize, seed: u64) -> Result<GraphDataset> {
    if size < 8 {
        return Err(CcpError::InvalidArgument(format!("grid size {} is below 8", size)));
    }
    let graph = build_grid8(size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, GRID_NOISE).expect("valid sigma");
    let mut samples = Vec::with_capacity(4 * n_per_class);
    for class in 0..GRID_CLASSES.len() {
        for _ in 0..n_per_class {
            let mut img = render_shape(class, size, &mut rng);
            img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            let values = Tensor::new(vec![size * size, 1], img)?;
            samples.push(Sample {
                signal: GraphSignal::new(&graph, values)?,
                label: class,
            });
        }
    }
    let (train, test) = split(samples.len(), &mut rng);
    Ok(GraphDataset {
        graph,
        samples,
        class_names: GRID_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        test,
        grid: Some((size, size)),
    })
}

pub const MOTION_CLASSES: [&str; 3] = ["oscillation", "drift", "rotation"];

/// Star skeleton: joint 0 is the hub.
pub fn star_skeleton(joints: usize) -> Vec<(usize, usize)> {
    (1..joints).map(|j| (0, j)).collect()
}

/// 2-D trajectories of a star skeleton over `frames` frames. Node
/// `t·joints + j` carries joint `j`'s coordinates at frame `t`.
pub fn gen_skeleton_motion(joints: usize, frames: usize, n_per_class: usize, seed: u64) -> Result<GraphDataset> {
    if joints < 5 || frames < 8 {
        return Err(CcpError::InvalidArgument(format!(
            "need at least 5 joints and 8 frames, got {} and {}",
            joints, frames
        )));
    }
    let graph = build_spatiotemporal(joints, frames, &star_skeleton(joints))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, MOTION_NOISE).expect("valid sigma");
    let rest: Vec<(f64, f64)> = (0..joints)
        .map(|j| {
            if j == 0 {
                (0.0, 0.0)
            } else {
                let a = 2.0 * PI * (j - 1) as f64 / (joints - 1) as f64;
                (a.cos(), a.sin())
            }
        })
        .collect();
    let mut samples = Vec::with_capacity(3 * n_per_class);
    for class in 0..MOTION_CLASSES.len() {
        for _ in 0..n_per_class {
            let offset = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let heading = rng.random_range(0.0..2.0 * PI);
            let (hx, hy) = (heading.cos(), heading.sin());
            let amount = match class {
                0 => rng.random_range(0.2..0.4),
                1 => rng.random_range(0.5..1.0),
                _ => rng.random_range(PI / 2.0..PI) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            };
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut data = Vec::with_capacity(joints * frames * 2);
            for t in 0..frames {
                let s = t as f64 / (frames - 1) as f64;
                for &(x, y) in &rest {
                    let (px, py) = match class {
                        0 => {
                            let w = amount * (2.0 * PI * s + phase).sin();
                            (x + w * hx, y + w * hy)
                        }
                        1 => (x + amount * s * hx, y + amount * s * hy),
                        _ => {
                            let a = amount * s;
                            (x * a.cos() - y * a.sin(), x * a.sin() + y * a.cos())
                        }
                    };
                    data.push(px + offset.0 + noise.sample(&mut rng));
                    data.push(py + offset.1 + noise.sample(&mut rng));
                }
            }
            let values = Tensor::new(vec![joints * frames, 2], data)?;
            samples.push(Sample {
                signal: GraphSignal::new(&graph, values)?,
                label: class,
            });
        }
    }
    let (train, test) = split(samples.len(), &mut rng);
    Ok(GraphDataset {
        graph,
        samples,
        class_names: MOTION_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        test,
        grid: None,
    })
}

/// Writes `graph.txt`, `samples.bin` and `meta.json` into directory `dir`.
pub fn save_dataset(ds: &GraphDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| CcpError::io(dir, e))?;
    ds.graph.save(&dir.join("graph.txt"))?;
    let mut w = Writer::new(SAMPLES_MAGIC);
    w.u32(ds.samples.len())?;
    w.u32(ds.graph.n())?;
    w.u32(ds.d_in())?;
    for s in &ds.samples {
        w.u32(s.label)?;
        w.f64s(s.signal.values.data());
    }
    let path = dir.join("samples.bin");
    std::fs::write(&path, &w.buf).map_err(|e| CcpError::io(&path, e))?;
    let meta = Meta {
        class_names: ds.class_names.clone(),
        train: ds.train.clone(),
        test: ds.test.clone(),
        grid: ds.grid,
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| CcpError::io(&path, e))
}

/// Parses a samples file for a graph with `n` nodes.
pub fn parse_samples(bytes: &[u8], path: &Path, n: usize) -> Result<Vec<(usize, Tensor)>> {
    let mut r = Reader::new(bytes, path);
    r.magic(SAMPLES_MAGIC)?;
    let count = r.u32("sample count")?;
    let file_n = r.u32("node count")?;
    if file_n != n {
        return Err(r.error(format!("samples are for {} nodes, graph has {}", file_n, n)));
    }
    let d_in = r.u32("channel count")?;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 8 + 1));
    for idx in 0..count {
        let label = r.u32(&format!("label of sample {}", idx))?;
        let values = r.f64s(n * d_in, &format!("values of sample {}", idx))?;
        out.push((label, Tensor::new(vec![n, d_in], values)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<GraphDataset> {
    let graph = AffinityGraph::load(&dir.join("graph.txt"))?;
    let path = dir.join("samples.bin");
    let bytes = std::fs::read(&path).map_err(|e| CcpError::io(&path, e))?;
    let raw = parse_samples(&bytes, &path, graph.n())?;
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CcpError::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| CcpError::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let samples = raw
        .into_iter()
        .map(|(label, values)| {
            Ok(Sample {
                signal: GraphSignal::new(&graph, values)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = GraphDataset {
        graph,
        samples,
        class_names: meta.class_names,
        train: meta.train,
        test: meta.test,
        grid: meta.grid,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_bar_occupies_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let img = render_shape(0, 12, &mut rng);
            let rows: Vec<f64> = (0..12).map(|y| img[y * 12..(y + 1) * 12].iter().sum()).collect();
            assert_eq!(rows.iter().filter(|&&r| r > 0.0).count(), 1);
            assert_eq!(rows.iter().sum::<f64>(), 6.0);
        }
    }

    #[test]
    fn vertical_and_diagonal_bars() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = render_shape(1, 8, &mut rng);
        let cols: Vec<f64> = (0..8).map(|x| (0..8).map(|y| img[y * 8 + x]).sum()).collect();
        assert_eq!(cols.iter().filter(|&&c| c > 0.0).count(), 1);
        let img = render_shape(2, 8, &mut rng);
        let rows: Vec<f64> = (0..8).map(|y| img[y * 8..(y + 1) * 8].iter().sum()).collect();
        assert_eq!(rows.iter().filter(|&&r| r == 1.0).count(), 4);
    }

    #[test]
    fn classes_balanced_and_split_disjoint() {
        let ds = gen_grid_shapes(8, 10, 0).unwrap();
        ds.validate().unwrap();
        for c in 0..4 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 10);
        }
        assert_eq!(ds.train.len(), 32);
        assert_eq!(ds.test.len(), 8);
    }

    #[test]
    fn small_grid_rejected() {
        assert!(gen_grid_shapes(7, 1, 0).is_err());
        assert!(gen_skeleton_motion(4, 8, 1, 0).is_err());
        assert!(gen_skeleton_motion(5, 7, 1, 0).is_err());
    }

    #[test]
    fn motion_is_deterministic_and_finite() {
        let a = gen_skeleton_motion(5, 8, 4, 9).unwrap();
        assert_eq!(a, gen_skeleton_motion(5, 8, 4, 9).unwrap());
        assert_ne!(a, gen_skeleton_motion(5, 8, 4, 10).unwrap());
        assert!(a.samples.iter().all(|s| s.signal.values.is_finite() && s.signal.dim() == 2));
        assert_eq!(a.graph.n(), 40);
    }

    #[test]
    fn drift_moves_further_than_oscillation() {
        let ds = gen_skeleton_motion(5, 10, 40, 1).unwrap();
        let disp = |s: &Sample| {
            let v = &s.signal.values;
            let last = 9 * 5;
            (0..5)
                .map(|j| {
                    let dx = v.at(last + j, 0) - v.at(j, 0);
                    let dy = v.at(last + j, 1) - v.at(j, 1);
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
        };
        let mean = |c: usize| {
            let xs: Vec<f64> = ds.samples.iter().filter(|s| s.label == c).map(disp).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean(1) > mean(0));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_grid_shapes(8, 10, 0).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_samples_report_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_grid_shapes(8, 2, 0).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("samples.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_dataset(dir.path()) {
            Err(CcpError::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("{:?}", other),
        }
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(CcpError::Format { offset: 0, .. })));
    }

    #[test]
    fn empty_sample_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = gen_grid_shapes(8, 1, 0).unwrap();
        ds.samples.clear();
        ds.train.clear();
        ds.test.clear();
        save_dataset(&ds, dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join("samples.bin")).unwrap();
        assert_eq!(&bytes[4..8], &0u32.to_le_bytes());
        assert!(load_dataset(dir.path()).unwrap().samples.is_empty());
    }
}
