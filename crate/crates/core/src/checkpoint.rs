//! Checkpoint directories: `manifest.json`, `graph.txt` and one binary file
//! per parameter array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{CcpError, Result};
use crate::graph::AffinityGraph;
use crate::network::{build_network, Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, GraphSource, TrainOptions};

const ARRAY_MAGIC: &[u8; 4] = b"CCP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub options: TrainOptions,
    pub graph_source: GraphSource,
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    config: NetworkConfig,
    options: TrainOptions,
    epoch: usize,
    d_in: usize,
    graph_source: GraphSource,
    grid: Option<(usize, usize)>,
    arrays: Vec<String>,
    /// Per layer, the fixed neighborhood permutations when ordering is random.
    permutations: Vec<Option<Vec<Vec<usize>>>>,
    history: Vec<EpochMetrics>,
}

pub fn encode_array(t: &Tensor) -> Result<Vec<u8>> {
    let mut w = Writer::new(ARRAY_MAGIC);
    w.u32(t.shape().len())?;
    for &d in t.shape() {
        w.u32(d)?;
    }
    w.f64s(t.data());
    Ok(w.buf)
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    r.magic(ARRAY_MAGIC)?;
    let rank = r.u32("rank")?;
    if rank > 8 {
        return Err(r.error(format!("implausible rank {}", rank)));
    }
    let shape = (0..rank)
        .map(|i| r.u32(&format!("dimension {}", i)))
        .collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error("element count overflows"))?;
    let data = r.f64s(count, "values")?;
    r.finish()?;
    Tensor::new(shape, data)
}

fn file_name(array: &str) -> String {
    format!("{}.bin", array)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CcpError::io(dir, e))?;
        let net = &self.network;
        let names = net.param_names();
        for (name, t) in names.iter().zip(net.params()) {
            let path = dir.join(file_name(name));
            std::fs::write(&path, encode_array(t)?).map_err(|e| CcpError::io(&path, e))?;
        }
        net.graph.save(&dir.join("graph.txt"))?;
        let manifest = Manifest {
            format: 1,
            config: net.config.clone(),
            options: self.options.clone(),
            epoch: self.epoch,
            d_in: net.d_in,
            graph_source: self.graph_source,
            grid: self.grid,
            arrays: names,
            permutations: net.layers.iter().map(|l| l.permutations.clone()).collect(),
            history: self.history.clone(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CcpError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CcpError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CcpError::Parse {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let parse_err = |msg: String| CcpError::Parse {
            path: path.clone(),
            msg,
        };
        if manifest.format != 1 {
            return Err(parse_err(format!("unsupported format version {}", manifest.format)));
        }
        let graph = AffinityGraph::load(&dir.join("graph.txt"))?;
        let mut net: Network = build_network(&manifest.config, &graph, manifest.d_in)?;
        if manifest.arrays != net.param_names() {
            return Err(parse_err("array list does not match the configured architecture".into()));
        }
        if manifest.permutations.len() != net.layers.len() {
            return Err(parse_err("one permutation entry per layer expected".into()));
        }
        for (layer, perms) in net.layers.iter_mut().zip(manifest.permutations) {
            if perms.is_some() != layer.permutations.is_some() {
                return Err(parse_err("permutations disagree with the ordering".into()));
            }
            layer.permutations = perms;
        }
        let names = net.param_names();
        for (name, slot) in names.iter().zip(net.params_mut()) {
            let path = dir.join(file_name(name));
            let bytes = std::fs::read(&path).map_err(|e| CcpError::io(&path, e))?;
            let t = decode_array(&bytes, &path)?;
            if t.shape() != slot.shape() {
                return Err(CcpError::Format {
                    path,
                    offset: 4,
                    msg: format!("shape {:?}, architecture needs {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        net.refresh_frozen()?;
        Ok(Checkpoint {
            network: net,
            epoch: manifest.epoch,
            history: manifest.history,
            options: manifest.options,
            graph_source: manifest.graph_source,
            grid: manifest.grid,
        })
    }
}
