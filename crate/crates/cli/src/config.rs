//! TOML run configuration.

use std::path::{Path, PathBuf};

use ccp::datasets::{gen_grid_shapes, gen_skeleton_motion, load_dataset, GraphDataset};
use ccp::{GraphSource, NetworkConfig, TrainOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    GridShapes {
        size: usize,
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    SkeletonMotion {
        joints: usize,
        frames: usize,
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A directory written by `ccp gen`, relative to the config file.
    File { path: PathBuf },
}

impl DataSpec {
    pub fn load(&self, base: &Path) -> ccp::Result<GraphDataset> {
        match self {
            DataSpec::GridShapes { size, n_per_class, seed } => gen_grid_shapes(*size, *n_per_class, *seed),
            DataSpec::SkeletonMotion {
                joints,
                frames,
                n_per_class,
                seed,
            } => gen_skeleton_motion(*joints, *frames, *n_per_class, *seed),
            DataSpec::File { path } => load_dataset(&base.join(path)),
        }
    }
}

fn default_seeds() -> u64 {
    5
}
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    /// Cells trained concurrently.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: default_seeds(),
            jobs: default_jobs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub graph: GraphSource,
    #[serde(default)]
    pub ablate: AblateConfig,
    /// Directory that config-relative paths resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSpec::GridShapes {
                size: 16,
                n_per_class: 200,
                seed: 0,
            },
            network: NetworkConfig::desk_grid(),
            train: TrainOptions {
                batch_size: 16,
                ..TrainOptions::default()
            },
            graph: GraphSource::Structured,
            ablate: AblateConfig::default(),
            base: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| format!("{}: {}", origin.display(), e))?;
        cfg.base = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {}", path.display(), e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
