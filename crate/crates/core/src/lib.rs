//! Graph-signal classification with convolutional cluster pooling.
//!
//! Each layer softly assigns the nodes of an affinity graph to fewer
//! clusters, coarsens the graph, and pools every cluster's top-ranked nodes
//! through a shared, gated kernel.

pub mod ablation;
mod binio;
pub mod ccp;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use ccp::{CcpLayer, LayerSpec, Ordering, OrderedNeighborhood};
pub use checkpoint::Checkpoint;
pub use datasets::{gen_grid_shapes, gen_skeleton_motion, GraphDataset};
pub use error::{CcpError, Result};
pub use graph::{AffinityGraph, GraphSignal};
pub use network::{build_network, Network, NetworkConfig, TrainMode};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{evaluate, train, EpochMetrics, GraphSource, TrainOptions};
