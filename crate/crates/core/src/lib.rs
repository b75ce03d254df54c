//! Branched multi-task architecture search.
//!
//! A layered encoder holds one candidate operation per task in every layer.
//! Each task learns a relaxed routing through the candidates; tasks whose picks
//! agree share computation, and the expected encoder MAdds of the routing
//! distribution is computed exactly over the lattice of task groupings so it
//! can be traded off against task performance by gradient descent.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which the gradient checks rely on.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod graph;
pub mod nncore;
pub mod partition;
pub mod relax;
pub mod resloss;
pub mod rng;
pub mod scalar;
pub mod search;

pub use error::{Error, Result};
pub use partition::{ancestors, enumerate_partitions, AncestorSet, Partition, PartitionLattice};
pub use scalar::Scalar;

pub type Tensor = nncore::Tensor<f64>;
pub type ArchitectureParams = resloss::ArchitectureParams<f64>;
pub type CostTable = graph::CostTable<f64>;
pub type SupergraphSpec = graph::SupergraphSpec<f64>;
pub type RoutingMask = graph::RoutingMask<f64>;
pub type GroupingDistribution = resloss::GroupingDistribution<f64>;
pub type OperationParams = nncore::OperationParams<f64>;
pub type BranchedNet = nncore::BranchedNet<f64>;
pub type Dataset = eval::Dataset<f64>;
pub type SearchResult = search::SearchResult<f64>;
