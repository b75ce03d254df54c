//! Multi-task performance metric, representational similarity analysis, and
//! the synthetic benchmark.

mod metric;
mod rsa;
mod synthetic;

pub use metric::{delta_m, MetricRecord, TaskMetric};
pub use rsa::{pearson, rank_average, rsa_matrix, spearman, RsaMatrix, DEFAULT_PROBES};
pub use synthetic::{generate_tasks, Dataset, SyntheticTaskSpec, BENCHMARK_LAYER_DIMS, CACHE_MAGIC, CACHE_VERSION};
