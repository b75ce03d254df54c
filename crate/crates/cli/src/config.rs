//! Run configuration: supergraph, search, benchmark and output settings.
//!
//! The accepted document is described by `schema/run-config.schema.json`;
//! unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use bmtas::eval::SyntheticTaskSpec;
use bmtas::graph::CostTable;
use bmtas::search::SearchConfig;
use bmtas::SupergraphSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    /// `(in, out)` width of every encoder layer during the search.
    pub layer_dims: Vec<(usize, usize)>,
    /// Per-layer cost of one operation; `2 * in * out` when absent.
    #[serde(default)]
    pub unit_costs: Option<Vec<f64>>,
    /// Encoder widths for retraining; the search widths when absent.
    #[serde(default)]
    pub retrain_layer_dims: Option<Vec<(usize, usize)>>,
    pub search: SearchConfig,
    pub benchmark: SyntheticTaskSpec,
    #[serde(default)]
    pub task_names: Option<Vec<String>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// One run per seed; `[search.seed]` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// One run per value for every seed; `[search.lambda]` when empty.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    /// Directory for binary benchmark caches.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Train single-task baselines and report the multi-task performance change.
    #[serde(default = "default_true")]
    pub baselines: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::parse(path, &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn num_tasks(&self) -> usize {
        self.benchmark.num_tasks
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.search.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.lambdas.is_empty() {
            vec![self.search.lambda]
        } else {
            self.lambdas.clone()
        }
    }

    pub fn task_names(&self) -> Vec<String> {
        self.task_names
            .clone()
            .unwrap_or_else(|| (0..self.num_tasks()).map(|t| format!("task{t}")).collect())
    }

    pub fn retrain_dims(&self) -> Vec<(usize, usize)> {
        self.retrain_layer_dims.clone().unwrap_or_else(|| self.layer_dims.clone())
    }

    pub fn supergraph(&self) -> CliResult<SupergraphSpec> {
        let table = match &self.unit_costs {
            Some(u) => CostTable::new(u.clone())?,
            None => CostTable::for_dense_layers(&self.layer_dims),
        };
        Ok(SupergraphSpec::with_costs(self.num_tasks(), self.layer_dims.clone(), table)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.experiment.trim().is_empty() {
            return bad("experiment name is empty".into());
        }
        self.benchmark.validate()?;
        self.search.validate()?;
        let t = self.num_tasks();
        if !(1..=bmtas::partition::MAX_TASKS).contains(&t) {
            return bad(format!("{t} tasks; supported range is 1..={}", bmtas::partition::MAX_TASKS));
        }
        let sg = self.supergraph()?;
        sg.validate()?;
        if sg.input_width() != self.benchmark.input_dim {
            return bad(format!(
                "first layer takes width {}, benchmark inputs have width {}",
                sg.input_width(),
                self.benchmark.input_dim
            ));
        }
        let retrain = SupergraphSpec::new(t, self.retrain_dims())?;
        if retrain.input_width() != self.benchmark.input_dim || retrain.num_layers() != sg.num_layers() {
            return bad("retrain_layer_dims must keep the input width and the layer count".into());
        }
        if let Some(names) = &self.task_names {
            if names.len() != t {
                return bad(format!("{} task names for {t} tasks", names.len()));
            }
        }
        if let Some(w) = &self.search.omega {
            if w.len() != t {
                return bad(format!("{} loss weights for {t} tasks", w.len()));
            }
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambdas must be non-negative numbers".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let mut lambdas = self.lambdas.clone();
        lambdas.sort_by(f64::total_cmp);
        lambdas.dedup();
        if lambdas.len() != self.lambdas.len() {
            return bad("lambdas must be distinct".into());
        }
        Ok(())
    }
}
