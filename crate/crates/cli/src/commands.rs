//! The five subcommands and the multi-run orchestrator behind `search`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bmtas::eval::{delta_m, generate_tasks, MetricRecord, TaskMetric};
use bmtas::graph::{count_branching_structures, export_dot, structure_cost, StructureDocument};
use bmtas::resloss::{brute_force_expected_cost, ResourceModel};
use bmtas::search::{retrain, search, train_single_task, trace_to_csv, SearchConfig};
use bmtas::{enumerate_partitions, ArchitectureParams, CostTable, Dataset, Partition, SearchResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{log, read_json, to_json_bytes, write_atomic};

/// Largest tolerated gap between the exact expected cost and the brute-force oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

/// Environment variable capping the worker pool of `search`.
pub const WORKERS_ENV: &str = "BMTAS_WORKERS";

/// One independent search run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub job: Job,
    pub result: SearchResult,
    pub structure_cost: f64,
    pub shared_cost: f64,
    /// Single-task test losses, when baselines were trained.
    pub baseline: Option<Vec<f64>>,
}

/// `metrics.json` of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub experiment: String,
    pub seed: u64,
    pub lambda: f64,
    pub structure_cost: f64,
    pub shared_cost: f64,
    pub normalized_cost: f64,
    /// Expected cost of the final architecture distribution.
    pub expected_cost: f64,
    pub deepest_grouping: Option<Partition>,
    pub retrained: Option<MetricRecord>,
    pub baseline: Option<MetricRecord>,
    /// Percent change of the retrained structure over the single-task baselines.
    pub delta_m: Option<f64>,
}

/// `result.json` of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultDocument {
    pub structure: StructureDocument,
    pub alpha_final: ArchitectureParams,
    pub retrained_metrics: Vec<f64>,
}

/// Every `(lambda, seed)` pair, lambda-major.
pub fn plan(config: &RunConfig) -> Vec<Job> {
    let seeds = config.seeds();
    config
        .lambdas()
        .into_iter()
        .flat_map(|lambda| seeds.iter().map(move |&seed| Job { lambda, seed }))
        .collect()
}

/// Pool size: `BMTAS_WORKERS` if set, else the available parallelism, never more than `jobs`.
pub fn worker_count(jobs: usize) -> CliResult<usize> {
    let cap = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(jobs.max(1)))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Benchmark data for `seed`, read from or written to the cache directory when one is configured.
pub fn load_dataset(config: &RunConfig, seed: u64) -> CliResult<Dataset> {
    let Some(dir) = &config.cache_dir else {
        return Ok(generate_tasks(&config.benchmark, seed)?);
    };
    let key = serde_json::to_string(&config.benchmark).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = dir.join(format!("bench-{:016x}-seed-{seed}.bmtb", fnv1a(key.as_bytes())));
    if path.exists() {
        let data = Dataset::load(&path)?;
        if data.seed == seed {
            return Ok(data);
        }
    }
    let data = generate_tasks(&config.benchmark, seed)?;
    let mut bytes = Vec::new();
    data.write_cache(&mut bytes)?;
    write_atomic(&path, &bytes)?;
    Ok(data)
}

fn job_config(config: &RunConfig, job: Job) -> SearchConfig {
    SearchConfig {
        lambda: job.lambda,
        seed: job.seed,
        ..config.search.clone()
    }
}

/// Warm-up, search, retraining and (optionally) single-task baselines for one job.
pub fn run_job(config: &RunConfig, job: Job) -> CliResult<RunOutcome> {
    let spec = config.supergraph()?;
    let data = load_dataset(config, job.seed)?;
    let search_config = job_config(config, job);
    let separate_retrain = search_config.retrain_steps > 0 && config.retrain_dims() != config.layer_dims;
    let mut result = if separate_retrain {
        search(&SearchConfig { retrain_steps: 0, ..search_config.clone() }, &spec, &data)?
    } else {
        search(&search_config, &spec, &data)?
    };
    if separate_retrain {
        result.retrained_metrics = retrain(&result.structure, &data, &config.retrain_dims(), &search_config)?;
    }
    let baseline = if config.baselines && search_config.retrain_steps > 0 {
        let dims = config.retrain_dims();
        Some(
            (0..config.num_tasks())
                .map(|t| train_single_task(t, &data, &dims, &search_config))
                .collect::<bmtas::Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    Ok(RunOutcome {
        job,
        structure_cost: structure_cost(&result.structure, &spec.cost_table)?,
        shared_cost: spec.cost_table.shared_cost(),
        result,
        baseline,
    })
}

/// Runs every planned job on a bounded pool; results come back in plan order.
pub fn execute(config: &RunConfig, workers: usize) -> CliResult<Vec<RunOutcome>> {
    let jobs = plan(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&job| {
                let outcome = run_job(config, job);
                match &outcome {
                    Ok(o) => log(
                        "info",
                        "run_finished",
                        json!({"lambda": job.lambda, "seed": job.seed, "structure_cost": o.structure_cost}),
                    ),
                    Err(e) => log("error", "run_failed", json!({"lambda": job.lambda, "seed": job.seed, "error": e.to_string()})),
                }
                outcome
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .collect()
}

fn named_record(names: &[String], losses: &[f64]) -> CliResult<MetricRecord> {
    Ok(MetricRecord::new(
        names
            .iter()
            .zip(losses)
            .map(|(name, &value)| TaskMetric {
                name: name.clone(),
                value,
                lower_is_better: true,
            })
            .collect(),
    )?)
}

/// Directory of one run below `root`.
pub fn run_dir(root: &Path, job: Job) -> PathBuf {
    root.join(format!("lambda-{}", job.lambda)).join(format!("seed-{}", job.seed))
}

pub fn metrics_document(config: &RunConfig, outcome: &RunOutcome) -> CliResult<MetricsDocument> {
    let names = config.task_names();
    let retrained = if outcome.result.retrained_metrics.is_empty() {
        None
    } else {
        Some(named_record(&names, &outcome.result.retrained_metrics)?)
    };
    let baseline = outcome.baseline.as_deref().map(|b| named_record(&names, b)).transpose()?;
    let delta_m = match (&retrained, &baseline) {
        (Some(m), Some(b)) => Some(delta_m(m, b)?),
        _ => None,
    };
    let trace_cost = outcome.result.trace.last().map_or(f64::NAN, |r| r.expected_cost);
    Ok(MetricsDocument {
        experiment: config.experiment.clone(),
        seed: outcome.job.seed,
        lambda: outcome.job.lambda,
        structure_cost: outcome.structure_cost,
        shared_cost: outcome.shared_cost,
        normalized_cost: outcome.structure_cost / outcome.shared_cost,
        expected_cost: trace_cost,
        deepest_grouping: outcome.result.structure.deepest_nontrivial_grouping().cloned(),
        retrained,
        baseline,
        delta_m,
    })
}

/// Writes `structure.json`, `structure.dot`, `trace.csv`, `metrics.json` and `result.json`.
pub fn write_run(config: &RunConfig, root: &Path, outcome: &RunOutcome) -> CliResult<(PathBuf, MetricsDocument)> {
    let dir = run_dir(root, outcome.job);
    let names = config.task_names();
    let structure = StructureDocument::new(&outcome.result.structure, &names)?;
    let metrics = metrics_document(config, outcome)?;
    write_atomic(&dir.join("structure.json"), &to_json_bytes(&structure)?)?;
    write_atomic(
        &dir.join("structure.dot"),
        export_dot(&outcome.result.structure, &names)?.as_bytes(),
    )?;
    write_atomic(&dir.join("trace.csv"), trace_to_csv(&outcome.result.trace).as_bytes())?;
    write_atomic(&dir.join("metrics.json"), &to_json_bytes(&metrics)?)?;
    let result = ResultDocument {
        structure,
        alpha_final: outcome.result.alpha_final.clone(),
        retrained_metrics: outcome.result.retrained_metrics.clone(),
    };
    write_atomic(&dir.join("result.json"), &to_json_bytes(&result)?)?;
    Ok((dir, metrics))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct SearchOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
}

pub fn apply_overrides(mut config: RunConfig, o: &SearchOverrides) -> CliResult<RunConfig> {
    if let Some(seed) = o.seed {
        config.seeds = vec![seed];
        config.search.seed = seed;
    }
    if let Some(lambda) = o.lambda {
        config.lambdas = vec![lambda];
        config.search.lambda = lambda;
    }
    if let Some(out) = &o.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Runs every `(lambda, seed)` of the config and writes their artifacts plus `summary.csv`.
pub fn cmd_search(config_path: &Path, overrides: &SearchOverrides) -> CliResult<String> {
    let config = apply_overrides(RunConfig::load(config_path)?, overrides)?;
    let jobs = plan(&config);
    let workers = worker_count(jobs.len())?;
    log(
        "info",
        "search_started",
        json!({"experiment": config.experiment, "runs": jobs.len(), "workers": workers}),
    );
    let outcomes = execute(&config, workers)?;
    let root = &config.output_dir;
    let mut summary = String::from("lambda,seed,structure_cost,normalized_cost,delta_m,directory\n");
    let mut stdout = String::new();
    for outcome in &outcomes {
        let (dir, m) = write_run(&config, root, outcome)?;
        let rel = dir.strip_prefix(root).unwrap_or(&dir).display().to_string();
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{rel}",
            m.lambda,
            m.seed,
            m.structure_cost,
            m.normalized_cost,
            opt_cell(m.delta_m)
        );
        let _ = writeln!(stdout, "{}", dir.display());
    }
    write_atomic(&root.join("summary.csv"), summary.as_bytes())?;
    log("info", "search_finished", json!({"output_dir": root.display().to_string()}));
    Ok(stdout)
}

fn cost_table(unit_costs: Option<&[f64]>, num_layers: usize) -> CliResult<CostTable> {
    match unit_costs {
        None => Ok(CostTable::uniform(num_layers)),
        Some(u) if u.len() == num_layers => Ok(CostTable::new(u.to_vec())?),
        Some(u) => Err(CliError::Config(format!(
            "{} unit costs for {num_layers} layers",
            u.len()
        ))),
    }
}

/// JSON with the expected cost and every grouping of positive probability per layer.
pub fn cmd_expected_cost(alpha_path: &Path, unit_costs: Option<&[f64]>, oracle: bool) -> CliResult<String> {
    let alpha: ArchitectureParams = read_json(alpha_path)?;
    alpha.check_finite()?;
    let table = cost_table(unit_costs, alpha.num_layers())?;
    let model = ResourceModel::new(alpha.num_tasks())?;
    let cost = model.expected_cost(&alpha, &table)?;
    let dist = model.grouping_distribution(&alpha, &table)?;
    let layers: Vec<_> = dist
        .layers
        .iter()
        .enumerate()
        .map(|(l, probs)| {
            let groupings: Vec<_> = dist
                .partitions
                .iter()
                .zip(probs)
                .filter(|(_, &p)| p > 0.0)
                .map(|(k, &p)| json!({"groups": k, "probability": p}))
                .collect();
            json!({"layer": l, "groupings": groupings})
        })
        .collect();
    let mut doc = json!({
        "num_tasks": alpha.num_tasks(),
        "num_layers": alpha.num_layers(),
        "unit_costs": table.unit_costs(),
        "expected_cost": cost,
        "layers": layers,
    });
    if oracle {
        let reference = brute_force_expected_cost(&alpha, &table)?;
        let gap = (cost - reference).abs();
        if gap > ORACLE_TOLERANCE || !gap.is_finite() {
            return Err(CliError::Runtime(format!(
                "expected cost {cost} disagrees with brute-force enumeration {reference} by {gap:e}"
            )));
        }
        doc["oracle"] = json!({"brute_force_expected_cost": reference, "abs_difference": gap});
    }
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Bell number, number of branching structures, and the extreme structure costs.
///
/// The extremes come from a dynamic program over refinement chains.
pub fn cmd_enumerate(num_tasks: usize, num_layers: usize, unit_costs: Option<&[f64]>) -> CliResult<String> {
    if num_layers == 0 {
        return Err(CliError::Config("need at least one layer".into()));
    }
    if num_tasks == 0 || num_tasks > bmtas::partition::MAX_TASKS {
        return Err(CliError::Config(format!(
            "{num_tasks} tasks; supported range is 1..={}",
            bmtas::partition::MAX_TASKS
        )));
    }
    let table = cost_table(unit_costs, num_layers)?;
    let parts = enumerate_partitions(num_tasks)?;
    let count = count_branching_structures(num_tasks, num_layers)?;
    let cost = |k: &Partition, l: usize| k.num_parts() as f64 * table.unit_costs()[l];
    // (min, max) total cost of a chain ending in each partition at the current layer.
    let mut best: Vec<(f64, f64)> = parts.iter().map(|k| (cost(k, 0), cost(k, 0))).collect();
    for l in 1..num_layers {
        let mut next = Vec::with_capacity(parts.len());
        for k in &parts {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (m, &(a, b)) in parts.iter().zip(&best) {
                if k.refines(m)? {
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
            }
            next.push((lo + cost(k, l), hi + cost(k, l)));
        }
        best = next;
    }
    let min = best.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max = best.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "B_T = {}\nstructures = {count}\nmin_cost = {min}\nmax_cost = {max}\n",
        parts.len()
    ))
}

/// Multi-task performance change of `model` over `baseline`, in percent with two decimals.
pub fn cmd_eval(model_path: &Path, baseline_path: &Path) -> CliResult<String> {
    let model: MetricRecord = read_json(model_path)?;
    let baseline: MetricRecord = read_json(baseline_path)?;
    model.validate().map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
    baseline
        .validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", baseline_path.display())))?;
    let d = delta_m(&model, &baseline).map_err(|e| match e {
        bmtas::Error::Domain(_) => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    Ok(format!("{d:.2}\n"))
}

pub fn cmd_export_dot(structure_path: &Path) -> CliResult<String> {
    let doc: StructureDocument = read_json(structure_path)?;
    let s = doc
        .to_structure()
        .map_err(|e| CliError::Config(format!("{}: {e}", structure_path.display())))?;
    Ok(export_dot(&s, &doc.tasks)?)
}
