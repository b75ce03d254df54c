//! Warm-up, the alternating architecture/weight search loop, and retraining of
//! the discovered structure.
//!
//! One search step draws fresh Gumbel noise for every task and layer, takes a
//! round-robin SGD step per task on the weight split, then one Adam step on
//! the architecture logits over the architecture split with the normalized
//! expected cost added. The weight optimizer's momentum is dropped whenever
//! the argmax routing changes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::Dataset;
use crate::graph::{derive_groupings, structure_cost, BranchedStructure, SupergraphSpec};
use crate::nncore::{
    Adam, AdamConfig, BranchedNet, Gradients, LossWeights, OperationParams, Route, Sgd, SgdConfig, Tape,
    Tensor, Var,
};
use crate::relax::{discretize, gumbel_noise, TemperatureSchedule};
use crate::resloss::{ArchitectureParams, ResourceModel};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

const STREAM_SPLIT: u16 = 20;
const STREAM_BATCH: u16 = 21;
const STREAM_GUMBEL: u16 = 22;
const RETRAIN_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn default_warmup() -> usize {
    200
}

fn default_alpha_fraction() -> f64 {
    0.2
}

fn default_batch() -> usize {
    32
}

fn default_period() -> usize {
    1
}

fn default_theta() -> SgdConfig {
    SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Weight of the expected cost, in units of the fully shared cost.
    pub lambda: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Number of weight updates of the search phase.
    pub search_steps: usize,
    #[serde(default = "default_alpha_fraction")]
    pub alpha_data_fraction: f64,
    /// Temperature start and end; the step count always equals `search_steps`.
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default = "default_theta")]
    pub theta: SgdConfig,
    #[serde(default)]
    pub alpha: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Uniform weights when absent.
    #[serde(default)]
    pub omega: Option<LossWeights>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Weight steps per architecture step.
    #[serde(default = "default_period")]
    pub theta_steps_per_alpha_step: usize,
    /// Joint training steps of the retrained structure; 0 skips retraining.
    #[serde(default)]
    pub retrain_steps: usize,
    /// Retraining optimizer; the weight optimizer of the search when absent.
    #[serde(default)]
    pub retrain: Option<SgdConfig>,
}

fn default_tau_start() -> f64 {
    5.0
}

fn default_tau_end() -> f64 {
    0.1
}

impl SearchConfig {
    /// Defaults for everything except the resource weight and the budget.
    pub fn new(lambda: f64, search_steps: usize, seed: u64) -> Self {
        SearchConfig {
            lambda,
            warmup_steps: default_warmup(),
            search_steps,
            alpha_data_fraction: default_alpha_fraction(),
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
            theta: default_theta(),
            alpha: AdamConfig::default(),
            seed,
            omega: None,
            batch_size: default_batch(),
            theta_steps_per_alpha_step: default_period(),
            retrain_steps: 0,
            retrain: None,
        }
    }

    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.tau_start,
            end: self.tau_end,
            total_steps: self.search_steps,
        }
    }

    pub fn weights(&self, num_tasks: usize) -> LossWeights {
        self.omega.clone().unwrap_or_else(|| LossWeights::uniform(num_tasks))
    }

    pub fn retrain_optimizer(&self) -> SgdConfig {
        self.retrain.unwrap_or(self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            Config,
            "lambda must be a non-negative number, got {}",
            self.lambda
        );
        ensure!(self.search_steps >= 1, Config, "search_steps must be at least 1");
        ensure!(
            self.alpha_data_fraction > 0.0 && self.alpha_data_fraction < 1.0,
            Config,
            "alpha_data_fraction must lie in (0, 1), got {}",
            self.alpha_data_fraction
        );
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(
            self.theta_steps_per_alpha_step >= 1,
            Config,
            "theta_steps_per_alpha_step must be at least 1"
        );
        self.schedule().validate()?;
        self.theta.validate()?;
        self.alpha.validate()?;
        if let Some(r) = &self.retrain {
            r.validate()?;
        }
        if let Some(w) = &self.omega {
            w.validate()?;
        }
        Ok(())
    }
}

/// Reshuffles its indices every epoch and hands out full batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    indices: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(mut indices: Vec<usize>, mut rng: Rng) -> Self {
        indices.shuffle(&mut rng);
        BatchSampler { indices, pos: 0, rng }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Next `size` indices (all of them if fewer exist).
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.indices.len());
        if self.pos + size > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.indices[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

/// Disjoint weight and architecture index sets of the training samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub theta: Vec<usize>,
    pub alpha: Vec<usize>,
}

impl DataSplit {
    pub fn new(num_samples: usize, alpha_fraction: f64, seed: u64) -> Result<Self> {
        ensure!(num_samples >= 2, Dimension, "cannot split {num_samples} samples");
        let mut order: Vec<usize> = (0..num_samples).collect();
        order.shuffle(&mut rng::stream(seed, rng::stream_id(STREAM_SPLIT, 0, 0)));
        let n_alpha = ((num_samples as f64 * alpha_fraction).round() as usize).clamp(1, num_samples - 1);
        let theta = order.split_off(n_alpha);
        Ok(DataSplit { theta, alpha: order })
    }

    /// Architecture batch size that makes both splits finish an epoch together.
    pub fn alpha_batch_size(&self, theta_batch: usize) -> usize {
        let theta_batch = theta_batch.min(self.theta.len());
        ((theta_batch as f64 * self.alpha.len() as f64 / self.theta.len() as f64).round() as usize)
            .clamp(1, self.alpha.len())
    }
}

/// One row of the search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub tau: f64,
    /// Unweighted task losses of the architecture step.
    pub task_losses: Vec<f64>,
    /// Normalized expected cost.
    pub resource_loss: f64,
    pub expected_cost: f64,
    pub structure_hash: u64,
}

/// CSV with header `step,tau,task_loss_0..,resource_loss,expected_cost,structure_hash`.
pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let tasks = trace.first().map_or(0, |r| r.task_losses.len());
    let mut out = String::from("step,tau");
    for t in 0..tasks {
        out.push_str(&format!(",task_loss_{t}"));
    }
    out.push_str(",resource_loss,expected_cost,structure_hash\n");
    for r in trace {
        out.push_str(&format!("{},{}", r.step, r.tau));
        for l in &r.task_losses {
            out.push_str(&format!(",{l}"));
        }
        out.push_str(&format!(
            ",{},{},{:016x}\n",
            r.resource_loss, r.expected_cost, r.structure_hash
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SearchResult<S> {
    pub structure: BranchedStructure,
    pub alpha_final: ArchitectureParams<S>,
    pub trace: Vec<TraceRecord>,
    /// Per-task test losses of the retrained structure; empty when retraining is skipped.
    pub retrained_metrics: Vec<f64>,
}

fn check_data<S: Scalar>(spec: &SupergraphSpec<S>, data: &Dataset<S>) -> Result<()> {
    spec.validate()?;
    data.validate()?;
    ensure!(
        data.num_tasks() == spec.num_tasks,
        Dimension,
        "dataset has {} tasks, supergraph {}",
        data.num_tasks(),
        spec.num_tasks
    );
    ensure!(
        data.input_dim() == spec.input_width(),
        Dimension,
        "dataset inputs have width {}, supergraph expects {}",
        data.input_dim(),
        spec.input_width()
    );
    Ok(())
}

fn batch<S: Scalar>(data: &Dataset<S>, idx: &[usize]) -> (Tensor<S>, Vec<Tensor<S>>) {
    let x = data.train_x.select_rows(idx);
    let ys = data.train_y.iter().map(|y| y.select_rows(idx)).collect();
    (x, ys)
}

fn slot_grads<S: Scalar>(grads: &mut Gradients<S>, vars: &[Var]) -> Vec<Option<Tensor<S>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn finite_or_abort(value: f64, step: usize, what: &str, trace: &[TraceRecord]) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(3)
        .map(|r| format!("{r:?}"))
        .collect();
    Err(Error::Numeric(format!(
        "{what} is not finite at search step {step}; last trace rows: [{}]",
        tail.join("; ")
    )))
}

/// One discrete-path SGD step for `task` and the loss before the step.
fn discrete_step<S: Scalar>(
    params: &mut OperationParams<S>,
    opt: &mut Sgd<S>,
    task: usize,
    choices: &[usize],
    x: &Tensor<S>,
    y: &Tensor<S>,
) -> Result<S> {
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let out = params.task_forward(&mut tape, &vars, task, Route::Discrete(choices), xv)?;
    let loss = tape.mse(out, y)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = slot_grads(&mut grads, &vars);
    let ones = vec![S::one(); g.len()];
    opt.step(params.store.tensors_mut(), &g, &ones)?;
    Ok(value)
}

/// Fresh supernet whose candidate `j` is trained on task `j` alone along the path of all `j`s.
///
/// Only tasks that own a candidate are trained, together with their heads; the
/// architecture logits are not part of the warm-up and stay at zero.
pub fn warm_up<S: Scalar>(
    spec: &SupergraphSpec<S>,
    data: &Dataset<S>,
    config: &SearchConfig,
) -> Result<OperationParams<S>> {
    config.validate()?;
    check_data(spec, data)?;
    let mut params = OperationParams::init(spec, &data.target_dims(), config.seed)?;
    let split = DataSplit::new(data.train_len(), config.alpha_data_fraction, config.seed)?;
    let mut sampler = BatchSampler::new(
        split.theta.clone(),
        rng::stream(config.seed, rng::stream_id(STREAM_BATCH, 0, 0)),
    );
    let mut opt = Sgd::new(config.theta);
    let layers = spec.num_layers();
    for _ in 0..config.warmup_steps {
        let (x, ys) = batch(data, &sampler.next_batch(config.batch_size));
        for (j, y) in ys.iter().enumerate() {
            discrete_step(&mut params, &mut opt, j, &vec![j; layers], &x, y)?;
        }
    }
    Ok(params)
}

/// Logits of every (task, layer) row recorded on `tape`.
fn bind_alpha<S: Scalar>(tape: &mut Tape<S>, alpha: &ArchitectureParams<S>) -> Result<Vec<Vec<Var>>> {
    (0..alpha.num_tasks())
        .map(|t| {
            (0..alpha.num_layers())
                .map(|l| tape.leaf(Tensor::vector(alpha.row(t, l).to_vec())))
                .collect()
        })
        .collect()
}

/// Relaxed forward pass of `task` and its MSE loss.
#[allow(clippy::too_many_arguments)]
fn relaxed_task_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &OperationParams<S>,
    vars: &[Var],
    logits: &[Var],
    noise: &[Vec<S>],
    tau: S,
    task: usize,
    x: Var,
    y: &Tensor<S>,
) -> Result<Var> {
    let rows = logits
        .iter()
        .zip(noise)
        .map(|(&a, g)| tape.gumbel_softmax(a, g, tau))
        .collect::<Result<Vec<_>>>()?;
    let out = params.task_forward(tape, vars, task, Route::Soft(&rows), x)?;
    tape.mse(out, y)
}

/// Value and gradients of the search objective for fixed noise.
#[derive(Debug, Clone)]
pub struct SearchObjective<S> {
    pub value: S,
    pub task_losses: Vec<S>,
    pub expected_cost: S,
    /// One entry per parameter slot of the supernet.
    pub theta_grad: Vec<Tensor<S>>,
    pub alpha_grad: ArchitectureParams<S>,
}

/// `sum_t omega_t L_t + lambda * E[cost] / shared cost` on one batch.
///
/// `noise[t][l]` is the Gumbel noise of task `t` at layer `l`.
#[allow(clippy::too_many_arguments)]
pub fn search_loss_and_grads<S: Scalar>(
    params: &OperationParams<S>,
    alpha: &ArchitectureParams<S>,
    noise: &[Vec<Vec<S>>],
    tau: S,
    x: &Tensor<S>,
    targets: &[Tensor<S>],
    omega: &LossWeights,
    lambda: S,
    spec: &SupergraphSpec<S>,
    model: &ResourceModel,
) -> Result<SearchObjective<S>> {
    let num_tasks = alpha.num_tasks();
    ensure!(
        noise.len() == num_tasks && targets.len() == num_tasks && omega.len() == num_tasks,
        Dimension,
        "noise, targets and weights must cover all {num_tasks} tasks"
    );
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape)?;
    let logits = bind_alpha(&mut tape, alpha)?;
    let xv = tape.leaf(x.clone())?;
    let mut weighted = Vec::with_capacity(num_tasks);
    let mut task_losses = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let loss = relaxed_task_loss(&mut tape, params, &vars, &logits[t], &noise[t], tau, t, xv, &targets[t])?;
        task_losses.push(tape.value(loss).item());
        weighted.push(tape.scale(loss, omega.get(t))?);
    }
    let total = tape.sum(&weighted)?;
    let mut grads = tape.backward(total)?;

    let shared = spec.cost_table.shared_cost();
    let (expected_cost, cost_grad) = model.expected_cost_with_grad(alpha, &spec.cost_table)?;
    let mut alpha_grad = ArchitectureParams::zeros(num_tasks, alpha.num_layers());
    for (t, task_logits) in logits.iter().enumerate() {
        for (l, &v) in task_logits.iter().enumerate() {
            let row = alpha_grad.row_mut(t, l);
            let task_part = grads.take(v);
            for (j, r) in row.iter_mut().enumerate() {
                let g = task_part.as_ref().map_or(S::zero(), |g| g.data()[j]);
                *r = g + lambda * cost_grad.row(t, l)[j] / shared;
            }
        }
    }
    let theta_grad = vars
        .iter()
        .zip(params.store.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok(SearchObjective {
        value: tape.value(total).item() + lambda * expected_cost / shared,
        task_losses,
        expected_cost,
        theta_grad,
        alpha_grad,
    })
}

/// Relaxed SGD step of one task on the weight split.
#[allow(clippy::too_many_arguments)]
fn theta_step<S: Scalar>(
    params: &mut OperationParams<S>,
    opt: &mut Sgd<S>,
    alpha: &ArchitectureParams<S>,
    noise: &[Vec<S>],
    tau: S,
    task: usize,
    x: &Tensor<S>,
    y: &Tensor<S>,
    weight: S,
) -> Result<()> {
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape)?;
    let logits = bind_alpha(&mut tape, alpha)?;
    let xv = tape.leaf(x.clone())?;
    let loss = relaxed_task_loss(&mut tape, params, &vars, &logits[task], noise, tau, task, xv, y)?;
    let weighted = tape.scale(loss, weight)?;
    let mut grads = tape.backward(weighted)?;
    let g = slot_grads(&mut grads, &vars);
    let ones = vec![S::one(); g.len()];
    opt.step(params.store.tensors_mut(), &g, &ones)
}

fn draw_noise<S: Scalar>(rng: &mut Rng, num_tasks: usize, num_layers: usize) -> Vec<Vec<Vec<S>>> {
    (0..num_tasks)
        .map(|_| (0..num_layers).map(|_| gumbel_noise(num_tasks, rng)).collect())
        .collect()
}

fn edge_choices<S: Scalar>(alpha: &ArchitectureParams<S>) -> Result<Vec<Vec<usize>>> {
    discretize(alpha).iter().map(|m| m.choices()).collect()
}

/// Discretized structure of `alpha`.
pub fn discretized_structure<S: Scalar>(alpha: &ArchitectureParams<S>) -> Result<BranchedStructure> {
    derive_groupings(&discretize(alpha))
}

/// Search state after the final step.
#[derive(Debug, Clone)]
pub struct SearchOutcome<S> {
    pub params: OperationParams<S>,
    pub alpha: ArchitectureParams<S>,
    pub trace: Vec<TraceRecord>,
    pub momentum_resets: usize,
}

/// Alternating search starting from warmed-up `params` and zero logits.
pub fn search_from<S: Scalar>(
    config: &SearchConfig,
    spec: &SupergraphSpec<S>,
    data: &Dataset<S>,
    mut params: OperationParams<S>,
) -> Result<SearchOutcome<S>> {
    config.validate()?;
    check_data(spec, data)?;
    let num_tasks = spec.num_tasks;
    let num_layers = spec.num_layers();
    let omega = config.weights(num_tasks);
    ensure!(omega.len() == num_tasks, Config, "{} loss weights for {num_tasks} tasks", omega.len());
    let model = ResourceModel::new(num_tasks)?;
    let schedule = config.schedule();
    let shared = spec.cost_table.shared_cost();
    let lambda = S::of(config.lambda);

    let split = DataSplit::new(data.train_len(), config.alpha_data_fraction, config.seed)?;
    let alpha_batch = split.alpha_batch_size(config.batch_size);
    let mut theta_batches = BatchSampler::new(
        split.theta.clone(),
        rng::stream(config.seed, rng::stream_id(STREAM_BATCH, 1, 0)),
    );
    let mut alpha_batches = BatchSampler::new(
        split.alpha.clone(),
        rng::stream(config.seed, rng::stream_id(STREAM_BATCH, 2, 0)),
    );
    let mut gumbel = rng::stream(config.seed, rng::stream_id(STREAM_GUMBEL, 0, 0));

    let mut alpha = ArchitectureParams::zeros(num_tasks, num_layers);
    let mut theta_opt = Sgd::new(config.theta);
    let mut alpha_opt = Adam::new(config.alpha);
    let mut choices = edge_choices(&alpha)?;
    let mut trace = Vec::with_capacity(config.search_steps);
    let mut momentum_resets = 0;

    for step in 0..config.search_steps {
        let tau = S::of(schedule.tau(step)?);
        let noise: Vec<Vec<Vec<S>>> = draw_noise(&mut gumbel, num_tasks, num_layers);

        let (x, ys) = batch(data, &theta_batches.next_batch(config.batch_size));
        for t in 0..num_tasks {
            let step_loss = theta_step(&mut params, &mut theta_opt, &alpha, &noise[t], tau, t, &x, &ys[t], omega.get(t));
            step_loss.map_err(|e| abort_on_numeric(e, step, &trace))?;
        }

        let mut task_losses = vec![f64::NAN; num_tasks];
        if (step + 1) % config.theta_steps_per_alpha_step == 0 {
            let (xa, ya) = batch(data, &alpha_batches.next_batch(alpha_batch));
            let obj = search_loss_and_grads(&params, &alpha, &noise, tau, &xa, &ya, &omega, lambda, spec, &model)
                .map_err(|e| abort_on_numeric(e, step, &trace))?;
            let width = num_layers * num_tasks;
            for t in 0..num_tasks {
                let span = t * width..(t + 1) * width;
                let grad = &obj.alpha_grad.as_slice()[span.clone()];
                alpha_opt.step_slot(t, &mut alpha.as_mut_slice()[span], grad)?;
            }
            alpha.check_finite().map_err(|e| abort_on_numeric(e, step, &trace))?;
            task_losses = obj.task_losses.iter().map(|v| v.to_f64_lossy()).collect();
            let now = edge_choices(&alpha)?;
            if now != choices {
                theta_opt.reset_momentum();
                momentum_resets += 1;
                choices = now;
            }
        }
        let expected = model.expected_cost(&alpha, &spec.cost_table)?;
        let expected_f = expected.to_f64_lossy();
        finite_or_abort(expected_f, step, "expected cost", &trace)?;
        trace.push(TraceRecord {
            step,
            tau: tau.to_f64_lossy(),
            task_losses,
            resource_loss: (expected / shared).to_f64_lossy(),
            expected_cost: expected_f,
            structure_hash: discretized_structure(&alpha)?.digest(),
        });
    }
    Ok(SearchOutcome {
        params,
        alpha,
        trace,
        momentum_resets,
    })
}

fn abort_on_numeric(e: Error, step: usize, trace: &[TraceRecord]) -> Error {
    match e {
        Error::Numeric(msg) => match finite_or_abort(f64::NAN, step, &msg, trace) {
            Err(e) => e,
            Ok(()) => unreachable!(),
        },
        other => other,
    }
}

/// Warm-up, search, discretization and (if configured) retraining.
pub fn search<S: Scalar>(
    config: &SearchConfig,
    spec: &SupergraphSpec<S>,
    data: &Dataset<S>,
) -> Result<SearchResult<S>> {
    let params = warm_up(spec, data, config)?;
    let outcome = search_from(config, spec, data, params)?;
    let structure = discretized_structure(&outcome.alpha)?;
    let retrained_metrics = if config.retrain_steps > 0 {
        retrain(&structure, data, &spec.layer_dims, config)?
    } else {
        Vec::new()
    };
    Ok(SearchResult {
        structure,
        alpha_final: outcome.alpha,
        trace: outcome.trace,
        retrained_metrics,
    })
}

/// Cost of the structure `alpha` discretizes to.
pub fn discretized_cost<S: Scalar>(alpha: &ArchitectureParams<S>, spec: &SupergraphSpec<S>) -> Result<S> {
    structure_cost(&discretized_structure(alpha)?, &spec.cost_table)
}

/// Seed of the fresh initialization used for retraining.
pub fn retrain_seed(seed: u64) -> u64 {
    seed ^ RETRAIN_SEED_SALT
}

/// Joint training of `net` on the full training set; returns per-task test losses.
pub fn train_branched<S: Scalar>(net: &mut BranchedNet<S>, data: &Dataset<S>, config: &SearchConfig) -> Result<Vec<f64>> {
    config.validate()?;
    data.validate()?;
    let omega = config.weights(data.num_tasks());
    let mut sampler = BatchSampler::new(
        (0..data.train_len()).collect(),
        rng::stream(config.seed, rng::stream_id(STREAM_BATCH, 3, 0)),
    );
    let mut opt = Sgd::new(config.retrain_optimizer());
    for _ in 0..config.retrain_steps {
        let idx = sampler.next_batch(config.batch_size);
        let x = data.train_x.select_rows(&idx);
        let mut tape = Tape::new();
        let vars = net.store.bind(&mut tape)?;
        let xv = tape.leaf(x)?;
        let mut terms = Vec::with_capacity(net.tasks.len());
        for (local, &task) in net.tasks.iter().enumerate() {
            let out = net.forward(&mut tape, &vars, local, xv)?;
            let loss = tape.mse(out, &data.train_y[task].select_rows(&idx))?;
            terms.push(tape.scale(loss, omega.get(task))?);
        }
        let total = tape.sum(&terms)?;
        let mut grads = tape.backward(total)?;
        let g = slot_grads(&mut grads, &vars);
        let scales = net.lr_scales().to_vec();
        opt.step(net.store.tensors_mut(), &g, &scales)?;
    }
    test_losses(net, data)
}

/// Test MSE of every task of `net`.
pub fn test_losses<S: Scalar>(net: &BranchedNet<S>, data: &Dataset<S>) -> Result<Vec<f64>> {
    net.tasks
        .iter()
        .enumerate()
        .map(|(local, &task)| {
            let pred = net.predict(&data.test_x, local)?;
            let mut tape = Tape::new();
            let p = tape.leaf(pred)?;
            let loss = tape.mse(p, &data.test_y[task])?;
            Ok(tape.value(loss).item().to_f64_lossy())
        })
        .collect()
}

/// Trains `structure` from scratch on all tasks; shared operations get `lr / (#tasks sharing)`.
pub fn retrain<S: Scalar>(
    structure: &BranchedStructure,
    data: &Dataset<S>,
    layer_dims: &[(usize, usize)],
    config: &SearchConfig,
) -> Result<Vec<f64>> {
    structure.validate()?;
    ensure!(
        structure.num_tasks() == data.num_tasks(),
        Dimension,
        "structure has {} tasks, dataset {}",
        structure.num_tasks(),
        data.num_tasks()
    );
    let tasks: Vec<usize> = (0..data.num_tasks()).collect();
    let mut net = BranchedNet::init(structure, &tasks, layer_dims, &data.target_dims(), retrain_seed(config.seed))?;
    train_branched(&mut net, data, config)
}

/// A single-task network for `task`, trained exactly like [`retrain`] would.
pub fn train_single_task<S: Scalar>(
    task: usize,
    data: &Dataset<S>,
    layer_dims: &[(usize, usize)],
    config: &SearchConfig,
) -> Result<f64> {
    ensure!(task < data.num_tasks(), Bounds, "task {task} out of range");
    let structure = BranchedStructure::fully_shared(1, layer_dims.len());
    let mut net = BranchedNet::init(&structure, &[task], layer_dims, &data.target_dims(), retrain_seed(config.seed))?;
    Ok(train_branched(&mut net, data, config)?[0])
}

/// Encoder features of single-task networks on the first `probes` test inputs.
pub fn single_task_features<S: Scalar>(
    data: &Dataset<S>,
    layer_dims: &[(usize, usize)],
    config: &SearchConfig,
    probes: usize,
) -> Result<Vec<Tensor<S>>> {
    let probes = probes.min(data.test_len());
    let idx: Vec<usize> = (0..probes).collect();
    let x = data.test_x.select_rows(&idx);
    let structure = BranchedStructure::fully_shared(1, layer_dims.len());
    (0..data.num_tasks())
        .map(|t| {
            let mut net = BranchedNet::init(&structure, &[t], layer_dims, &data.target_dims(), retrain_seed(config.seed))?;
            train_branched(&mut net, data, config)?;
            net.encode(&x, 0)
        })
        .collect()
}
