//! Exact expected encoder MAdds of the routing distribution and its gradient.
//!
//! For each layer the tasks pick candidates independently with probabilities
//! `softmax(alpha[t, l, :])`. The joint pick induces an edge-equality partition
//! `e`, and the grouping evolves as `k_l = meet(k_{l-1}, e_l)` from the coarsest
//! partition. That makes the grouping sequence a Markov chain on the partition
//! lattice whose transition kernel only moves towards finer partitions.
//!
//! The per-layer law of `e` is computed by enumerating all `T^T` joint picks,
//! so everything here is exact for `T <= 8`.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, Error, Result};
use crate::graph::{structure_cost, BranchedStructure, CostTable};
use crate::partition::{Partition, PartitionLattice, MAX_TASKS};
use crate::scalar::Scalar;

/// Grouping probabilities below this are dropped and the layer renormalized.
pub const PROBABILITY_FLOOR: f64 = 1e-15;

/// Largest number of joint routings the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Per-task, per-layer unnormalized log-probabilities over the candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureParams<S> {
    num_tasks: usize,
    num_layers: usize,
    logits: Vec<S>,
}

impl<S: Scalar> ArchitectureParams<S> {
    pub fn zeros(num_tasks: usize, num_layers: usize) -> Self {
        ArchitectureParams {
            num_tasks,
            num_layers,
            logits: vec![S::zero(); num_tasks * num_layers * num_tasks],
        }
    }

    /// From `logits[t][l][j]`.
    pub fn from_nested(nested: Vec<Vec<Vec<S>>>) -> Result<Self> {
        let num_tasks = nested.len();
        ensure!(num_tasks >= 1, Dimension, "need at least one task");
        let num_layers = nested[0].len();
        ensure!(num_layers >= 1, Dimension, "need at least one layer");
        let mut logits = Vec::with_capacity(num_tasks * num_layers * num_tasks);
        for (t, layers) in nested.into_iter().enumerate() {
            ensure!(
                layers.len() == num_layers,
                Dimension,
                "task {t} has {} layers, expected {num_layers}",
                layers.len()
            );
            for (l, row) in layers.into_iter().enumerate() {
                ensure!(
                    row.len() == num_tasks,
                    Dimension,
                    "task {t} layer {l} has {} candidates, expected {num_tasks}",
                    row.len()
                );
                logits.extend(row);
            }
        }
        let params = ArchitectureParams {
            num_tasks,
            num_layers,
            logits,
        };
        params.check_finite()?;
        Ok(params)
    }

    /// From a flat `T x L x T` buffer.
    pub fn from_flat(num_tasks: usize, num_layers: usize, logits: Vec<S>) -> Result<Self> {
        ensure!(
            logits.len() == num_tasks * num_layers * num_tasks,
            Dimension,
            "{} logits for a {num_tasks}x{num_layers}x{num_tasks} tensor",
            logits.len()
        );
        Ok(ArchitectureParams {
            num_tasks,
            num_layers,
            logits,
        })
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<S>>> {
        (0..self.num_tasks)
            .map(|t| (0..self.num_layers).map(|l| self.row(t, l).to_vec()).collect())
            .collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Number of candidates per row (one per task).
    pub fn num_candidates(&self) -> usize {
        self.num_tasks
    }

    fn offset(&self, task: usize, layer: usize) -> usize {
        (task * self.num_layers + layer) * self.num_tasks
    }

    pub fn row(&self, task: usize, layer: usize) -> &[S] {
        let o = self.offset(task, layer);
        &self.logits[o..o + self.num_tasks]
    }

    pub fn row_mut(&mut self, task: usize, layer: usize) -> &mut [S] {
        let o = self.offset(task, layer);
        &mut self.logits[o..o + self.num_tasks]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.logits
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.logits.iter().position(|v| !v.is_finite()) {
            let per_task = self.num_layers * self.num_tasks;
            return Err(Error::Numeric(format!(
                "non-finite logit at task {}, layer {}, candidate {}",
                i / per_task,
                (i % per_task) / self.num_tasks,
                i % self.num_tasks
            )));
        }
        Ok(())
    }
}

impl<S: Scalar + Serialize> Serialize for ArchitectureParams<S> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        self.to_nested().serialize(serializer)
    }
}

impl<'de, S: Scalar + Deserialize<'de>> Deserialize<'de> for ArchitectureParams<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<S>>>::deserialize(deserializer)?;
        ArchitectureParams::from_nested(nested).map_err(D::Error::custom)
    }
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exp: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exp.iter().copied().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Pulls an upstream gradient on `probs = softmax(x)` back onto `x`.
pub fn softmax_backward<S: Scalar>(probs: &[S], upstream: &[S]) -> Vec<S> {
    let dot: S = probs.iter().zip(upstream).map(|(&p, &g)| p * g).sum();
    probs.iter().zip(upstream).map(|(&p, &g)| p * (g - dot)).collect()
}

/// Candidate-pick probabilities of `task` at `layer`.
pub fn edge_probabilities<S: Scalar>(
    alpha: &ArchitectureParams<S>,
    task: usize,
    layer: usize,
) -> Result<Vec<S>> {
    ensure!(
        task < alpha.num_tasks && layer < alpha.num_layers,
        Bounds,
        "row ({task}, {layer}) outside {}x{}",
        alpha.num_tasks,
        alpha.num_layers
    );
    let row = alpha.row(task, layer);
    ensure!(
        row.iter().all(|v| v.is_finite()),
        Numeric,
        "non-finite logits for task {task} at layer {layer}"
    );
    Ok(softmax(row))
}

/// Per-layer law of the grouping `k_l` over the partitions of the task set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingDistribution<S> {
    pub partitions: Vec<Partition>,
    /// `layers[l][i]` = probability that the grouping at layer `l` is `partitions[i]`.
    pub layers: Vec<Vec<S>>,
}

impl<S: Scalar> GroupingDistribution<S> {
    pub fn probability(&self, layer: usize, k: &Partition) -> S {
        self.partitions
            .binary_search(k)
            .map_or(S::zero(), |i| self.layers[layer][i])
    }
}

/// Precomputed lattice tables for a fixed task count; reusable across evaluations.
#[derive(Debug, Clone)]
pub struct ResourceModel {
    lattice: PartitionLattice,
    /// Lattice index of the partition induced by each joint pick, indexed in base `T`.
    assignment_partition: Vec<u16>,
    /// `meet_table[m * B + e]` = index of `meet(m, e)`.
    meet_table: Vec<u16>,
}

impl ResourceModel {
    pub fn new(num_tasks: usize) -> Result<Self> {
        ensure!(
            (1..=MAX_TASKS).contains(&num_tasks),
            Bounds,
            "task count {num_tasks} outside 1..={MAX_TASKS}"
        );
        let lattice = PartitionLattice::new(num_tasks)?;
        let total = num_tasks.pow(num_tasks as u32);
        let mut assignment_partition = Vec::with_capacity(total);
        let mut digits = vec![0usize; num_tasks];
        for _ in 0..total {
            let k = Partition::from_labels(&digits);
            assignment_partition.push(lattice.index_of(&k).expect("lattice is complete") as u16);
            increment(&mut digits, num_tasks);
        }
        let b = lattice.len();
        let mut meet_table = vec![0u16; b * b];
        for (mi, m) in lattice.partitions().iter().enumerate() {
            for (ei, e) in lattice.partitions().iter().enumerate() {
                let k = m.meet_unchecked(e);
                meet_table[mi * b + ei] = lattice.index_of(&k).expect("lattice is complete") as u16;
            }
        }
        Ok(ResourceModel {
            lattice,
            assignment_partition,
            meet_table,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.lattice.num_tasks()
    }

    pub fn lattice(&self) -> &PartitionLattice {
        &self.lattice
    }

    fn meet(&self, m: usize, e: usize) -> usize {
        self.meet_table[m * self.lattice.len() + e] as usize
    }

    fn check_dims<S: Scalar>(&self, alpha: &ArchitectureParams<S>, table: &CostTable<S>) -> Result<()> {
        ensure!(
            alpha.num_tasks() == self.num_tasks(),
            Dimension,
            "alpha has {} tasks, model expects {}",
            alpha.num_tasks(),
            self.num_tasks()
        );
        ensure!(
            alpha.num_layers() == table.num_layers(),
            Dimension,
            "alpha has {} layers, cost table {}",
            alpha.num_layers(),
            table.num_layers()
        );
        alpha.check_finite()
    }

    fn layer_probs<S: Scalar>(&self, alpha: &ArchitectureParams<S>, layer: usize) -> Vec<Vec<S>> {
        (0..self.num_tasks()).map(|t| softmax(alpha.row(t, layer))).collect()
    }

    /// Law of the edge-equality partition of one layer given per-task pick probabilities.
    fn edge_partition_law<S: Scalar>(&self, probs: &[Vec<S>]) -> Vec<S> {
        let t = self.num_tasks();
        let mut law = vec![S::zero(); self.lattice.len()];
        let mut digits = vec![0usize; t];
        for &e in &self.assignment_partition {
            let mut p = S::one();
            for (task, &d) in digits.iter().enumerate() {
                p = p * probs[task][d];
            }
            law[e as usize] = law[e as usize] + p;
            increment(&mut digits, t);
        }
        law
    }

    /// Chain rule from `d/dQ(e)` onto the per-task pick probabilities.
    fn edge_partition_law_backward<S: Scalar>(&self, probs: &[Vec<S>], upstream: &[S]) -> Vec<Vec<S>> {
        let t = self.num_tasks();
        let mut grads = vec![vec![S::zero(); t]; t];
        let mut digits = vec![0usize; t];
        let mut prefix = vec![S::one(); t + 1];
        let mut suffix = vec![S::one(); t + 1];
        for &e in &self.assignment_partition {
            let g = upstream[e as usize];
            if g != S::zero() {
                for i in 0..t {
                    prefix[i + 1] = prefix[i] * probs[i][digits[i]];
                }
                for i in (0..t).rev() {
                    suffix[i] = suffix[i + 1] * probs[i][digits[i]];
                }
                for i in 0..t {
                    grads[i][digits[i]] = grads[i][digits[i]] + g * prefix[i] * suffix[i + 1];
                }
            }
            increment(&mut digits, t);
        }
        grads
    }

    /// Transition matrix `P[m][k]` of layer `layer`.
    pub fn transition_kernel<S: Scalar>(
        &self,
        alpha: &ArchitectureParams<S>,
        layer: usize,
    ) -> Result<Vec<Vec<S>>> {
        ensure!(
            alpha.num_tasks() == self.num_tasks(),
            Dimension,
            "alpha has {} tasks, model expects {}",
            alpha.num_tasks(),
            self.num_tasks()
        );
        ensure!(layer < alpha.num_layers(), Bounds, "layer {layer} out of range");
        alpha.check_finite()?;
        let law = self.edge_partition_law(&self.layer_probs(alpha, layer));
        let b = self.lattice.len();
        let mut kernel = vec![vec![S::zero(); b]; b];
        for (m, row) in kernel.iter_mut().enumerate() {
            for (e, &q) in law.iter().enumerate() {
                let k = self.meet(m, e);
                row[k] = row[k] + q;
            }
        }
        Ok(kernel)
    }

    fn propagate<S: Scalar>(&self, prev: &[S], law: &[S]) -> Vec<S> {
        let mut next = vec![S::zero(); prev.len()];
        for (m, &pm) in prev.iter().enumerate() {
            if pm == S::zero() {
                continue;
            }
            for (e, &q) in law.iter().enumerate() {
                let k = self.meet(m, e);
                next[k] = next[k] + pm * q;
            }
        }
        clamp_and_renormalize(&mut next);
        next
    }

    pub fn grouping_distribution<S: Scalar>(
        &self,
        alpha: &ArchitectureParams<S>,
        table: &CostTable<S>,
    ) -> Result<GroupingDistribution<S>> {
        self.check_dims(alpha, table)?;
        Ok(GroupingDistribution {
            partitions: self.lattice.partitions().to_vec(),
            layers: self.forward(alpha).1,
        })
    }

    /// Per-layer edge-partition laws and grouping distributions.
    fn forward<S: Scalar>(&self, alpha: &ArchitectureParams<S>) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
        let b = self.lattice.len();
        let mut prev = vec![S::zero(); b];
        prev[self.lattice.coarsest_index()] = S::one();
        let mut laws = Vec::with_capacity(alpha.num_layers());
        let mut dists = Vec::with_capacity(alpha.num_layers());
        for l in 0..alpha.num_layers() {
            let law = self.edge_partition_law(&self.layer_probs(alpha, l));
            let next = self.propagate(&prev, &law);
            laws.push(law);
            dists.push(next.clone());
            prev = next;
        }
        (laws, dists)
    }

    fn layer_costs<S: Scalar>(&self, table: &CostTable<S>) -> Vec<Vec<S>> {
        table
            .unit_costs()
            .iter()
            .map(|&u| {
                self.lattice
                    .partitions()
                    .iter()
                    .map(|k| S::of(k.num_parts() as f64) * u)
                    .collect()
            })
            .collect()
    }

    pub fn expected_cost<S: Scalar>(&self, alpha: &ArchitectureParams<S>, table: &CostTable<S>) -> Result<S> {
        self.check_dims(alpha, table)?;
        let (_, dists) = self.forward(alpha);
        Ok(dot_costs(&dists, &self.layer_costs(table)))
    }

    /// Expected cost together with its gradient with respect to every logit.
    pub fn expected_cost_with_grad<S: Scalar>(
        &self,
        alpha: &ArchitectureParams<S>,
        table: &CostTable<S>,
    ) -> Result<(S, ArchitectureParams<S>)> {
        self.check_dims(alpha, table)?;
        let num_layers = alpha.num_layers();
        let b = self.lattice.len();
        let (laws, dists) = self.forward(alpha);
        let costs = self.layer_costs(table);
        let value = dot_costs(&dists, &costs);

        let mut grad = ArchitectureParams::zeros(alpha.num_tasks(), num_layers);
        // adjoint[k] = d(value) / d(dists[l][k]) for the current l, walked backwards.
        let mut adjoint = costs[num_layers - 1].clone();
        for l in (0..num_layers).rev() {
            let mut prev = vec![S::zero(); b];
            if l == 0 {
                prev[self.lattice.coarsest_index()] = S::one();
            } else {
                prev.clone_from(&dists[l - 1]);
            }
            // d/dQ_l(e) and the adjoint of the previous layer's distribution.
            let mut law_grad = vec![S::zero(); b];
            let mut prev_adjoint = if l > 0 { costs[l - 1].clone() } else { vec![S::zero(); b] };
            for m in 0..b {
                for (e, &q) in laws[l].iter().enumerate() {
                    let a = adjoint[self.meet(m, e)];
                    law_grad[e] = law_grad[e] + prev[m] * a;
                    prev_adjoint[m] = prev_adjoint[m] + q * a;
                }
            }
            let probs = self.layer_probs(alpha, l);
            let prob_grads = self.edge_partition_law_backward(&probs, &law_grad);
            for (t, (p, g)) in probs.iter().zip(&prob_grads).enumerate() {
                let logit_grad = softmax_backward(p, g);
                grad.row_mut(t, l).copy_from_slice(&logit_grad);
            }
            adjoint = prev_adjoint;
        }
        Ok((value, grad))
    }
}

fn dot_costs<S: Scalar>(dists: &[Vec<S>], costs: &[Vec<S>]) -> S {
    dists
        .iter()
        .zip(costs)
        .map(|(d, c)| d.iter().zip(c).map(|(&p, &c)| p * c).sum::<S>())
        .sum()
}

fn clamp_and_renormalize<S: Scalar>(v: &mut [S]) {
    let floor = S::of(PROBABILITY_FLOOR);
    for p in v.iter_mut() {
        if *p < floor {
            *p = S::zero();
        }
    }
    let sum: S = v.iter().copied().sum();
    if sum > S::zero() {
        for p in v.iter_mut() {
            *p = *p / sum;
        }
    }
}

fn increment(digits: &mut [usize], base: usize) {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return;
        }
        *d = 0;
    }
}

/// Transition matrix of layer `layer`; builds the lattice tables on every call.
pub fn transition_kernel<S: Scalar>(alpha: &ArchitectureParams<S>, layer: usize) -> Result<Vec<Vec<S>>> {
    ResourceModel::new(alpha.num_tasks())?.transition_kernel(alpha, layer)
}

pub fn grouping_distribution<S: Scalar>(
    alpha: &ArchitectureParams<S>,
    table: &CostTable<S>,
) -> Result<GroupingDistribution<S>> {
    ResourceModel::new(alpha.num_tasks())?.grouping_distribution(alpha, table)
}

/// `E[C(Z)] = sum_l sum_k p(k_l = k) c(k, l)`.
pub fn expected_cost<S: Scalar>(alpha: &ArchitectureParams<S>, table: &CostTable<S>) -> Result<S> {
    ResourceModel::new(alpha.num_tasks())?.expected_cost(alpha, table)
}

pub fn expected_cost_grad<S: Scalar>(
    alpha: &ArchitectureParams<S>,
    table: &CostTable<S>,
) -> Result<ArchitectureParams<S>> {
    Ok(ResourceModel::new(alpha.num_tasks())?
        .expected_cost_with_grad(alpha, table)?
        .1)
}

/// Expected cost by summing over every joint discrete routing.
pub fn brute_force_expected_cost<S: Scalar>(
    alpha: &ArchitectureParams<S>,
    table: &CostTable<S>,
) -> Result<S> {
    let t = alpha.num_tasks();
    let l = alpha.num_layers();
    ensure!(l == table.num_layers(), Dimension, "alpha has {l} layers, cost table {}", table.num_layers());
    alpha.check_finite()?;
    let slots = (t * l) as u32;
    let routings = (t as u64).checked_pow(slots).filter(|&n| n <= BRUTE_FORCE_LIMIT);
    let Some(routings) = routings else {
        return Err(Error::Bounds(format!(
            "{t}^{slots} joint routings exceed the enumeration limit of {BRUTE_FORCE_LIMIT}; \
             use a Monte Carlo estimate instead"
        )));
    };
    let probs: Vec<Vec<Vec<S>>> = (0..t)
        .map(|task| (0..l).map(|layer| softmax(alpha.row(task, layer))).collect())
        .collect();
    // digits[layer * t + task]
    let mut digits = vec![0usize; t * l];
    let mut total = S::zero();
    for _ in 0..routings {
        let mut p = S::one();
        for layer in 0..l {
            for task in 0..t {
                p = p * probs[task][layer][digits[layer * t + task]];
            }
        }
        if p != S::zero() {
            let edge_choice: Vec<Vec<usize>> = digits.chunks(t).map(<[usize]>::to_vec).collect();
            let s = BranchedStructure::from_edge_choice(edge_choice)?;
            total = total + p * structure_cost(&s, table)?;
        }
        increment(&mut digits, t);
    }
    Ok(total)
}
