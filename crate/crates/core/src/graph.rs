//! The layered supergraph, per-task routings and the branched structures they assemble into.
//!
//! Layers are indexed from 0 throughout. Layer `l` holds one candidate operation per
//! task; a task's routing picks one candidate per layer, and two tasks keep sharing
//! computation at layer `l` only while their picks agree on every layer up to `l`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::partition::{Partition, PartitionLattice};
use crate::scalar::Scalar;

/// MAdds of one candidate operation per layer; a grouping with `p` parts at
/// layer `l` costs `p * unit_cost[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable<S> {
    unit_cost: Vec<S>,
}

impl<S: Scalar> CostTable<S> {
    pub fn new(unit_cost: Vec<S>) -> Result<Self> {
        ensure!(!unit_cost.is_empty(), Domain, "cost table needs at least one layer");
        for (l, &u) in unit_cost.iter().enumerate() {
            ensure!(
                u.is_finite() && u > S::zero(),
                Domain,
                "unit cost of layer {l} must be positive, got {u}"
            );
        }
        Ok(CostTable { unit_cost })
    }

    /// Unit costs all equal to one.
    pub fn uniform(num_layers: usize) -> Self {
        CostTable {
            unit_cost: vec![S::one(); num_layers],
        }
    }

    /// Analytic MAdds of the dense toy operation: `2 * in * out` per sample.
    pub fn for_dense_layers(layer_dims: &[(usize, usize)]) -> Self {
        CostTable {
            unit_cost: layer_dims
                .iter()
                .map(|&(i, o)| S::of(2.0 * i as f64 * o as f64))
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.unit_cost.len()
    }

    pub fn unit_costs(&self) -> &[S] {
        &self.unit_cost
    }

    pub fn unit(&self, layer: usize) -> Result<S> {
        self.unit_cost.get(layer).copied().ok_or_else(|| {
            Error::Bounds(format!(
                "layer {layer} out of range for {} layers",
                self.unit_cost.len()
            ))
        })
    }

    /// Cost of the fully shared encoder, `sum_l u_l`.
    pub fn shared_cost(&self) -> S {
        self.unit_cost.iter().copied().sum()
    }
}

/// `c(k, l)`: MAdds of grouping `k` at layer `l`.
pub fn grouping_cost<S: Scalar>(k: &Partition, layer: usize, table: &CostTable<S>) -> Result<S> {
    Ok(S::of(k.num_parts() as f64) * table.unit(layer)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupergraphSpec<S> {
    pub num_tasks: usize,
    /// `(input width, output width)` of the candidate operation at each layer.
    pub layer_dims: Vec<(usize, usize)>,
    pub cost_table: CostTable<S>,
}

impl<S: Scalar> SupergraphSpec<S> {
    /// Spec with the toy operation's analytic costs.
    pub fn new(num_tasks: usize, layer_dims: Vec<(usize, usize)>) -> Result<Self> {
        let cost_table = CostTable::for_dense_layers(&layer_dims);
        Self::with_costs(num_tasks, layer_dims, cost_table)
    }

    pub fn with_costs(
        num_tasks: usize,
        layer_dims: Vec<(usize, usize)>,
        cost_table: CostTable<S>,
    ) -> Result<Self> {
        let spec = SupergraphSpec {
            num_tasks,
            layer_dims,
            cost_table,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform-width spec, mostly for tests.
    pub fn uniform(num_tasks: usize, num_layers: usize, width: usize) -> Result<Self> {
        Self::with_costs(
            num_tasks,
            vec![(width, width); num_layers],
            CostTable::uniform(num_layers),
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_tasks >= 1, Config, "need at least one task");
        ensure!(!self.layer_dims.is_empty(), Config, "need at least one layer");
        ensure!(
            self.cost_table.num_layers() == self.layer_dims.len(),
            Dimension,
            "cost table has {} layers, supergraph has {}",
            self.cost_table.num_layers(),
            self.layer_dims.len()
        );
        for (l, pair) in self.layer_dims.windows(2).enumerate() {
            ensure!(
                pair[0].1 == pair[1].0,
                Dimension,
                "layer {l} outputs width {} but layer {} expects {}",
                pair[0].1,
                l + 1,
                pair[1].0
            );
        }
        ensure!(
            self.layer_dims.iter().all(|&(i, o)| i > 0 && o > 0),
            Config,
            "layer widths must be positive"
        );
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn output_width(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Discrete,
    Soft,
}

/// One task's selection over the candidates of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMask<S> {
    pub task: usize,
    rows: Vec<Vec<S>>,
    mode: MaskMode,
}

fn row_tolerance<S: Scalar>() -> S {
    S::of(1e-9).max(S::epsilon() * S::of(64.0))
}

impl<S: Scalar> RoutingMask<S> {
    /// One-hot rows picking `choices[l]` out of `width` candidates at layer `l`.
    pub fn one_hot(task: usize, choices: &[usize], width: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(choices.len());
        for (l, &c) in choices.iter().enumerate() {
            ensure!(c < width, Bounds, "layer {l}: candidate {c} out of {width}");
            let mut row = vec![S::zero(); width];
            row[c] = S::one();
            rows.push(row);
        }
        Ok(RoutingMask {
            task,
            rows,
            mode: MaskMode::Discrete,
        })
    }

    /// Soft rows, each a distribution over candidates.
    pub fn soft(task: usize, rows: Vec<Vec<S>>) -> Result<Self> {
        let tol = row_tolerance::<S>();
        for (l, row) in rows.iter().enumerate() {
            ensure!(
                row.iter().all(|&v| v.is_finite() && v >= S::zero()),
                Domain,
                "layer {l}: soft routing entries must be finite and non-negative"
            );
            let sum: S = row.iter().copied().sum();
            ensure!(
                (sum - S::one()).abs() <= tol,
                Domain,
                "layer {l}: soft routing row sums to {sum}"
            );
        }
        Ok(RoutingMask {
            task,
            rows,
            mode: MaskMode::Soft,
        })
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn rows(&self) -> &[Vec<S>] {
        &self.rows
    }

    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    /// Chosen candidate per layer; only defined for discrete masks.
    pub fn choices(&self) -> Result<Vec<usize>> {
        ensure!(
            self.mode == MaskMode::Discrete,
            Mode,
            "task {}: soft routing masks have no discrete choice",
            self.task
        );
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().position(|&v| v == S::one()).unwrap_or(0))
            .collect())
    }
}

/// A refinement chain of task groupings, one per layer, plus the routing that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BranchedStructure {
    num_tasks: usize,
    groupings: Vec<Partition>,
    /// `edge_choice[l][t]`: candidate picked by task `t` at layer `l`.
    edge_choice: Vec<Vec<usize>>,
}

impl BranchedStructure {
    /// Folds per-layer edge agreement into the cumulative grouping chain.
    pub fn from_edge_choice(edge_choice: Vec<Vec<usize>>) -> Result<Self> {
        ensure!(!edge_choice.is_empty(), Dimension, "need at least one layer");
        let num_tasks = edge_choice[0].len();
        ensure!(num_tasks >= 1, Dimension, "need at least one task");
        let mut current = Partition::coarsest(num_tasks);
        let mut groupings = Vec::with_capacity(edge_choice.len());
        for (l, row) in edge_choice.iter().enumerate() {
            ensure!(
                row.len() == num_tasks,
                Dimension,
                "layer {l} has {} choices, expected {num_tasks}",
                row.len()
            );
            current = current.meet_unchecked(&Partition::from_labels(row));
            groupings.push(current.clone());
        }
        Ok(BranchedStructure {
            num_tasks,
            groupings,
            edge_choice,
        })
    }

    /// Structure from a grouping chain alone; routing is synthesized as "block index".
    pub fn from_groupings(groupings: Vec<Partition>) -> Result<Self> {
        ensure!(!groupings.is_empty(), Dimension, "need at least one layer");
        let num_tasks = groupings[0].num_tasks();
        for (l, pair) in groupings.windows(2).enumerate() {
            ensure!(
                pair[1].refines(&pair[0])?,
                Domain,
                "grouping at layer {} does not refine layer {l}",
                l + 1
            );
        }
        let edge_choice = groupings
            .iter()
            .map(|k| (0..num_tasks).map(|t| canonical_edge(k, t)).collect())
            .collect();
        Ok(BranchedStructure {
            num_tasks,
            groupings,
            edge_choice,
        })
    }

    pub fn fully_shared(num_tasks: usize, num_layers: usize) -> Self {
        Self::from_edge_choice(vec![vec![0; num_tasks]; num_layers]).expect("valid shape")
    }

    pub fn fully_branched(num_tasks: usize, num_layers: usize) -> Self {
        Self::from_edge_choice(vec![(0..num_tasks).collect(); num_layers]).expect("valid shape")
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_layers(&self) -> usize {
        self.groupings.len()
    }

    pub fn groupings(&self) -> &[Partition] {
        &self.groupings
    }

    pub fn grouping(&self, layer: usize) -> &Partition {
        &self.groupings[layer]
    }

    pub fn edge_choice(&self) -> &[Vec<usize>] {
        &self.edge_choice
    }

    /// Checks the refinement chain and its consistency with `edge_choice`.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_edge_choice(self.edge_choice.clone())?;
        ensure!(
            rebuilt.groupings == self.groupings,
            Domain,
            "groupings disagree with the recorded edge choices"
        );
        for (l, pair) in self.groupings.windows(2).enumerate() {
            ensure!(
                pair[1].refines_unchecked(&pair[0]),
                Domain,
                "grouping at layer {} re-merges branches of layer {l}",
                l + 1
            );
        }
        Ok(())
    }

    /// Deepest grouping that is neither fully shared nor fully branched.
    pub fn deepest_nontrivial_grouping(&self) -> Option<&Partition> {
        self.groupings
            .iter()
            .rev()
            .find(|k| !k.is_coarsest() && !k.is_finest())
    }

    /// Stable 64-bit FNV-1a digest of the grouping chain.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for k in &self.groupings {
            for &b in k.rgs().iter().chain(std::iter::once(&u8::MAX)) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Edge used by task `t` when a block is identified with its candidate: the block's smallest task.
fn canonical_edge(k: &Partition, t: usize) -> usize {
    let b = k.block_of(t);
    (0..k.num_tasks()).find(|&s| k.block_of(s) == b).unwrap_or(t)
}

/// Combines one discrete mask per task into the branched structure they induce.
pub fn derive_groupings<S: Scalar>(masks: &[RoutingMask<S>]) -> Result<BranchedStructure> {
    ensure!(!masks.is_empty(), Dimension, "need one routing mask per task");
    let num_tasks = masks.len();
    let num_layers = masks[0].num_layers();
    let mut by_task = vec![None; num_tasks];
    for mask in masks {
        ensure!(mask.task < num_tasks, Dimension, "mask for unknown task {}", mask.task);
        ensure!(
            mask.num_layers() == num_layers,
            Dimension,
            "task {} has {} layers, expected {num_layers}",
            mask.task,
            mask.num_layers()
        );
        ensure!(
            mask.rows.iter().all(|r| r.len() == num_tasks),
            Dimension,
            "task {} rows must have one entry per candidate ({num_tasks})",
            mask.task
        );
        ensure!(by_task[mask.task].is_none(), Dimension, "two masks for task {}", mask.task);
        by_task[mask.task] = Some(mask.choices()?);
    }
    let choices: Vec<Vec<usize>> = by_task.into_iter().map(|c| c.expect("all tasks")).collect();
    let edge_choice = (0..num_layers)
        .map(|l| choices.iter().map(|c| c[l]).collect())
        .collect();
    BranchedStructure::from_edge_choice(edge_choice)
}

/// `sum_l c(k_l, l)` for an arbitrary sequence of groupings.
pub fn groupings_cost<S: Scalar>(groupings: &[Partition], table: &CostTable<S>) -> Result<S> {
    ensure!(
        groupings.len() == table.num_layers(),
        Dimension,
        "{} groupings for a {}-layer cost table",
        groupings.len(),
        table.num_layers()
    );
    groupings
        .iter()
        .enumerate()
        .map(|(l, k)| grouping_cost(k, l, table))
        .sum()
}

/// `C(Z)`: encoder MAdds of a branched structure.
pub fn structure_cost<S: Scalar>(s: &BranchedStructure, table: &CostTable<S>) -> Result<S> {
    groupings_cost(&s.groupings, table)
}

/// Number of distinct refinement chains of length `num_layers` over `num_tasks` tasks.
pub fn count_branching_structures(num_tasks: usize, num_layers: usize) -> Result<u128> {
    ensure!(num_layers >= 1, Bounds, "need at least one layer");
    let lattice = PartitionLattice::new(num_tasks)?;
    let parts = lattice.partitions();
    let mut counts = vec![1u128; parts.len()];
    for _ in 1..num_layers {
        let mut next = vec![0u128; parts.len()];
        for (ki, k) in parts.iter().enumerate() {
            for (mi, m) in parts.iter().enumerate() {
                if k.refines_unchecked(m) {
                    next[ki] = next[ki].checked_add(counts[mi]).ok_or_else(|| {
                        Error::Bounds("structure count overflows u128".into())
                    })?;
                }
            }
        }
        counts = next;
    }
    counts
        .iter()
        .try_fold(0u128, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| Error::Bounds("structure count overflows u128".into()))
}

/// JSON document for a branched structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureDocument {
    pub tasks: Vec<String>,
    pub layers: Vec<LayerGroups>,
    pub edge_choice: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGroups {
    pub groups: Vec<Vec<usize>>,
}

impl StructureDocument {
    pub fn new(s: &BranchedStructure, task_names: &[String]) -> Result<Self> {
        ensure!(
            task_names.len() == s.num_tasks(),
            Dimension,
            "{} names for {} tasks",
            task_names.len(),
            s.num_tasks()
        );
        Ok(StructureDocument {
            tasks: task_names.to_vec(),
            layers: s
                .groupings()
                .iter()
                .map(|k| LayerGroups { groups: k.blocks() })
                .collect(),
            edge_choice: s.edge_choice().to_vec(),
        })
    }

    /// Rebuilds the structure and checks that the recorded groups match the routing.
    pub fn to_structure(&self) -> Result<BranchedStructure> {
        let s = BranchedStructure::from_edge_choice(self.edge_choice.clone())?;
        ensure!(
            s.num_tasks() == self.tasks.len(),
            Dimension,
            "{} task names for {} tasks",
            self.tasks.len(),
            s.num_tasks()
        );
        ensure!(
            self.layers.len() == s.num_layers(),
            Dimension,
            "{} layer records for {} routing layers",
            self.layers.len(),
            s.num_layers()
        );
        for (l, layer) in self.layers.iter().enumerate() {
            let k = Partition::from_blocks(s.num_tasks(), &layer.groups)?;
            ensure!(
                &k == s.grouping(l),
                Domain,
                "layer {l}: groups {k} disagree with the edge choices ({})",
                s.grouping(l)
            );
        }
        Ok(s)
    }
}

fn dot_escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

fn block_label(block: &[usize], names: &[String]) -> String {
    let names: Vec<&str> = block.iter().map(|&t| names[t].as_str()).collect();
    dot_escape(&names.join(","))
}

/// Graphviz rendering: one node per (layer, block) between an `input` source and an
/// `output` sink, edges labeled with the tasks flowing along them.
pub fn export_dot(s: &BranchedStructure, task_names: &[String]) -> Result<String> {
    ensure!(
        task_names.len() == s.num_tasks(),
        Dimension,
        "{} names for {} tasks",
        task_names.len(),
        s.num_tasks()
    );
    let node_id = |layer: usize, block: &[usize]| format!("l{layer}_t{}", block[0]);
    let mut out = String::new();
    out.push_str("digraph branched {\n");
    out.push_str("  rankdir=LR;\n");
    out.push_str("  input [shape=box, label=\"input\"];\n");
    out.push_str("  output [shape=box, label=\"output\"];\n");
    for (l, k) in s.groupings().iter().enumerate() {
        for block in k.blocks() {
            let _ = writeln!(
                out,
                "  {} [shape=ellipse, label=\"{}\"];",
                node_id(l, &block),
                block_label(&block, task_names)
            );
        }
    }
    for (l, k) in s.groupings().iter().enumerate() {
        for block in k.blocks() {
            let from = if l == 0 {
                "input".to_string()
            } else {
                let parent = s.grouping(l - 1);
                let pb = parent.block_of(block[0]);
                let parent_block: Vec<usize> =
                    (0..s.num_tasks()).filter(|&t| parent.block_of(t) == pb).collect();
                node_id(l - 1, &parent_block)
            };
            let _ = writeln!(
                out,
                "  {from} -> {} [label=\"{}\"];",
                node_id(l, &block),
                block_label(&block, task_names)
            );
        }
    }
    if let Some(last) = s.groupings().last() {
        for block in last.blocks() {
            let _ = writeln!(
                out,
                "  {} -> output [label=\"{}\"];",
                node_id(s.num_layers() - 1, &block),
                block_label(&block, task_names)
            );
        }
    }
    out.push_str("}\n");
    Ok(out)
}
