//! Parameter storage and the two networks built from the candidate vocabulary:
//! the search-time supernet and the retrained branched network.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::graph::{BranchedStructure, SupergraphSpec};
use crate::rng;
use crate::scalar::Scalar;

const STREAM_CANDIDATE: u16 = 1;
const STREAM_HEAD: u16 = 2;
const STREAM_BRANCH: u16 = 3;

/// Named tensors addressed by slot index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

/// Flat `name -> {shape, data}` map.
pub type Checkpoint<S> = BTreeMap<String, Tensor<S>>;

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn get(&self, slot: usize) -> &Tensor<S> {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<S> {
        &mut self.tensors[slot]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Records every parameter as a leaf; the returned vars are indexed by slot.
    pub fn bind(&self, tape: &mut Tape<S>) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites slots from a checkpoint; every slot must be present with its shape.
    pub fn load_checkpoint(&mut self, checkpoint: &Checkpoint<S>) -> Result<()> {
        ensure!(
            checkpoint.len() == self.len(),
            Format,
            "checkpoint has {} tensors, model {}",
            checkpoint.len(),
            self.len()
        );
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(t) = checkpoint.get(name) else {
                return Err(crate::Error::Format(format!("checkpoint lacks {name}")));
            };
            ensure!(
                t.shape() == slot.shape(),
                Format,
                "{name}: shape {:?} vs {:?}",
                t.shape(),
                slot.shape()
            );
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Slots of an affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    /// Glorot-uniform weight, zero bias.
    fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_width + out_width) as f64).sqrt();
        let w: Vec<S> = (0..in_width * out_width)
            .map(|_| S::of(rng.gen_range(-limit..limit)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![in_width, out_width], w).expect("sized"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_width]));
        Linear {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.weight])?;
        tape.add_bias(h, vars[self.bias])
    }
}

/// `tanh(x W + b)`: the candidate operation of every layer.
pub fn dense_tanh<S: Scalar>(lin: &Linear, tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
    ensure!(
        tape.value(x).shape().len() == 2 && tape.value(x).cols() == lin.in_width,
        Dimension,
        "input {:?} for an operation of width {}",
        tape.value(x).shape(),
        lin.in_width
    );
    let h = lin.forward(tape, vars, x)?;
    tape.tanh(h)
}

/// How a task is routed through the supernet.
#[derive(Debug, Clone, Copy)]
pub enum Route<'a> {
    /// One relaxed weight row per layer, recorded on the tape.
    Soft(&'a [Var]),
    /// One candidate per layer.
    Discrete(&'a [usize]),
}

/// Parameters of the supernet: `T` candidates per layer plus one head per task.
#[derive(Debug, Clone)]
pub struct OperationParams<S> {
    pub store: ParamStore<S>,
    /// `candidates[l][j]`.
    pub candidates: Vec<Vec<Linear>>,
    pub heads: Vec<Linear>,
}

impl<S: Scalar> OperationParams<S> {
    /// Candidates of a layer start out identical; heads are seeded per task.
    pub fn init(spec: &SupergraphSpec<S>, target_dims: &[usize], seed: u64) -> Result<Self> {
        ensure!(
            target_dims.len() == spec.num_tasks,
            Dimension,
            "{} target widths for {} tasks",
            target_dims.len(),
            spec.num_tasks
        );
        let mut store = ParamStore::default();
        let mut candidates = Vec::with_capacity(spec.num_layers());
        for (l, &(i, o)) in spec.layer_dims.iter().enumerate() {
            let layer = (0..spec.num_tasks)
                .map(|j| {
                    let mut r = rng::stream(seed, rng::stream_id(STREAM_CANDIDATE, l as u16, 0));
                    Linear::init(&mut store, &format!("layer{l}.cand{j}"), i, o, &mut r)
                })
                .collect();
            candidates.push(layer);
        }
        let heads = target_dims
            .iter()
            .enumerate()
            .map(|(t, &d)| {
                let mut r = rng::stream(seed, rng::stream_id(STREAM_HEAD, t as u16, 0));
                Linear::init(&mut store, &format!("head{t}"), spec.output_width(), d, &mut r)
            })
            .collect();
        Ok(OperationParams {
            store,
            candidates,
            heads,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.candidates.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates[0].len()
    }

    pub fn candidate_forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        layer: usize,
        candidate: usize,
        x: Var,
    ) -> Result<Var> {
        ensure!(layer < self.num_layers(), Bounds, "layer {layer} out of range");
        ensure!(candidate < self.num_candidates(), Bounds, "candidate {candidate} out of range");
        dense_tanh(&self.candidates[layer][candidate], tape, vars, x)
    }

    /// `sum_j z[j] * candidate_j(x)`.
    pub fn mixed_layer_forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        layer: usize,
        z_row: Var,
        x: Var,
    ) -> Result<Var> {
        ensure!(
            tape.value(z_row).len() == self.num_candidates(),
            Dimension,
            "routing row of {} for {} candidates",
            tape.value(z_row).len(),
            self.num_candidates()
        );
        let outs = (0..self.num_candidates())
            .map(|j| self.candidate_forward(tape, vars, layer, j, x))
            .collect::<Result<Vec<_>>>()?;
        tape.mix(&outs, z_row)
    }

    /// Encoder plus head for `task`.
    pub fn task_forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        task: usize,
        route: Route<'_>,
        x: Var,
    ) -> Result<Var> {
        ensure!(task < self.heads.len(), Bounds, "task {task} out of range");
        let mut h = x;
        match route {
            Route::Soft(rows) => {
                ensure!(rows.len() == self.num_layers(), Dimension, "{} routing rows", rows.len());
                for (l, &z) in rows.iter().enumerate() {
                    h = self.mixed_layer_forward(tape, vars, l, z, h)?;
                }
            }
            Route::Discrete(choices) => {
                ensure!(choices.len() == self.num_layers(), Dimension, "{} choices", choices.len());
                for (l, &c) in choices.iter().enumerate() {
                    h = self.candidate_forward(tape, vars, l, c, h)?;
                }
            }
        }
        self.heads[task].forward(tape, vars, h)
    }

    /// Encoder output along a discrete path, without the head.
    pub fn encode_path(&self, x: &Tensor<S>, choices: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape)?;
        let mut h = tape.leaf(x.clone())?;
        for (l, &c) in choices.iter().enumerate() {
            h = self.candidate_forward(&mut tape, &vars, l, c, h)?;
        }
        Ok(tape.value(h).clone())
    }
}

/// A branched network: one operation per (layer, block), one head per task.
#[derive(Debug, Clone)]
pub struct BranchedNet<S> {
    /// Global task id of every local task.
    pub tasks: Vec<usize>,
    pub structure: BranchedStructure,
    pub store: ParamStore<S>,
    /// `ops[l][b]` serves block `b` of the layer-`l` grouping.
    pub ops: Vec<Vec<Linear>>,
    pub heads: Vec<Linear>,
    lr_scale: Vec<S>,
}

impl<S: Scalar> BranchedNet<S> {
    /// Fresh network for `structure` over the global tasks `tasks`.
    ///
    /// The operation of a block is seeded by its layer and its smallest global
    /// task, so a block holding only task `t` starts exactly like the matching
    /// layer of a single-task network for `t`.
    pub fn init(
        structure: &BranchedStructure,
        tasks: &[usize],
        layer_dims: &[(usize, usize)],
        target_dims: &[usize],
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            tasks.len() == structure.num_tasks(),
            Dimension,
            "{} task ids for a {}-task structure",
            tasks.len(),
            structure.num_tasks()
        );
        ensure!(
            layer_dims.len() == structure.num_layers(),
            Dimension,
            "{} layer widths for {} layers",
            layer_dims.len(),
            structure.num_layers()
        );
        let mut store = ParamStore::default();
        let mut lr_scale = Vec::new();
        let mut ops = Vec::with_capacity(layer_dims.len());
        for (l, (&(i, o), k)) in layer_dims.iter().zip(structure.groupings()).enumerate() {
            let mut layer = Vec::new();
            for block in k.blocks() {
                let lead = tasks[block[0]];
                let mut r = rng::stream(seed, rng::stream_id(STREAM_BRANCH, l as u16, lead as u16));
                let lin = Linear::init(&mut store, &format!("layer{l}.task{lead}"), i, o, &mut r);
                let share = S::one() / S::of(block.len() as f64);
                lr_scale.extend([share, share]);
                layer.push(lin);
            }
            ops.push(layer);
        }
        let out = layer_dims[layer_dims.len() - 1].1;
        let mut heads = Vec::with_capacity(tasks.len());
        for &t in tasks {
            ensure!(t < target_dims.len(), Bounds, "no target width for task {t}");
            let mut r = rng::stream(seed, rng::stream_id(STREAM_HEAD, t as u16, 0));
            heads.push(Linear::init(&mut store, &format!("head{t}"), out, target_dims[t], &mut r));
            lr_scale.extend([S::one(), S::one()]);
        }
        Ok(BranchedNet {
            tasks: tasks.to_vec(),
            structure: structure.clone(),
            store,
            ops,
            heads,
            lr_scale,
        })
    }

    /// Learning-rate multipliers per slot: `1 / (#tasks sharing)` for encoder operations.
    pub fn lr_scales(&self) -> &[S] {
        &self.lr_scale
    }

    pub fn forward(&self, tape: &mut Tape<S>, vars: &[Var], local_task: usize, x: Var) -> Result<Var> {
        ensure!(local_task < self.tasks.len(), Bounds, "task {local_task} out of range");
        let mut h = x;
        for (l, k) in self.structure.groupings().iter().enumerate() {
            h = dense_tanh(&self.ops[l][k.block_of(local_task)], tape, vars, h)?;
        }
        self.heads[local_task].forward(tape, vars, h)
    }

    /// Encoder output of `local_task` on `x`.
    pub fn encode(&self, x: &Tensor<S>, local_task: usize) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape)?;
        let mut h = tape.leaf(x.clone())?;
        for (l, k) in self.structure.groupings().iter().enumerate() {
            h = dense_tanh(&self.ops[l][k.block_of(local_task)], &mut tape, &vars, h)?;
        }
        Ok(tape.value(h).clone())
    }

    pub fn predict(&self, x: &Tensor<S>, local_task: usize) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let out = self.forward(&mut tape, &vars, local_task, xv)?;
        Ok(tape.value(out).clone())
    }
}
