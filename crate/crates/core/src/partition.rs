//! Task groupings as set partitions of `{0, .., T-1}`.
//!
//! A [`Partition`] is stored as its restricted-growth string (RGS): entry `i`
//! is the block index of task `i`, blocks are numbered in order of first
//! appearance. The RGS is canonical, so structural equality is set-partition
//! equality and the derived `Ord` is the lexicographic RGS order used for
//! enumeration.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, Error, Result};

/// Largest task count the exhaustive lattice routines accept.
pub const MAX_TASKS: usize = 8;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Partition {
    rgs: Vec<u8>,
}

impl Partition {
    /// Every task in one block.
    pub fn coarsest(num_tasks: usize) -> Self {
        Partition {
            rgs: vec![0; num_tasks],
        }
    }

    /// Every task on its own.
    pub fn finest(num_tasks: usize) -> Self {
        Partition {
            rgs: (0..num_tasks).map(|i| i as u8).collect(),
        }
    }

    /// Builds a partition from an already canonical restricted-growth string.
    pub fn from_rgs(rgs: &[usize]) -> Result<Self> {
        ensure!(!rgs.is_empty(), Domain, "a partition needs at least one task");
        ensure!(rgs.len() <= u8::MAX as usize, Bounds, "at most 255 tasks");
        ensure!(rgs[0] == 0, Domain, "restricted growth string must start at 0");
        let mut max = 0;
        for (i, &r) in rgs.iter().enumerate().skip(1) {
            ensure!(
                r <= max + 1,
                Domain,
                "entry {i} = {r} breaks restricted growth (prefix max {max})"
            );
            max = max.max(r);
        }
        Ok(Partition {
            rgs: rgs.iter().map(|&r| r as u8).collect(),
        })
    }

    /// Groups tasks carrying equal labels, e.g. the per-task edge choices of one layer.
    pub fn from_labels<L: PartialEq>(labels: &[L]) -> Self {
        let mut seen: Vec<&L> = Vec::new();
        let rgs = labels
            .iter()
            .map(|label| match seen.iter().position(|s| *s == label) {
                Some(p) => p as u8,
                None => {
                    seen.push(label);
                    (seen.len() - 1) as u8
                }
            })
            .collect();
        Partition { rgs }
    }

    /// Builds a partition from its blocks; blocks may come in any order.
    pub fn from_blocks(num_tasks: usize, blocks: &[Vec<usize>]) -> Result<Self> {
        let mut labels = vec![usize::MAX; num_tasks];
        for (b, block) in blocks.iter().enumerate() {
            ensure!(!block.is_empty(), Domain, "block {b} is empty");
            for &t in block {
                ensure!(t < num_tasks, Bounds, "task {t} out of range for T = {num_tasks}");
                ensure!(labels[t] == usize::MAX, Domain, "task {t} appears in two blocks");
                labels[t] = b;
            }
        }
        if let Some(t) = labels.iter().position(|&l| l == usize::MAX) {
            return Err(Error::Domain(format!("task {t} is not covered by any block")));
        }
        ensure!(num_tasks > 0, Domain, "a partition needs at least one task");
        Ok(Self::from_labels(&labels))
    }

    pub fn num_tasks(&self) -> usize {
        self.rgs.len()
    }

    pub fn num_parts(&self) -> usize {
        self.rgs.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn rgs(&self) -> &[u8] {
        &self.rgs
    }

    /// Block index of `task`.
    pub fn block_of(&self, task: usize) -> usize {
        self.rgs[task] as usize
    }

    /// Blocks ordered by smallest member, members ascending.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.num_parts()];
        for (t, &b) in self.rgs.iter().enumerate() {
            blocks[b as usize].push(t);
        }
        blocks
    }

    pub fn is_coarsest(&self) -> bool {
        self.num_parts() == 1
    }

    pub fn is_finest(&self) -> bool {
        self.num_parts() == self.num_tasks()
    }

    fn check_same_size(&self, other: &Partition) -> Result<()> {
        ensure!(
            self.num_tasks() == other.num_tasks(),
            Dimension,
            "partitions over {} and {} tasks",
            self.num_tasks(),
            other.num_tasks()
        );
        Ok(())
    }

    /// True iff every block of `self` lies inside a block of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> Result<bool> {
        self.check_same_size(coarser)?;
        Ok(self.refines_unchecked(coarser))
    }

    pub(crate) fn refines_unchecked(&self, coarser: &Partition) -> bool {
        let mut image = [u8::MAX; 256];
        for (&a, &b) in self.rgs.iter().zip(&coarser.rgs) {
            let slot = &mut image[a as usize];
            if *slot == u8::MAX {
                *slot = b;
            } else if *slot != b {
                return false;
            }
        }
        true
    }

    /// Coarsest common refinement: two tasks share a block iff they share one in both.
    pub fn meet(&self, other: &Partition) -> Result<Partition> {
        self.check_same_size(other)?;
        Ok(self.meet_unchecked(other))
    }

    pub(crate) fn meet_unchecked(&self, other: &Partition) -> Partition {
        let pairs: Vec<(u8, u8)> = self.rgs.iter().copied().zip(other.rgs.iter().copied()).collect();
        Self::from_labels(&pairs)
    }
}

impl fmt::Debug for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Partition({self})")
    }
}

/// Renders the blocks, e.g. `{0,1}{2}`.
impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for block in self.blocks() {
            let members: Vec<String> = block.iter().map(|t| t.to_string()).collect();
            write!(f, "{{{}}}", members.join(","))?;
        }
        Ok(())
    }
}

impl Serialize for Partition {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.blocks().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let blocks = Vec::<Vec<usize>>::deserialize(deserializer)?;
        let num_tasks = blocks.iter().map(Vec::len).sum();
        Partition::from_blocks(num_tasks, &blocks).map_err(D::Error::custom)
    }
}

fn check_task_count(num_tasks: usize) -> Result<()> {
    ensure!(
        (1..=MAX_TASKS).contains(&num_tasks),
        Bounds,
        "task count {num_tasks} outside 1..={MAX_TASKS} (exhaustive grouping cap)"
    );
    Ok(())
}

/// All partitions of `num_tasks` tasks in lexicographic RGS order (Bell-number many).
pub fn enumerate_partitions(num_tasks: usize) -> Result<Vec<Partition>> {
    check_task_count(num_tasks)?;
    let mut out = Vec::new();
    let mut rgs = vec![0u8; num_tasks];
    // prefix_max[i] = max(rgs[0..i])
    let mut prefix_max = vec![0u8; num_tasks];
    loop {
        out.push(Partition { rgs: rgs.clone() });
        let Some(i) = (1..num_tasks).rev().find(|&i| rgs[i] <= prefix_max[i]) else {
            break;
        };
        rgs[i] += 1;
        for j in i + 1..num_tasks {
            rgs[j] = 0;
            prefix_max[j] = prefix_max[j - 1].max(rgs[j - 1]);
        }
    }
    Ok(out)
}

/// Every grouping `k` refines, including `k` itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AncestorSet {
    pub base: Partition,
    pub members: Vec<Partition>,
}

pub fn ancestors(base: &Partition) -> Result<AncestorSet> {
    let members = enumerate_partitions(base.num_tasks())?
        .into_iter()
        .filter(|m| base.refines_unchecked(m))
        .collect();
    Ok(AncestorSet {
        base: base.clone(),
        members,
    })
}

/// The partitions of a fixed task count with index lookup.
#[derive(Debug, Clone)]
pub struct PartitionLattice {
    partitions: Vec<Partition>,
}

impl PartitionLattice {
    pub fn new(num_tasks: usize) -> Result<Self> {
        Ok(PartitionLattice {
            partitions: enumerate_partitions(num_tasks)?,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.partitions[0].num_tasks()
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn get(&self, index: usize) -> &Partition {
        &self.partitions[index]
    }

    /// Position of `p` in enumeration order.
    pub fn index_of(&self, p: &Partition) -> Option<usize> {
        self.partitions.binary_search(p).ok()
    }

    /// Index of the coarsest partition (always first in RGS order).
    pub fn coarsest_index(&self) -> usize {
        0
    }

    /// Index of the finest partition (always last in RGS order).
    pub fn finest_index(&self) -> usize {
        self.partitions.len() - 1
    }
}
