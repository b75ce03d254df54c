//! Synthetic multi-task regression benchmark.
//!
//! Task `t` in relatedness block `g` predicts `B_t tanh(gain * A_g x) + noise`:
//! tasks of one block share the projection `A_g` and differ only in their
//! private linear map `B_t`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nncore::Tensor;
use crate::partition::Partition;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

pub const CACHE_MAGIC: &[u8; 4] = b"BMTB";
pub const CACHE_VERSION: u32 = 1;

/// Encoder of the benchmark: narrow enough that one pair fits and two do not.
pub const BENCHMARK_LAYER_DIMS: [(usize, usize); 3] = [(12, 4), (4, 4), (4, 4)];

const STREAM_PROJECTION: u16 = 10;
const STREAM_PRIVATE: u16 = 11;
const STREAM_INPUT: u16 = 12;
const STREAM_NOISE: u16 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_tasks: usize,
    pub input_dim: usize,
    /// Rows of every shared projection.
    pub group_dim: usize,
    /// Target width of every task.
    pub output_dim: usize,
    pub relatedness: Partition,
    #[serde(default)]
    pub noise_std: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Orthonormal projection rows across all blocks.
    #[serde(default = "default_true")]
    pub orthogonal: bool,
    /// Every task uses the same private map.
    #[serde(default)]
    pub identical_private: bool,
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_true() -> bool {
    true
}

fn default_gain() -> f64 {
    1.0
}

impl SyntheticTaskSpec {
    /// Four tasks in two related pairs `{0,1}{2,3}`, sized for [`BENCHMARK_LAYER_DIMS`].
    pub fn benchmark() -> Self {
        SyntheticTaskSpec {
            num_tasks: 4,
            input_dim: 12,
            group_dim: 2,
            output_dim: 2,
            relatedness: Partition::from_rgs(&[0, 0, 1, 1]).expect("valid"),
            noise_std: 0.1,
            train_samples: 640,
            test_samples: 256,
            orthogonal: true,
            identical_private: false,
            gain: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_tasks >= 1, Config, "benchmark needs at least one task");
        ensure!(
            self.relatedness.num_tasks() == self.num_tasks,
            Config,
            "relatedness covers {} tasks, benchmark has {}",
            self.relatedness.num_tasks(),
            self.num_tasks
        );
        ensure!(
            self.input_dim >= 1 && self.group_dim >= 1 && self.output_dim >= 1,
            Config,
            "benchmark widths must be positive"
        );
        ensure!(
            self.noise_std >= 0.0 && self.noise_std.is_finite(),
            Config,
            "noise_std must be non-negative, got {}",
            self.noise_std
        );
        ensure!(self.gain > 0.0 && self.gain.is_finite(), Config, "gain must be positive");
        ensure!(
            self.train_samples >= 1 && self.test_samples >= 1,
            Config,
            "benchmark needs train and test samples"
        );
        if self.orthogonal {
            let rows = self.relatedness.num_parts() * self.group_dim;
            ensure!(
                rows <= self.input_dim,
                Config,
                "{rows} orthogonal projection rows do not fit in input_dim {}",
                self.input_dim
            );
        }
        Ok(())
    }
}

/// Inputs and per-task targets, split into train and test.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub seed: u64,
    pub train_x: Tensor<S>,
    pub test_x: Tensor<S>,
    pub train_y: Vec<Tensor<S>>,
    pub test_y: Vec<Tensor<S>>,
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_rows(rows: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| gaussian(rng)).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Gram-Schmidt with re-orthogonalization; returns unit rows.
fn orthonormalize(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = rows.split_at_mut(i);
                let c = dot(&rest[0], &done[j]);
                rest[0].iter_mut().zip(&done[j]).for_each(|(x, y)| *x -= c * y);
            }
        }
        normalize(&mut rows[i]);
    }
}

/// Unit-norm rows, one block of `group_dim` rows per relatedness block.
fn projections(spec: &SyntheticTaskSpec, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let groups = spec.relatedness.num_parts();
    let mut rng = rng::stream(seed, rng::stream_id(STREAM_PROJECTION, 0, 0));
    let mut rows = gaussian_rows(groups * spec.group_dim, spec.input_dim, &mut rng);
    if spec.orthogonal {
        orthonormalize(&mut rows);
    } else {
        rows.iter_mut().for_each(|r| normalize(r));
    }
    rows.chunks(spec.group_dim).map(|c| c.to_vec()).collect()
}

fn private_map(spec: &SyntheticTaskSpec, task: usize, seed: u64) -> Vec<Vec<f64>> {
    let key = if spec.identical_private { 0 } else { task as u16 };
    let mut rng = rng::stream(seed, rng::stream_id(STREAM_PRIVATE, key, 0));
    let scale = 1.0 / (spec.group_dim as f64).sqrt();
    let mut b = gaussian_rows(spec.output_dim, spec.group_dim, &mut rng);
    b.iter_mut().flatten().for_each(|v| *v *= scale);
    b
}

fn inputs<S: Scalar>(n: usize, dim: usize, seed: u64, split: u16) -> Tensor<S> {
    let mut rng = rng::stream(seed, rng::stream_id(STREAM_INPUT, split, 0));
    let data = (0..n * dim).map(|_| S::of(gaussian(&mut rng))).collect();
    Tensor::new(vec![n, dim], data).expect("shape matches")
}

fn targets<S: Scalar>(
    spec: &SyntheticTaskSpec,
    x: &Tensor<S>,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    rng: &mut Rng,
) -> Tensor<S> {
    let mut data = Vec::with_capacity(x.rows() * spec.output_dim);
    for i in 0..x.rows() {
        let xi: Vec<f64> = x.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let h: Vec<f64> = a.iter().map(|r| (spec.gain * dot(r, &xi)).tanh()).collect();
        for r in b {
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * gaussian(rng)
            } else {
                0.0
            };
            data.push(S::of(dot(r, &h) + noise));
        }
    }
    Tensor::new(vec![x.rows(), spec.output_dim], data).expect("shape matches")
}

/// Draws a dataset; equal specs and seeds give equal datasets.
pub fn generate_tasks<S: Scalar>(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset<S>> {
    spec.validate()?;
    let proj = projections(spec, seed);
    let train_x = inputs(spec.train_samples, spec.input_dim, seed, 0);
    let test_x = inputs(spec.test_samples, spec.input_dim, seed, 1);
    let mut train_y = Vec::with_capacity(spec.num_tasks);
    let mut test_y = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let a = &proj[spec.relatedness.block_of(t)];
        let b = private_map(spec, t, seed);
        let mut noise = rng::stream(seed, rng::stream_id(STREAM_NOISE, t as u16, 0));
        train_y.push(targets(spec, &train_x, a, &b, &mut noise));
        test_y.push(targets(spec, &test_x, a, &b, &mut noise));
    }
    Ok(Dataset {
        seed,
        train_x,
        test_x,
        train_y,
        test_y,
    })
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Bounds(format!("{v} does not fit the cache header")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_tensor<S: Scalar>(w: &mut impl Write, t: &Tensor<S>) -> Result<()> {
    for v in t.data() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<S: Scalar>(r: &mut impl Read, rows: usize, cols: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(S::of(f64::from_le_bytes(b)));
    }
    Tensor::new(vec![rows, cols], data)
}

impl<S: Scalar> Dataset<S> {
    pub fn num_tasks(&self) -> usize {
        self.train_y.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train_x.cols()
    }

    pub fn target_dims(&self) -> Vec<usize> {
        self.train_y.iter().map(|y| y.cols()).collect()
    }

    pub fn train_len(&self) -> usize {
        self.train_x.rows()
    }

    pub fn test_len(&self) -> usize {
        self.test_x.rows()
    }

    /// Checks that inputs and targets agree in sample counts.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_tasks() >= 1, Dimension, "dataset without tasks");
        ensure!(
            self.test_y.len() == self.num_tasks(),
            Dimension,
            "{} train targets, {} test targets",
            self.num_tasks(),
            self.test_y.len()
        );
        ensure!(self.test_x.cols() == self.input_dim(), Dimension, "train and test inputs differ in width");
        for t in 0..self.num_tasks() {
            ensure!(
                self.train_y[t].rows() == self.train_len() && self.test_y[t].rows() == self.test_len(),
                Dimension,
                "targets of task {t} do not match the sample counts"
            );
            ensure!(
                self.test_y[t].cols() == self.train_y[t].cols(),
                Dimension,
                "task {t} train and test targets differ in width"
            );
        }
        Ok(())
    }

    /// Little-endian binary cache: magic, version, dims, seed, then `f64` data.
    pub fn write_cache(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        write_u32(w, self.num_tasks())?;
        write_u32(w, self.input_dim())?;
        write_u32(w, self.train_len())?;
        write_u32(w, self.test_len())?;
        for d in self.target_dims() {
            write_u32(w, d)?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        write_tensor(w, &self.train_x)?;
        write_tensor(w, &self.test_x)?;
        for y in self.train_y.iter().chain(&self.test_y) {
            write_tensor(w, y)?;
        }
        Ok(())
    }

    pub fn read_cache(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == CACHE_MAGIC, Format, "not a benchmark cache (bad magic)");
        let version = read_u32(r)?;
        ensure!(
            version == CACHE_VERSION as usize,
            Format,
            "cache format version {version}, expected {CACHE_VERSION}"
        );
        let tasks = read_u32(r)?;
        ensure!((1..=crate::partition::MAX_TASKS).contains(&tasks), Format, "cache has {tasks} tasks");
        let input_dim = read_u32(r)?;
        let train = read_u32(r)?;
        let test = read_u32(r)?;
        let dims = (0..tasks).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let train_x = read_tensor(r, train, input_dim)?;
        let test_x = read_tensor(r, test, input_dim)?;
        let train_y = dims.iter().map(|&d| read_tensor(r, train, d)).collect::<Result<Vec<_>>>()?;
        let test_y = dims.iter().map(|&d| read_tensor(r, test, d)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            seed: u64::from_le_bytes(seed),
            train_x,
            test_x,
            train_y,
            test_y,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_cache(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_cache(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
