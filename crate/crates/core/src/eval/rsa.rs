//! Representational similarity analysis.
//!
//! For every task the probe samples are compared pairwise with `1 - pearson`;
//! the condensed dissimilarity vectors of two tasks are then compared with
//! Spearman's rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nncore::Tensor;
use crate::scalar::Scalar;

/// Probe-set size used when none is configured.
pub const DEFAULT_PROBES: usize = 256;

/// Symmetric similarity matrix; `None` marks an entry that is undefined
/// because one of the two dissimilarity vectors is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaMatrix<S> {
    pub entries: Vec<Vec<Option<S>>>,
}

impl<S: Scalar> RsaMatrix<S> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<S> {
        self.entries[i][j]
    }

    /// CSV with an empty field for undefined entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.entries {
            let cells: Vec<String> = row
                .iter()
                .map(|e| e.map(|v| format!("{v}")).unwrap_or_default())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pearson correlation; `None` if either input is constant.
pub fn pearson<S: Scalar>(a: &[S], b: &[S]) -> Option<S> {
    let n = S::of(a.len() as f64);
    let ma = a.iter().copied().sum::<S>() / n;
    let mb = b.iter().copied().sum::<S>() / n;
    let (mut sab, mut saa, mut sbb) = (S::zero(), S::zero(), S::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab = sab + dx * dy;
        saa = saa + dx * dx;
        sbb = sbb + dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if !(denom > S::zero()) || !denom.is_finite() {
        return None;
    }
    Some((sab / denom).max(-S::one()).min(S::one()))
}

/// 1-based ranks with ties replaced by their average rank.
pub fn rank_average<S: Scalar>(values: &[S]) -> Vec<S> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![S::zero(); values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = S::of((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman<S: Scalar>(a: &[S], b: &[S]) -> Option<S> {
    pearson(&rank_average(a), &rank_average(b))
}

/// Condensed `1 - pearson` dissimilarities between probe rows; `None` if a row is constant.
fn dissimilarities<S: Scalar>(features: &Tensor<S>) -> Option<Vec<S>> {
    let p = features.rows();
    let mut out = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for a in 0..p {
        for b in a + 1..p {
            out.push(S::one() - pearson(features.row(a), features.row(b))?);
        }
    }
    Some(out)
}

/// Task-by-task similarity of encoder features on a shared probe set.
///
/// `features[t]` holds one row per probe sample.
pub fn rsa_matrix<S: Scalar>(features: &[Tensor<S>]) -> Result<RsaMatrix<S>> {
    ensure!(!features.is_empty(), Dimension, "no task features");
    let probes = features[0].rows();
    ensure!(probes >= 3, Dimension, "need at least 3 probe samples, got {probes}");
    for (t, f) in features.iter().enumerate() {
        ensure!(f.shape().len() == 2, Dimension, "features of task {t} are not a matrix");
        ensure!(
            f.rows() == probes,
            Dimension,
            "task {t} has {} probe rows, task 0 has {probes}",
            f.rows()
        );
        ensure!(f.is_finite(), Numeric, "features of task {t} are not finite");
    }
    let rdms: Vec<Option<Vec<S>>> = features.iter().map(dissimilarities).collect();
    let n = features.len();
    let mut entries = vec![vec![None; n]; n];
    for i in 0..n {
        entries[i][i] = Some(S::one());
        for j in i + 1..n {
            let v = match (&rdms[i], &rdms[j]) {
                (Some(a), Some(b)) => spearman(a, b),
                _ => None,
            };
            entries[i][j] = v;
            entries[j][i] = v;
        }
    }
    Ok(RsaMatrix { entries })
}
