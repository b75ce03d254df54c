//! Gumbel-Softmax relaxation of the per-task routing, its temperature schedule,
//! and the final argmax discretization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::RoutingMask;
use crate::resloss::{softmax, softmax_backward, ArchitectureParams};
use crate::scalar::Scalar;

/// Uniform draws are kept inside `(GUMBEL_EPS, 1 - GUMBEL_EPS)`.
pub const GUMBEL_EPS: f64 = 1e-12;

/// Linear annealing from `start` to `end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    #[serde(default = "default_start")]
    pub start: f64,
    #[serde(default = "default_end")]
    pub end: f64,
    pub total_steps: usize,
}

fn default_start() -> f64 {
    5.0
}

fn default_end() -> f64 {
    0.1
}

impl TemperatureSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        let s = TemperatureSchedule {
            start,
            end,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// 5.0 down to 0.1.
    pub fn standard(total_steps: usize) -> Self {
        TemperatureSchedule {
            start: default_start(),
            end: default_end(),
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.end > 0.0 && self.start >= self.end && self.start.is_finite(),
            Config,
            "temperature schedule needs start >= end > 0, got {} -> {}",
            self.start,
            self.end
        );
        ensure!(self.total_steps >= 1, Config, "temperature schedule needs at least one step");
        Ok(())
    }

    pub fn tau(&self, step: usize) -> Result<f64> {
        ensure!(
            step <= self.total_steps,
            Bounds,
            "step {step} past the schedule end {}",
            self.total_steps
        );
        Ok(self.start + (self.end - self.start) * step as f64 / self.total_steps as f64)
    }
}

pub fn schedule_tau(schedule: &TemperatureSchedule, step: usize) -> Result<f64> {
    schedule.tau(step)
}

/// `-log(-log(u))` for a uniform `u`.
pub fn gumbel_from_uniform<S: Scalar>(u: S) -> S {
    -(-u.ln()).ln()
}

/// `len` independent standard Gumbel draws.
pub fn gumbel_noise<S: Scalar, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<S> {
    (0..len)
        .map(|_| {
            let u = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            gumbel_from_uniform(S::of(u))
        })
        .collect()
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax<S: Scalar>(logits: &[S], noise: &[S], tau: S) -> Result<Vec<S>> {
    ensure!(tau > S::zero(), Domain, "temperature must be positive, got {tau}");
    ensure!(
        logits.len() == noise.len(),
        Dimension,
        "{} logits, {} noise values",
        logits.len(),
        noise.len()
    );
    let scaled: Vec<S> = logits.iter().zip(noise).map(|(&a, &g)| (a + g) / tau).collect();
    Ok(softmax(&scaled))
}

/// Vector-Jacobian product of [`gumbel_softmax`] with respect to its logits.
pub fn gumbel_softmax_backward<S: Scalar>(z: &[S], upstream: &[S], tau: S) -> Vec<S> {
    softmax_backward(z, upstream)
        .into_iter()
        .map(|g| g / tau)
        .collect()
}

/// A relaxed routing for one task, with the noise that produced it.
#[derive(Debug, Clone)]
pub struct GumbelSample<S> {
    pub z: RoutingMask<S>,
    /// `noise[l][j]`.
    pub noise: Vec<Vec<S>>,
    pub tau: S,
}

/// One relaxed row for `(task, layer)`.
pub fn sample_soft<S: Scalar, R: Rng + ?Sized>(
    alpha: &ArchitectureParams<S>,
    task: usize,
    layer: usize,
    tau: S,
    rng: &mut R,
) -> Result<Vec<S>> {
    ensure!(tau > S::zero(), Domain, "temperature must be positive, got {tau}");
    let noise = gumbel_noise(alpha.num_candidates(), rng);
    gumbel_softmax(alpha.row(task, layer), &noise, tau)
}

/// Fresh noise for every layer of `task`, and the relaxed routing it induces.
pub fn sample_routing<S: Scalar, R: Rng + ?Sized>(
    alpha: &ArchitectureParams<S>,
    task: usize,
    tau: S,
    rng: &mut R,
) -> Result<GumbelSample<S>> {
    let noise: Vec<Vec<S>> = (0..alpha.num_layers())
        .map(|_| gumbel_noise(alpha.num_candidates(), rng))
        .collect();
    relaxed_routing(alpha, task, noise, tau)
}

/// Relaxed routing of `task` for given noise.
pub fn relaxed_routing<S: Scalar>(
    alpha: &ArchitectureParams<S>,
    task: usize,
    noise: Vec<Vec<S>>,
    tau: S,
) -> Result<GumbelSample<S>> {
    ensure!(
        noise.len() == alpha.num_layers(),
        Dimension,
        "{} noise rows for {} layers",
        noise.len(),
        alpha.num_layers()
    );
    let rows = noise
        .iter()
        .enumerate()
        .map(|(l, g)| gumbel_softmax(alpha.row(task, l), g, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(GumbelSample {
        z: RoutingMask::soft(task, rows)?,
        noise,
        tau,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One-hot routing per task at the largest logit of every row.
pub fn discretize<S: Scalar>(alpha: &ArchitectureParams<S>) -> Vec<RoutingMask<S>> {
    (0..alpha.num_tasks())
        .map(|t| {
            let choices: Vec<usize> = (0..alpha.num_layers()).map(|l| argmax(alpha.row(t, l))).collect();
            RoutingMask::one_hot(t, &choices, alpha.num_candidates()).expect("argmax is in range")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::derive_groupings;
    use crate::rng;

    #[test]
    fn gumbel_fixed_point_and_determinism() {
        let g: f64 = gumbel_from_uniform((-1.0f64).exp());
        assert!(g.abs() < 1e-15);
        let a: Vec<f64> = gumbel_noise(16, &mut rng::stream(3, 0));
        let b: Vec<f64> = gumbel_noise(16, &mut rng::stream(3, 0));
        assert_eq!(a, b);
        assert_ne!(a, gumbel_noise::<f64, _>(16, &mut rng::stream(3, 1)));
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let draws: Vec<f64> = gumbel_noise(100_000, &mut rng::stream(11, 0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn temperature_limits() {
        let alpha = ArchitectureParams::<f64>::from_nested(vec![vec![vec![2.0, -1.0, 0.5]]; 3]).unwrap();
        let mut rng = rng::stream(5, 0);
        let hot = sample_soft(&alpha, 0, 0, 1e6, &mut rng).unwrap();
        assert!(hot.iter().all(|&v| (v - 1.0 / 3.0).abs() < 0.01));
        assert!((hot.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let logits = [2.0f64, -1.0, 0.5];
        let noise = [0.1, 0.3, 1.2];
        let cold = gumbel_softmax(&logits, &noise, 1e-4).unwrap();
        assert_eq!(argmax(&cold), 0);
        assert!((cold[0] - 1.0).abs() < 1e-12);
        assert!(gumbel_softmax(&logits, &noise, 0.0).is_err());
        assert!(sample_soft(&alpha, 0, 0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = TemperatureSchedule::standard(100);
        assert_eq!(s.tau(0).unwrap(), 5.0);
        assert!((s.tau(100).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.tau(50).unwrap() - 2.55).abs() < 1e-15);
        assert!(s.tau(101).is_err());
        assert!(TemperatureSchedule::new(0.1, 5.0, 10).is_err());
        assert!(TemperatureSchedule::new(5.0, 0.0, 10).is_err());
        assert!(TemperatureSchedule::new(5.0, 0.1, 0).is_err());
    }

    #[test]
    fn discretize_rules() {
        assert_eq!(argmax(&[2.0, 0.1, -1.0]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.5, 0.7, 0.7]), 1);
        let zeros = ArchitectureParams::<f64>::zeros(3, 4);
        let s = derive_groupings(&discretize(&zeros)).unwrap();
        assert!(s.groupings().iter().all(|k| k.is_coarsest()));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let logits = [0.3, -0.7, 1.1, 0.2];
        let noise = [0.5, -0.2, 0.1, 0.9];
        let tau = 0.7;
        let upstream = [1.0, -2.0, 0.5, 3.0];
        let z = gumbel_softmax(&logits, &noise, tau).unwrap();
        let analytic = gumbel_softmax_backward(&z, &upstream, tau);
        let h = 1e-6;
        for j in 0..4 {
            let mut up = logits;
            let mut dn = logits;
            up[j] += h;
            dn[j] -= h;
            let f = |x: &[f64]| -> f64 {
                gumbel_softmax(x, &noise, tau)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() / analytic[j].abs().max(1.0) < 1e-5);
        }
    }
}
