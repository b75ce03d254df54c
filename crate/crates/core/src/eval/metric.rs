use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetric {
    pub name: String,
    pub value: f64,
    pub lower_is_better: bool,
}

/// One metric value per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub tasks: Vec<TaskMetric>,
}

impl MetricRecord {
    pub fn new(tasks: Vec<TaskMetric>) -> Result<Self> {
        let r = MetricRecord { tasks };
        r.validate()?;
        Ok(r)
    }

    /// Test losses, all lower-is-better, named `task{t}`.
    pub fn from_losses(losses: &[f64]) -> Result<Self> {
        Self::new(
            losses
                .iter()
                .enumerate()
                .map(|(t, &value)| TaskMetric {
                    name: format!("task{t}"),
                    value,
                    lower_is_better: true,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.tasks.is_empty(), Config, "metric record without tasks");
        for m in &self.tasks {
            ensure!(m.value.is_finite(), Numeric, "metric {} is not finite", m.name);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tasks.iter().map(|m| m.value).collect()
    }
}

/// Average sign-adjusted relative change of `model` over `baseline`, in percent.
pub fn delta_m(model: &MetricRecord, baseline: &MetricRecord) -> Result<f64> {
    model.validate()?;
    baseline.validate()?;
    ensure!(
        model.len() == baseline.len(),
        Dimension,
        "{} model metrics vs {} baseline metrics",
        model.len(),
        baseline.len()
    );
    let mut acc = 0.0;
    for (m, b) in model.tasks.iter().zip(&baseline.tasks) {
        ensure!(
            m.name == b.name && m.lower_is_better == b.lower_is_better,
            Config,
            "metric {} ({}) does not match baseline {} ({})",
            m.name,
            direction(m.lower_is_better),
            b.name,
            direction(b.lower_is_better)
        );
        ensure!(b.value != 0.0, Domain, "baseline metric {} is zero", b.name);
        let rel = (m.value - b.value) / b.value;
        acc += if m.lower_is_better { -rel } else { rel };
    }
    Ok(100.0 * acc / model.len() as f64)
}

fn direction(lower: bool) -> &'static str {
    if lower {
        "lower is better"
    } else {
        "higher is better"
    }
}
