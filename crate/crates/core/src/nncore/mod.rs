//! Dense tensors, reverse-mode differentiation, the candidate operation vocabulary,
//! task losses and optimizers.

mod model;
mod optim;
mod tape;
mod tensor;

pub use model::{dense_tanh, BranchedNet, Checkpoint, Linear, OperationParams, ParamStore, Route};
pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Loss family of a task. The toy vocabulary only has regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Regression,
}

/// Per-task weights of the summed task loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights {
    pub omega: Vec<f64>,
}

impl LossWeights {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        let w = LossWeights { omega };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(num_tasks: usize) -> Self {
        LossWeights {
            omega: vec![1.0; num_tasks],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.omega.iter().all(|&w| w > 0.0 && w.is_finite()),
            Config,
            "loss weights must be positive"
        );
        Ok(())
    }

    pub fn get<S: Scalar>(&self, task: usize) -> S {
        S::of(self.omega[task])
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// Mean squared error of a prediction.
pub fn task_loss<S: Scalar>(prediction: &Tensor<S>, target: &Tensor<S>, kind: TaskKind) -> Result<S> {
    ensure!(
        prediction.shape() == target.shape(),
        Dimension,
        "prediction {:?} vs target {:?}",
        prediction.shape(),
        target.shape()
    );
    match kind {
        TaskKind::Regression => Ok(tape::mse_value(prediction, target)),
    }
}

/// `sum_t omega_t * L_t`.
pub fn weighted_task_loss<S: Scalar>(losses: &[S], weights: &LossWeights) -> Result<S> {
    ensure!(
        losses.len() == weights.len(),
        Dimension,
        "{} losses for {} weights",
        losses.len(),
        weights.len()
    );
    Ok(losses
        .iter()
        .enumerate()
        .map(|(t, &l)| weights.get::<S>(t) * l)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SupergraphSpec;
    use crate::rng;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn candidate_forward_basics() {
        let spec = SupergraphSpec::<f64>::uniform(2, 1, 3).unwrap();
        let mut params = OperationParams::init(&spec, &[1, 1], 0).unwrap();
        let x = Tensor::from_rows(&[vec![0.01, -0.02, 0.03], vec![0.5, 0.1, -0.3]]).unwrap();

        let lin = params.candidates[0][0];
        *params.store.get_mut(lin.weight) = Tensor::zeros(vec![3, 3]);
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let out = params.candidate_forward(&mut tape, &vars, 0, 0, xv).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        *params.store.get_mut(lin.weight) = Tensor::identity(3);
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let out = params.candidate_forward(&mut tape, &vars, 0, 0, xv).unwrap();
        for (&o, &i) in tape.value(out).row(0).iter().zip(x.row(0)) {
            assert!((o - i).abs() <= i.abs().powi(3) / 3.0 + 1e-18);
        }

        // a batch of one equals the matching row of the full batch
        let row0 = x.select_rows(&[1]);
        let mut tape1 = Tape::new();
        let vars1 = params.store.bind(&mut tape1).unwrap();
        let xv1 = tape1.leaf(row0).unwrap();
        let out1 = params.candidate_forward(&mut tape1, &vars1, 0, 1, xv1).unwrap();
        let mut tape2 = Tape::new();
        let vars2 = params.store.bind(&mut tape2).unwrap();
        let xv2 = tape2.leaf(x).unwrap();
        let out2 = params.candidate_forward(&mut tape2, &vars2, 0, 1, xv2).unwrap();
        assert_eq!(tape1.value(out1).row(0), tape2.value(out2).row(1));
    }

    #[test]
    fn mixed_layer_properties() {
        let spec = SupergraphSpec::<f64>::uniform(2, 1, 4).unwrap();
        let mut params = OperationParams::init(&spec, &[1, 1], 1).unwrap();
        let mut r = rng::stream(9, 0);
        let x = random_matrix(3, 4, &mut r);
        let run = |params: &OperationParams<f64>, z: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = params.store.bind(&mut tape).unwrap();
            let xv = tape.leaf(x.clone()).unwrap();
            let zv = tape.leaf(Tensor::vector(z)).unwrap();
            let out = params.mixed_layer_forward(&mut tape, &vars, 0, zv, xv).unwrap();
            tape.value(out).clone()
        };
        // identical candidates right after init
        let a = run(&params, vec![1.0, 0.0]);
        let b = run(&params, vec![0.3, 0.7]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-15));

        let w1 = params.candidates[0][1].weight;
        *params.store.get_mut(w1) = random_matrix(4, 4, &mut r);
        let only1 = run(&params, vec![0.0, 1.0]);
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let direct = params.candidate_forward(&mut tape, &vars, 0, 1, xv).unwrap();
        assert_eq!(&only1, tape.value(direct));

        let only0 = run(&params, vec![1.0, 0.0]);
        let half = run(&params, vec![0.5, 0.5]);
        for ((&h, &a), &b) in half.data().iter().zip(only0.data()).zip(only1.data()) {
            assert!((h - 0.5 * (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn losses() {
        let t: Tensor<f64> = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert_eq!(task_loss(&t, &t, TaskKind::Regression).unwrap(), 0.0);
        let shifted = t.map(|v| v + 1.0);
        assert!((task_loss(&shifted, &t, TaskKind::Regression).unwrap() - 1.0).abs() < 1e-15);
        let p = Tensor::from_rows(&[vec![1.5, 1.0], vec![0.0, 0.0]]).unwrap();
        let base = task_loss(&p, &t, TaskKind::Regression).unwrap();
        let scaled_pred = Tensor::new(
            vec![2, 2],
            p.data().iter().zip(t.data()).map(|(&a, &b)| b + 3.0 * (a - b)).collect(),
        )
        .unwrap();
        let scaled = task_loss(&scaled_pred, &t, TaskKind::Regression).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        assert!(task_loss(&t, &Tensor::zeros(vec![4]), TaskKind::Regression).is_err());

        let w = LossWeights::uniform(3);
        assert_eq!(weighted_task_loss(&[1.0, 2.0, 3.0], &w).unwrap(), 6.0);
        let w1 = LossWeights::new(vec![2.5]).unwrap();
        assert_eq!(weighted_task_loss(&[4.0], &w1).unwrap(), 10.0);
        assert_eq!(weighted_task_loss(&[0.0, 0.0, 0.0], &w).unwrap(), 0.0);
        assert!(weighted_task_loss(&[1.0], &w).is_err());
        assert!(LossWeights::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_of_linear_form_is_input() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let w = tape.leaf(Tensor::new(vec![3, 1], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let unused = tape.leaf(Tensor::scalar(4.0)).unwrap();
        let y = tape.matmul(xv, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), x.data());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_state_errors() {
        let empty = Tape::<f64>::new();
        let mut other = Tape::<f64>::new();
        let v = other.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(empty.backward(v), Err(crate::Error::State(_))));
        let mut tape = Tape::<f64>::new();
        let _ = tape.leaf(Tensor::scalar(2.0)).unwrap();
        assert!(matches!(tape.backward(v), Err(crate::Error::State(_))));
        let vec = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(vec).is_err());
        assert!(matches!(
            tape.leaf(Tensor::scalar(f64::NAN)),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut r = rng::stream(21, 0);
        let x = random_matrix(5, 3, &mut r);
        let target = random_matrix(5, 2, &mut r);
        let mut params = vec![
            random_matrix(3, 4, &mut r),
            Tensor::vector((0..4).map(|_| r.gen_range(-0.5..0.5)).collect()),
            random_matrix(4, 2, &mut r),
            Tensor::vector((0..2).map(|_| r.gen_range(-0.5..0.5)).collect()),
        ];
        let loss = |params: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone()).unwrap()).collect();
            let xv = tape.leaf(x.clone()).unwrap();
            let h = tape.matmul(xv, vars[0]).unwrap();
            let h = tape.add_bias(h, vars[1]).unwrap();
            let h = tape.tanh(h).unwrap();
            let o = tape.matmul(h, vars[2]).unwrap();
            let o = tape.add_bias(o, vars[3]).unwrap();
            let o = tape.scale(o, 1.7).unwrap();
            let l = tape.mse(o, &target).unwrap();
            let grads = tape.backward(l).unwrap();
            let g = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
            (tape.value(l).item(), g)
        };
        let (_, analytic) = loss(&params);
        let h = 1e-6;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data()[i];
                params[p].data_mut()[i] = orig + h;
                let up = loss(&params).0;
                params[p].data_mut()[i] = orig - h;
                let dn = loss(&params).0;
                params[p].data_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = analytic[p].data()[i];
                assert!((fd - a).abs() / a.abs().max(1.0) < 1e-6, "param {p}[{i}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = SupergraphSpec::<f64>::uniform(2, 2, 3).unwrap();
        let params = OperationParams::init(&spec, &[2, 1], 4).unwrap();
        let json = serde_json::to_string(&params.store.to_checkpoint()).unwrap();
        assert!(json.contains("\"layer1.cand0.weight\":{\"shape\":[3,3]"));
        let back: Checkpoint<f64> = serde_json::from_str(&json).unwrap();
        let mut fresh = OperationParams::init(&spec, &[2, 1], 5).unwrap();
        fresh.store.load_checkpoint(&back).unwrap();
        assert_eq!(fresh.store, params.store);
    }
}
