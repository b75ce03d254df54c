use bmtas::eval::{generate_tasks, SyntheticTaskSpec};
use bmtas::nncore::{task_loss, weighted_task_loss, LossWeights, Route, Tape, TaskKind};
use bmtas::relax::gumbel_noise;
use bmtas::resloss::ResourceModel;
use bmtas::search::search_loss_and_grads;
use bmtas::{ArchitectureParams, OperationParams, Partition, SupergraphSpec, Tensor};
use rand::Rng;

fn random(rows: usize, cols: usize, rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn supernet() -> (SupergraphSpec, OperationParams) {
    let spec = SupergraphSpec::new(3, vec![(5, 4), (4, 4), (4, 3)]).unwrap();
    let mut params = OperationParams::init(&spec, &[2, 1, 3], 11).unwrap();
    // Distinct candidates so routing matters.
    let mut rng = bmtas::rng::stream(12, 0);
    for t in params.store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    (spec, params)
}

#[test]
fn candidate_forward_examples() {
    let spec = SupergraphSpec::new(2, vec![(3, 3)]).unwrap();
    let mut params = OperationParams::init(&spec, &[1, 1], 0).unwrap();
    let lin = params.candidates[0][1];
    params.store.get_mut(lin.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let run = |params: &OperationParams, x: &Tensor, j: usize| {
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let out = params.candidate_forward(&mut tape, &vars, 0, j, xv).unwrap();
        tape.value(out).clone()
    };
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap();
    assert!(run(&params, &x, 1).data().iter().all(|&v| v == 0.0));

    *params.store.get_mut(lin.weight) = Tensor::identity(3);
    let small = Tensor::from_rows(&[vec![0.01, -0.02, 0.005]]).unwrap();
    let out = run(&params, &small, 1);
    for (o, x) in out.data().iter().zip(small.data()) {
        assert!((o - x).abs() <= x.abs().powi(3) / 3.0 + 1e-18);
    }

    let batch = run(&params, &x, 0);
    for i in 0..2 {
        let single = run(&params, &x.select_rows(&[i]), 0);
        assert_eq!(single.data(), batch.row(i));
    }
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape).unwrap();
    let wrong = tape.leaf(Tensor::zeros(vec![1, 4])).unwrap();
    assert!(params.candidate_forward(&mut tape, &vars, 0, 0, wrong).is_err());
}

#[test]
fn mixing_examples() {
    let (spec, params) = supernet();
    let x = random(6, 5, &mut bmtas::rng::stream(1, 0), 1.0);
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape).unwrap();
    let xv = tape.leaf(x.clone()).unwrap();
    let onehot = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap();
    let mixed = params.mixed_layer_forward(&mut tape, &vars, 0, onehot, xv).unwrap();
    let direct = params.candidate_forward(&mut tape, &vars, 0, 1, xv).unwrap();
    assert_eq!(tape.value(mixed), tape.value(direct));

    let half = tape.leaf(Tensor::vector(vec![0.5, 0.0, 0.5])).unwrap();
    let avg = params.mixed_layer_forward(&mut tape, &vars, 0, half, xv).unwrap();
    let c0 = params.candidate_forward(&mut tape, &vars, 0, 0, xv).unwrap();
    let c2 = params.candidate_forward(&mut tape, &vars, 0, 2, xv).unwrap();
    for ((a, b), c) in tape.value(avg).data().iter().zip(tape.value(c0).data()).zip(tape.value(c2).data()) {
        assert!((a - 0.5 * (b + c)).abs() < 1e-15);
    }

    // Whole soft path with one-hot rows reproduces the discrete path bit for bit.
    let rows: Vec<_> = [0usize, 2, 1]
        .iter()
        .map(|&c| {
            let mut z = vec![0.0; 3];
            z[c] = 1.0;
            tape.leaf(Tensor::vector(z)).unwrap()
        })
        .collect();
    let soft = params.task_forward(&mut tape, &vars, 2, Route::Soft(&rows), xv).unwrap();
    let hard = params.task_forward(&mut tape, &vars, 2, Route::Discrete(&[0, 2, 1]), xv).unwrap();
    assert_eq!(tape.value(soft), tape.value(hard));
    assert_eq!(spec.num_layers(), 3);

    let identical = OperationParams::init(&spec, &[2, 1, 3], 3).unwrap();
    let a = identical.encode_path(&x, &[0, 0, 0]).unwrap();
    assert_eq!(a, identical.encode_path(&x, &[1, 2, 0]).unwrap());
}

#[test]
fn loss_examples() {
    let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
    assert_eq!(task_loss(&t, &t, TaskKind::Regression).unwrap(), 0.0);
    let shifted = t.map(|v| v + 1.0);
    assert_eq!(task_loss(&shifted, &t, TaskKind::Regression).unwrap(), 1.0);
    let r = Tensor::from_rows(&[vec![0.3, -0.1], vec![0.2, 0.7]]).unwrap();
    let mut p1 = t.clone();
    p1.add_assign(&r);
    let mut p3 = t.clone();
    p3.add_assign(&r.map(|v| 3.0 * v));
    let l1 = task_loss(&p1, &t, TaskKind::Regression).unwrap();
    let l3 = task_loss(&p3, &t, TaskKind::Regression).unwrap();
    assert!((l3 - 9.0 * l1).abs() < 1e-12);
    assert!(task_loss(&t, &Tensor::zeros(vec![2, 3]), TaskKind::Regression).is_err());

    assert_eq!(weighted_task_loss(&[1.0, 2.0, 3.5], &LossWeights::uniform(3)).unwrap(), 6.5);
    assert_eq!(weighted_task_loss(&[2.0], &LossWeights::new(vec![0.5]).unwrap()).unwrap(), 1.0);
    assert_eq!(weighted_task_loss(&[0.0, 0.0], &LossWeights::new(vec![3.0, 4.0]).unwrap()).unwrap(), 0.0);
    assert!(weighted_task_loss(&[1.0], &LossWeights::uniform(2)).is_err());
    assert!(LossWeights::new(vec![1.0, 0.0]).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.5, 2.5, -0.5]).unwrap()).unwrap();
    let unused = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let y = tape.matmul(x, w).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.5, 2.5, -0.5]);
    assert!(g.get(unused).is_none());

    let empty = Tape::<f64>::new();
    let mut other = Tape::new();
    let v = other.leaf(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(empty.backward(v), Err(bmtas::Error::State(_))));
    let mut third = Tape::new();
    third.leaf(Tensor::scalar(2.0)).unwrap();
    assert!(matches!(third.backward(v), Err(bmtas::Error::State(_))));
    assert!(matches!(third.leaf(Tensor::scalar(f64::NAN)), Err(bmtas::Error::Numeric(_))));
}

/// Full search objective against central differences in every weight and logit.
#[test]
fn end_to_end_gradients() {
    let (spec, params) = supernet();
    let mut rng = bmtas::rng::stream(40, 0);
    let alpha = ArchitectureParams::from_flat(3, 3, (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let noise: Vec<Vec<Vec<f64>>> = (0..3).map(|_| (0..3).map(|_| gumbel_noise(3, &mut rng)).collect()).collect();
    let x = random(7, 5, &mut rng, 1.0);
    let targets = vec![random(7, 2, &mut rng, 1.0), random(7, 1, &mut rng, 1.0), random(7, 3, &mut rng, 1.0)];
    let omega = LossWeights::new(vec![1.0, 0.7, 1.3]).unwrap();
    let model = ResourceModel::new(3).unwrap();
    let tau = 0.8;
    let eval = |p: &OperationParams, a: &ArchitectureParams| {
        search_loss_and_grads(p, a, &noise, tau, &x, &targets, &omega, 0.2, &spec, &model).unwrap()
    };
    let obj = eval(&params, &alpha);
    let rel = |fd: f64, g: f64| (fd - g).abs() / g.abs().max(1.0);
    let h = 1e-6;
    for slot in 0..params.store.len() {
        for i in 0..params.store.get(slot).len() {
            let mut up = params.clone();
            let mut dn = params.clone();
            up.store.get_mut(slot).data_mut()[i] += h;
            dn.store.get_mut(slot).data_mut()[i] -= h;
            let fd = (eval(&up, &alpha).value - eval(&dn, &alpha).value) / (2.0 * h);
            let g = obj.theta_grad[slot].data()[i];
            assert!(rel(fd, g) <= 1e-5, "slot {slot}[{i}]: {fd} vs {g}");
        }
    }
    for i in 0..27 {
        let mut up = alpha.clone();
        let mut dn = alpha.clone();
        up.as_mut_slice()[i] += h;
        dn.as_mut_slice()[i] -= h;
        let fd = (eval(&params, &up).value - eval(&params, &dn).value) / (2.0 * h);
        let g = obj.alpha_grad.as_slice()[i];
        assert!(rel(fd, g) <= 1e-5, "alpha[{i}]: {fd} vs {g}");
    }
}

#[test]
fn losses_are_deterministic() {
    let spec = SyntheticTaskSpec {
        relatedness: Partition::finest(3),
        num_tasks: 3,
        ..SyntheticTaskSpec::benchmark()
    };
    let run = || {
        let data = generate_tasks::<f64>(&spec, 4).unwrap();
        let sg = SupergraphSpec::new(3, vec![(12, 4), (4, 4)]).unwrap();
        let params = OperationParams::init(&sg, &data.target_dims(), 4).unwrap();
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape).unwrap();
        let x = tape.leaf(data.train_x.clone()).unwrap();
        let out = params.task_forward(&mut tape, &vars, 1, Route::Discrete(&[1, 0]), x).unwrap();
        let loss = tape.mse(out, &data.train_y[1]).unwrap();
        tape.value(loss).item()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}
