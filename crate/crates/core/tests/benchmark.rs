//! Behaviour of warm-up and retraining on the synthetic benchmark.

use bmtas::eval::{delta_m, generate_tasks, MetricRecord, SyntheticTaskSpec, BENCHMARK_LAYER_DIMS};
use bmtas::graph::BranchedStructure;
use bmtas::nncore::{Route, Tape};
use bmtas::search::{retrain, train_single_task, warm_up, SearchConfig};
use bmtas::{Partition, SupergraphSpec};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// On orthogonal tasks, task `j` does better along the path of candidate `j`
/// than along the path of any other candidate.
#[test]
fn warm_up_specializes_candidates() {
    let spec = SyntheticTaskSpec {
        relatedness: Partition::finest(4),
        ..SyntheticTaskSpec::benchmark()
    };
    let dims = BENCHMARK_LAYER_DIMS.to_vec();
    let mut margins = vec![Vec::new(); 12];
    for seed in 0..5 {
        let data = generate_tasks::<f64>(&spec, seed).unwrap();
        let sg = SupergraphSpec::new(4, dims.clone()).unwrap();
        let params = warm_up(&sg, &data, &SearchConfig::new(0.0, 1, seed)).unwrap();
        let loss = |task: usize, path: usize| {
            let mut tape = Tape::new();
            let vars = params.store.bind(&mut tape).unwrap();
            let x = tape.leaf(data.test_x.clone()).unwrap();
            let out = params.task_forward(&mut tape, &vars, task, Route::Discrete(&[path; 3]), x).unwrap();
            let l = tape.mse(out, &data.test_y[task]).unwrap();
            tape.value(l).item()
        };
        let mut k = 0;
        for j in 0..4 {
            for i in (0..4).filter(|&i| i != j) {
                margins[k].push(loss(j, i) - loss(j, j));
                k += 1;
            }
        }
    }
    for m in margins {
        assert!(median(m) > 0.0);
    }
}

#[test]
fn grouped_pairs_beat_full_sharing_after_retraining() {
    let dims = BENCHMARK_LAYER_DIMS.to_vec();
    let grouped = BranchedStructure::from_groupings(vec![Partition::from_rgs(&[0, 0, 1, 1]).unwrap(); 3]).unwrap();
    let shared = BranchedStructure::fully_shared(4, 3);
    let mut wins = 0;
    for seed in 0..5 {
        let data = generate_tasks::<f64>(&SyntheticTaskSpec::benchmark(), seed).unwrap();
        let mut c = SearchConfig::new(0.0, 1, seed);
        c.retrain_steps = 1000;
        let single: Vec<f64> = (0..4).map(|t| train_single_task(t, &data, &dims, &c).unwrap()).collect();
        let base = MetricRecord::from_losses(&single).unwrap();
        let dg = delta_m(&MetricRecord::from_losses(&retrain(&grouped, &data, &dims, &c).unwrap()).unwrap(), &base).unwrap();
        let ds = delta_m(&MetricRecord::from_losses(&retrain(&shared, &data, &dims, &c).unwrap()).unwrap(), &base).unwrap();
        if dg > ds {
            wins += 1;
        }
    }
    assert!(wins >= 3, "grouped won {wins}/5");
}
