use bmtas::eval::{delta_m, generate_tasks, pearson, rsa_matrix, MetricRecord, SyntheticTaskSpec, TaskMetric};
use bmtas::{Partition, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn record(values: &[(&str, f64, bool)]) -> MetricRecord {
    MetricRecord::new(
        values
            .iter()
            .map(|&(name, value, lower_is_better)| TaskMetric {
                name: name.into(),
                value,
                lower_is_better,
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn nyud_shared_vs_single() {
    let single = record(&[("semseg", 40.08, false), ("depth", 0.5479, true), ("normals", 21.67, true), ("edges", 70.10, false)]);
    let shared = record(&[("semseg", 38.37, false), ("depth", 0.5766, true), ("normals", 22.66, true), ("edges", 70.90, false)]);
    let d = delta_m(&shared, &single).unwrap();
    assert!((d - -3.23).abs() <= 0.01, "{d}");
}

#[test]
fn pascal_shared_vs_single() {
    let single = record(&[
        ("semseg", 65.11, false),
        ("parts", 57.54, false),
        ("saliency", 65.41, false),
        ("normals", 13.98, true),
        ("edges", 69.50, false),
    ]);
    let shared = record(&[
        ("semseg", 59.69, false),
        ("parts", 55.96, false),
        ("saliency", 63.03, false),
        ("normals", 16.02, true),
        ("edges", 67.80, false),
    ]);
    let d = delta_m(&shared, &single).unwrap();
    assert!((d - -6.35).abs() <= 0.01, "{d}");
}

fn arb_records() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..6).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.1f64..100.0, n),
            proptest::collection::vec(0.1f64..100.0, n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

fn build(values: &[f64], dirs: &[bool]) -> MetricRecord {
    MetricRecord::new(
        values
            .iter()
            .zip(dirs)
            .enumerate()
            .map(|(i, (&value, &lower_is_better))| TaskMetric {
                name: format!("m{i}"),
                value,
                lower_is_better,
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn delta_m_is_unit_free((model, base, dirs) in arb_records(), which in 0usize..6, scale in 0.01f64..100.0) {
        let which = which % model.len();
        let d = delta_m(&build(&model, &dirs), &build(&base, &dirs)).unwrap();
        let mut m2 = model.clone();
        let mut b2 = base.clone();
        m2[which] *= scale;
        b2[which] *= scale;
        let d2 = delta_m(&build(&m2, &dirs), &build(&b2, &dirs)).unwrap();
        prop_assert!((d - d2).abs() <= 1e-9 * d.abs().max(1.0));
    }

    #[test]
    fn delta_m_is_antisymmetric_to_first_order(
        (base, _, dirs) in arb_records(),
        eps in proptest::collection::vec(-0.0099f64..0.0099, 6),
    ) {
        let model: Vec<f64> = base.iter().zip(&eps).map(|(b, e)| b * (1.0 + e)).collect();
        let (a, b) = (build(&model, &dirs), build(&base, &dirs));
        let forward = delta_m(&a, &b).unwrap();
        let backward = delta_m(&b, &a).unwrap();
        prop_assert!((forward + backward).abs() <= 1e-4 * 100.0, "{} vs {}", forward, backward);
        prop_assert_eq!(delta_m(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn rsa_is_permutation_equivariant(seed in any::<u64>(), order in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = bmtas::rng::stream(seed, 0);
        let feats: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(vec![12, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let m = rsa_matrix(&feats).unwrap();
        let permuted: Vec<Tensor> = order.iter().map(|&i| feats[i].clone()).collect();
        let mp = rsa_matrix(&permuted).unwrap();
        for a in 0..4 {
            prop_assert_eq!(mp.get(a, a), Some(1.0));
            for b in 0..4 {
                prop_assert_eq!(mp.get(a, b), m.get(order[a], order[b]));
                prop_assert_eq!(m.get(a, b), m.get(b, a));
            }
        }
    }
}

#[test]
fn rsa_of_identical_features_is_all_ones() {
    let mut rng = bmtas::rng::stream(3, 0);
    let f = Tensor::new(vec![30, 4], (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let m = rsa_matrix(&vec![f; 3]).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((m.get(i, j).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn finest_orthogonal_tasks_are_uncorrelated() {
    let spec = SyntheticTaskSpec {
        num_tasks: 4,
        relatedness: Partition::finest(4),
        group_dim: 2,
        output_dim: 1,
        train_samples: 1000,
        ..SyntheticTaskSpec::benchmark()
    };
    let data = generate_tasks::<f64>(&spec, 17).unwrap();
    for a in 0..4 {
        for b in a + 1..4 {
            let rho = pearson(data.train_y[a].data(), data.train_y[b].data()).unwrap();
            assert!(rho.abs() < 0.1, "tasks {a},{b}: {rho}");
        }
    }
}

#[test]
fn generator_examples() {
    let spec = SyntheticTaskSpec {
        relatedness: Partition::coarsest(4),
        noise_std: 0.0,
        identical_private: true,
        ..SyntheticTaskSpec::benchmark()
    };
    let data = generate_tasks::<f64>(&spec, 5).unwrap();
    assert!(data.train_y.windows(2).all(|w| w[0] == w[1]));
    let a = generate_tasks::<f64>(&SyntheticTaskSpec::benchmark(), 9).unwrap();
    let b = generate_tasks::<f64>(&SyntheticTaskSpec::benchmark(), 9).unwrap();
    assert_eq!(a, b);
    let mean = a.train_x.sum() / a.train_x.len() as f64;
    let var = a.train_x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.train_x.len() as f64;
    assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    let mut bad = SyntheticTaskSpec::benchmark();
    bad.noise_std = -1.0;
    assert!(generate_tasks::<f64>(&bad, 0).is_err());
}

#[test]
fn cache_file_round_trip() {
    let dir = std::env::temp_dir().join(format!("bmtas-cache-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bench.bin");
    let data = generate_tasks::<f64>(&SyntheticTaskSpec::benchmark(), 2).unwrap();
    data.save(&path).unwrap();
    let back = bmtas::Dataset::load(&path).unwrap();
    assert_eq!(back, data);
    std::fs::remove_dir_all(&dir).unwrap();
}
