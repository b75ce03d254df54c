use bmtas::CostTable;
use bmtas::resloss::{
    brute_force_expected_cost, edge_probabilities, expected_cost, expected_cost_grad, grouping_distribution,
    transition_kernel, ArchitectureParams, ResourceModel,
};
use bmtas::{ancestors, enumerate_partitions, Partition};
use proptest::prelude::*;
use rand::Rng;

fn random_alpha(t: usize, l: usize, rng: &mut impl Rng, scale: f64) -> ArchitectureParams<f64> {
    let logits = (0..t * l * t).map(|_| rng.gen_range(-scale..scale)).collect();
    ArchitectureParams::from_flat(t, l, logits).unwrap()
}

fn p(rgs: &[usize]) -> Partition {
    Partition::from_rgs(rgs).unwrap()
}

#[test]
fn edge_probability_examples() {
    let zeros = ArchitectureParams::<f64>::zeros(4, 1);
    assert!(edge_probabilities(&zeros, 2, 0).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let a = ArchitectureParams::from_nested(vec![vec![vec![3f64.ln(), 0.0]], vec![vec![0.0, 0.0]]]).unwrap();
    let probs = edge_probabilities(&a, 0, 0).unwrap();
    assert!((probs[0] - 0.75).abs() < 1e-15 && (probs[1] - 0.25).abs() < 1e-15);
    let shifted = ArchitectureParams::from_nested(vec![vec![vec![3f64.ln() + 5.0, 5.0]], vec![vec![0.0, 0.0]]]).unwrap();
    let ps = edge_probabilities(&shifted, 0, 0).unwrap();
    assert!((ps[0] - probs[0]).abs() < 1e-15);
    assert!(ArchitectureParams::from_nested(vec![vec![vec![f64::NAN, 0.0]], vec![vec![0.0, 0.0]]]).is_err());
}

#[test]
fn kernel_examples() {
    let uniform = ArchitectureParams::<f64>::zeros(2, 1);
    let k = transition_kernel(&uniform, 0).unwrap();
    // Lattice order: {0,1} then {0}{1}; enumerate the four joint picks.
    let joint = 0.25 * 2.0;
    assert!((k[0][0] - joint).abs() < 1e-15 && (k[0][1] - joint).abs() < 1e-15);
    assert_eq!(k[1], vec![0.0, 1.0]);

    let a = ArchitectureParams::from_nested(vec![
        vec![vec![0.0, -1000.0, -1000.0]],
        vec![vec![0.0, -1000.0, -1000.0]],
        vec![vec![-1000.0, 0.0, -1000.0]],
    ])
    .unwrap();
    let lattice = enumerate_partitions(3).unwrap();
    let k = transition_kernel(&a, 0).unwrap();
    for (mi, m) in lattice.iter().enumerate() {
        let target = m.meet(&p(&[0, 0, 1])).unwrap();
        let ti = lattice.iter().position(|x| *x == target).unwrap();
        assert_eq!(k[mi][ti], 1.0);
    }
}

#[test]
fn kernel_rows_are_distributions_with_refining_support() {
    let mut rng = bmtas::rng::stream(5, 0);
    for t in 1..=4 {
        let lattice = enumerate_partitions(t).unwrap();
        for _ in 0..5 {
            let alpha = random_alpha(t, 2, &mut rng, 3.0);
            for l in 0..2 {
                let k = transition_kernel(&alpha, l).unwrap();
                for (mi, m) in lattice.iter().enumerate() {
                    let s: f64 = k[mi].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    for (ki, kk) in lattice.iter().enumerate() {
                        assert!(k[mi][ki] >= 0.0);
                        if !kk.refines(m).unwrap() {
                            assert_eq!(k[mi][ki], 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn distribution_examples() {
    let dist = grouping_distribution(&ArchitectureParams::<f64>::zeros(2, 2), &CostTable::uniform(2)).unwrap();
    assert!((dist.probability(1, &Partition::coarsest(2)) - 0.25).abs() < 1e-15);
    assert!((dist.probability(1, &Partition::finest(2)) - 0.75).abs() < 1e-15);
    let one = ArchitectureParams::<f64>::zeros(3, 1);
    let d1 = grouping_distribution(&one, &CostTable::uniform(1)).unwrap();
    assert_eq!(d1.layers[0], transition_kernel(&one, 0).unwrap()[0]);
}

#[test]
fn distribution_support_follows_ancestors() {
    let mut rng = bmtas::rng::stream(6, 0);
    for t in 2..=4 {
        for _ in 0..5 {
            // Sparse logits put exact zeros into the law.
            let mut alpha = random_alpha(t, 3, &mut rng, 2.0);
            for v in alpha.as_mut_slice() {
                if rng.gen_bool(0.4) {
                    *v = -1000.0;
                }
            }
            for i in 0..t * 3 {
                let row = &mut alpha.as_mut_slice()[i * t..(i + 1) * t];
                if row.iter().all(|&v| v == -1000.0) {
                    row[0] = 0.0;
                }
            }
            let d = grouping_distribution(&alpha, &CostTable::uniform(3)).unwrap();
            for l in 0..3 {
                assert!((d.layers[l].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if l == 0 {
                    continue;
                }
                for (i, k) in d.partitions.iter().enumerate() {
                    if d.layers[l][i] > 0.0 {
                        let anc = ancestors(k).unwrap();
                        assert!(anc.members.iter().any(|m| d.probability(l - 1, m) > 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn expected_cost_examples() {
    let table = CostTable::uniform(2);
    let uniform = ArchitectureParams::<f64>::zeros(2, 2);
    assert!((expected_cost(&uniform, &table).unwrap() - 3.25).abs() < 1e-12);
    assert!((brute_force_expected_cost(&uniform, &table).unwrap() - 3.25).abs() < 1e-12);
}

#[test]
fn brute_force_guard_mentions_monte_carlo() {
    let alpha = ArchitectureParams::<f64>::zeros(4, 3);
    let err = brute_force_expected_cost(&alpha, &CostTable::uniform(3)).unwrap_err();
    assert!(matches!(err, bmtas::Error::Bounds(_)));
    assert!(err.to_string().contains("Monte Carlo"));
}

#[test]
fn gradient_symmetry_examples() {
    let g = expected_cost_grad(&ArchitectureParams::<f64>::zeros(2, 3), &CostTable::uniform(3)).unwrap();
    for i in 0..(g.as_slice().len() / 2) {
        let row = &g.as_slice()[2 * i..2 * i + 2];
        assert!((row[0] + row[1]).abs() < 1e-15);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = bmtas::rng::stream(8, 0);
    let model = ResourceModel::new(3).unwrap();
    for _ in 0..20 {
        let alpha = random_alpha(3, 3, &mut rng, 2.0);
        let table = CostTable::new((0..3).map(|_| rng.gen_range(1.0..5.0)).collect()).unwrap();
        let (_, g) = model.expected_cost_with_grad(&alpha, &table).unwrap();
        for i in 0..alpha.as_slice().len() {
            let h = 1e-5;
            let mut up = alpha.clone();
            let mut dn = alpha.clone();
            up.as_mut_slice()[i] += h;
            dn.as_mut_slice()[i] -= h;
            let fd = (model.expected_cost(&up, &table).unwrap() - model.expected_cost(&dn, &table).unwrap()) / (2.0 * h);
            let gi = g.as_slice()[i];
            assert!((fd - gi).abs() / gi.abs().max(1.0) <= 1e-6, "{fd} vs {gi}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dp_equals_brute_force(t in 2usize..=3, l in 1usize..=3, seed in any::<u64>(), scale in 0.1f64..6.0) {
        prop_assume!((t as u64).pow((t * l) as u32) <= 1_000_000);
        let mut rng = bmtas::rng::stream(seed, 0);
        let alpha = random_alpha(t, l, &mut rng, scale);
        let table = CostTable::new((0..l).map(|_| rng.gen_range(0.5..3.0)).collect()).unwrap();
        let dp = expected_cost(&alpha, &table).unwrap();
        let bf = brute_force_expected_cost(&alpha, &table).unwrap();
        prop_assert!((dp - bf).abs() <= 1e-9, "{} vs {}", dp, bf);
    }

    #[test]
    fn cost_is_bounded(t in 1usize..=5, l in 1usize..=4, seed in any::<u64>(), scale in 0.1f64..30.0) {
        let mut rng = bmtas::rng::stream(seed, 1);
        let alpha = random_alpha(t, l, &mut rng, scale);
        let table = CostTable::new((0..l).map(|_| rng.gen_range(0.5..3.0)).collect()).unwrap();
        let c = expected_cost(&alpha, &table).unwrap();
        let lo = table.shared_cost();
        prop_assert!(c >= lo - 1e-9 && c <= t as f64 * lo + 1e-9);
    }

    #[test]
    fn gradient_rows_sum_to_zero(t in 1usize..=4, l in 1usize..=3, seed in any::<u64>()) {
        let mut rng = bmtas::rng::stream(seed, 2);
        let alpha = random_alpha(t, l, &mut rng, 3.0);
        let g = expected_cost_grad(&alpha, &CostTable::uniform(l)).unwrap();
        for row in g.as_slice().chunks(t) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
