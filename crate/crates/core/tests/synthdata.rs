use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use fedhtl::autodiff::Tensor;
use fedhtl::evaluation::MetricKind;
use fedhtl::models::TaskKind;
use fedhtl::synthdata::{
    data_statistics, generate_scenario, scale_sizes, ClientDataset, ScenarioConfig, ScenarioKind, Splits,
    GRAPH_DC_SIZES,
};

fn config(kind: ScenarioKind, sizes: Vec<usize>, heterogeneity: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        kind,
        clients: sizes.len(),
        sizes,
        feature_dim: 5,
        regression_fraction: if kind == ScenarioKind::DistinctTasks { 0.5 } else { 0.0 },
        heterogeneity,
        noise: 0.1,
        feature_shift: 0.5,
        regression_outputs: 1,
        regression_metric: MetricKind::Mse,
        seed,
    }
}

#[test]
fn scaled_graph_schedule() {
    let sizes = scale_sizes(&GRAPH_DC_SIZES, 10);
    let data = generate_scenario(&config(ScenarioKind::DistinctClasses, sizes, 0.5, 3)).unwrap();
    assert_eq!(data.len(), 13);
    assert_eq!(data[0].len(), 18);
    assert_eq!(data[12].len(), 433);
    for w in data.windows(2) {
        assert!(w[0].id < w[1].id);
        assert!(w[0].len() <= w[1].len());
    }
}

#[test]
fn distinct_tasks_put_regression_on_largest_ids() {
    let data = generate_scenario(&config(ScenarioKind::DistinctTasks, vec![20, 30, 40, 50], 1.0, 1)).unwrap();
    let tasks: Vec<TaskKind> = data.iter().map(|d| d.task).collect();
    use TaskKind::*;
    assert_eq!(tasks, [BinaryClassification, BinaryClassification, Regression, Regression]);
}

#[test]
fn zero_heterogeneity_shares_the_labeling_rule() {
    let data = generate_scenario(&config(ScenarioKind::DistinctClasses, vec![30; 5], 0.0, 8)).unwrap();
    for d in &data {
        assert_eq!(d.task_direction, data[0].task_direction);
    }
}

fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}

fn column_mean(ds: &ClientDataset, f: impl Fn(&ClientDataset, usize) -> f64) -> f64 {
    (0..ds.len()).map(|i| f(ds, i)).sum::<f64>() / ds.len() as f64
}

#[test]
fn clients_are_exchangeable_without_heterogeneity() {
    let mut first = (Vec::new(), Vec::new());
    let mut last = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let data = generate_scenario(&config(ScenarioKind::DistinctClasses, vec![100; 4], 0.0, seed)).unwrap();
        let feature = |d: &ClientDataset, i: usize| d.features.row(i)[0];
        let label = |d: &ClientDataset, i: usize| d.targets.row(i)[0];
        first.0.push(column_mean(&data[0], feature));
        first.1.push(column_mean(&data[0], label));
        last.0.push(column_mean(&data[3], feature));
        last.1.push(column_mean(&data[3], label));
    }
    for (a, b) in [(&first.0, &last.0), (&first.1, &last.1)] {
        let p = welch_p(a, b);
        assert!(p > 0.01, "p = {p}");
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = config(ScenarioKind::DistinctTasks, vec![15, 25, 35, 45], 2.0, 77);
    assert_eq!(generate_scenario(&cfg).unwrap(), generate_scenario(&cfg).unwrap());
    let other = ScenarioConfig { seed: 78, ..cfg.clone() };
    assert_ne!(generate_scenario(&cfg).unwrap(), generate_scenario(&other).unwrap());
}

fn dataset_from(rows: Vec<f64>, d: usize) -> ClientDataset {
    let n = rows.len() / d;
    ClientDataset {
        id: 1,
        features: Tensor::new(vec![n, d], rows).unwrap(),
        targets: Tensor::zeros(&[n, 1]),
        task: TaskKind::BinaryClassification,
        metric: MetricKind::Accuracy,
        splits: Splits { train: (0..n).collect(), valid: vec![], test: vec![] },
        label_transforms: vec![],
        task_direction: None,
    }
}

#[test]
fn statistics_examples() {
    let s = data_statistics(&dataset_from(vec![1.0, 3.0], 1)).unwrap();
    assert_eq!((s.count, s.mean[0], s.median[0]), (2, 2.0, 2.0));
    let s = data_statistics(&dataset_from(vec![4.0, -1.0], 2)).unwrap();
    assert_eq!(s.mean, [4.0, -1.0]);
    assert_eq!(s.median, [4.0, -1.0]);
}

#[test]
fn median_matches_selection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 3;
    let rows: Vec<f64> = (0..1000 * d).map(|_| rng.random_range(-5.0..5.0)).collect();
    let ds = dataset_from(rows.clone(), d);
    for train in [1000, 999] {
        let mut ds = ds.clone();
        ds.splits.train = (0..train).collect();
        let s = data_statistics(&ds).unwrap();
        for j in 0..d {
            let mut col: Vec<f64> = (0..train).map(|i| rows[i * d + j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want = if train % 2 == 1 { col[train / 2] } else { (col[train / 2 - 1] + col[train / 2]) / 2.0 };
            assert_eq!(s.median[j], want);
        }
        assert_eq!(s.count, train);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn splits_partition_every_client(sizes in prop::collection::vec(10usize..120, 2..6), seed in any::<u64>()) {
        let mut sizes = sizes;
        sizes.sort_unstable();
        let data = generate_scenario(&config(ScenarioKind::DistinctTasks, sizes.clone(), 1.0, seed)).unwrap();
        for (ds, &n) in data.iter().zip(&sizes) {
            let mut all: Vec<usize> = ds.splits.train.iter().chain(&ds.splits.valid).chain(&ds.splits.test).copied().collect();
            prop_assert_eq!(all.len(), n);
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
