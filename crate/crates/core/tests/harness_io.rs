use cil_qud::harness::{export_directory, load_config, load_directory, parse_config, DatasetSpec};
use cil_qud::report::{read_records, write_records, Metric, MetricRecord, ReportHead};
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::*;

const MINIMAL: &str = "[dataset]\nkind = \"synthetic\"\n[split]\nclasses_per_task = 2\ntask_count = 5\n";

#[test]
fn minimal_config_takes_defaults() {
    let cfg = parse_config(MINIMAL).unwrap();
    assert_eq!(cfg.memory_per_class, 20);
    assert_eq!(cfg.mode, TrainingMode::Standard);
    assert_eq!(cfg.query.method, QueryMethod::FeatureKnn);
    assert_eq!(cfg.session.batch, BatchSizes { class_balanced: 64, random: 64, unlabeled: 128 });
    assert_eq!(cfg.session.hyperparameters.lambda_lwf, 0.5);
    assert_eq!(cfg.session.attack, AttackConfig::training());
    assert_eq!(cfg.evaluation.cem.k_neighbors, 50);
    assert!(matches!(cfg.dataset, DatasetSpec::Synthetic(ref s) if *s == SyntheticConfig::default()));
}

#[test]
fn unknown_keys_are_rejected() {
    for extra in ["bogus = 1\n", "[query]\nbudget = 3\n", "[session.hyperparameters]\nlamda_lwf = 1.0\n"] {
        let err = parse_config(&format!("{extra}{MINIMAL}")).unwrap_err();
        assert!(matches!(err, Error::Toml(_) | Error::Config(_)), "{extra}: {err}");
    }
}

#[test]
fn duplicate_keys_are_rejected() {
    let text = format!("memory_per_class = 5\nmemory_per_class = 6\n{MINIMAL}");
    assert!(parse_config(&text).is_err());
}

#[test]
fn invalid_values_are_rejected() {
    assert!(parse_config(&MINIMAL.replace("task_count = 5", "task_count = 6")).is_err());
    assert!(parse_config(&format!("{MINIMAL}[session.hyperparameters]\nkd_temperature = 0.0\n")).is_err());
    assert!(parse_config(&format!("{MINIMAL}[session.attack]\nepsilon = -0.1\n")).is_err());
}

#[test]
fn config_file_resolves_relative_dataset_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&SyntheticConfig { classes: 2, height: 6, width: 6, train_per_class: 3, test_per_class: 2, pool_per_class: 2, distractor_classes: 0, ..Default::default() }).unwrap();
    export_directory(&d.dataset, Some(&d.pool), &dir.path().join("data")).unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "[dataset]\nkind = \"directory\"\npath = \"data\"\n[split]\nclasses_per_task = 1\ntask_count = 2\n").unwrap();
    let cfg = load_config(&path).unwrap();
    assert!(matches!(cfg.dataset, DatasetSpec::Directory { ref path } if path == &dir.path().join("data")));
}

#[test]
fn directory_round_trip_is_exact_at_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&SyntheticConfig { classes: 3, height: 6, width: 5, train_per_class: 4, test_per_class: 2, pool_per_class: 3, distractor_classes: 1, pool_per_distractor: 2, ..Default::default() }).unwrap();
    export_directory(&d.dataset, Some(&d.pool), dir.path()).unwrap();
    let (back, pool) = load_directory(dir.path()).unwrap();
    let pool = pool.unwrap();
    assert_eq!(back.shape, d.dataset.shape);
    assert_eq!(back.class_count, 3);
    assert_eq!(back.train.len(), d.dataset.train.len());
    assert_eq!(pool.len(), d.pool.len());
    for (a, b) in back.train.iter().zip(&d.dataset.train) {
        assert_eq!(a.label, b.label);
        for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            assert_eq!((x * 255.0).round(), x * 255.0);
        }
    }
    export_directory(&back, Some(&pool), &dir.path().join("again")).unwrap();
    let (twice, _) = load_directory(&dir.path().join("again")).unwrap();
    assert_eq!(twice.train, back.train);
}

#[test]
fn records_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let records: Vec<MetricRecord> = (1..=3)
        .flat_map(|s| (1..=s).map(move |t| MetricRecord { session: s, task: t, metric: Metric::Sa, head: ReportHead::Cem, value: 1.0 / (s * t) as f64, seed: 4 }))
        .collect();
    write_records(&records, &path).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 6);
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeedTree::new(3).rng(Purpose::ModelInit, 0, 0);
    let mut model = ModelState::new(BackboneConfig { input: ImageShape::new(6, 6, 1), conv_channels: vec![3], feature_dim: 5 }, &mut rng).unwrap();
    model.grow_heads(3, &mut rng).unwrap();
    let ck = Checkpoint::new(model, Hyperparameters::default(), 3, 1, Some(2));
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    std::fs::write(&path, "{").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
