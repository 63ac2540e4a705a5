use cil_qud::harness::{build_stream, SplitConfig};
use cil_qud::inference::{evaluate_ra, evaluate_sa, Predictor};
use cil_qud::query::run_query;
use cil_qud::synthetic::{generate, SyntheticConfig, SyntheticData};
use cil_qud::trainer::{seen_validation, train_session, EvaluationConfig, RaSchedule, SessionData, SessionOutcome};
use cil_qud::*;

fn tiny_data() -> SyntheticData {
    generate(&SyntheticConfig {
        classes: 4,
        height: 8,
        width: 8,
        train_per_class: 16,
        test_per_class: 6,
        pool_per_class: 8,
        distractor_classes: 1,
        pool_per_distractor: 8,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_session() -> SessionConfig {
    let mut s = SessionConfig::with_epochs(2, 0.05);
    s.batch = BatchSizes { class_balanced: 4, random: 4, unlabeled: 8 };
    s.attack.steps = 2;
    s.steps_per_epoch = Some(3);
    s
}

fn backbone() -> BackboneConfig {
    BackboneConfig { input: ImageShape::new(8, 8, 1), conv_channels: vec![2], feature_dim: 6 }
}

struct Second {
    before: ModelState,
    snapshot: Snapshot,
    outcome: SessionOutcome,
}

fn second_session(mode: TrainingMode, session: &SessionConfig) -> Second {
    let d = tiny_data();
    let split = SplitConfig { classes_per_task: 2, task_count: 2, class_order_seed: None, validation_fraction: 0.2 };
    let stream = build_stream(&split, &d.dataset, 5).unwrap();
    let seeds = SeedTree::new(5);
    let method = MethodConfig::default();
    let mut model = ModelState::new(backbone(), &mut seeds.rng(Purpose::ModelInit, 0, 0)).unwrap();
    let mut bank = MemoryBank::new(4);
    let t1 = &stream.tasks()[0];
    model.grow_heads(2, &mut seeds.rng(Purpose::HeadGrowth, 1, 0)).unwrap();
    let val = seen_validation(&stream, 1);
    let data = SessionData { session: 1, snapshot: None, bank: &bank, queried: None, task: t1, validation: &val };
    model = train_session(model, data, session, &method, TrainingMode::Standard, &seeds, None).unwrap().model;
    bank.update(t1, 1).unwrap();
    let snapshot = model.take_snapshot();
    let queried = run_query(&QueryConfig { budget_per_class: 4, ..Default::default() }, &model, &bank, &d.pool, 0).unwrap();
    assert!(queried.is_some());

    let t2 = &stream.tasks()[1];
    model.grow_heads(2, &mut seeds.rng(Purpose::HeadGrowth, 2, 0)).unwrap();
    let before = model.clone();
    let val = seen_validation(&stream, 2);
    let data = SessionData { session: 2, snapshot: Some(&snapshot), bank: &bank, queried: queried.as_ref(), task: t2, validation: &val };
    let outcome = train_session(model, data, session, &method, mode, &seeds, None).unwrap();
    Second { before, snapshot, outcome }
}

#[test]
fn logged_total_is_the_sum_of_its_parts() {
    let mut session = tiny_session();
    session.hyperparameters.use_rtc = true;
    for mode in [TrainingMode::Standard, TrainingMode::Robust] {
        let out = second_session(mode, &session).outcome;
        assert_eq!(out.steps.len(), 2 * 3);
        for s in &out.steps {
            let l = s.loss;
            assert!((l.total - l.component_sum()).abs() < 1e-6, "{mode:?} {l:?}");
            assert!(l.supervised_primary > 0.0 && l.supervised_auxiliary > 0.0);
            assert!(l.lwf_primary > 0.0 && l.lwf_auxiliary > 0.0, "{mode:?} {l:?}");
            if mode == TrainingMode::Standard {
                assert_eq!(l.rtc, 0.0);
            }
        }
    }
}

#[test]
fn snapshot_survives_training_unchanged() {
    let second = second_session(TrainingMode::Standard, &tiny_session());
    let frozen = second.snapshot.model();
    assert_eq!(frozen.seen_class_count(), 2);
    assert_eq!(frozen.extractor(), second.before.extractor());
    assert_ne!(frozen.extractor(), second.outcome.model.extractor());
    let old = second.outcome.model.head(HeadKind::Primary).weight().slice(ndarray::s![..2, ..]).to_owned();
    assert_ne!(&old, frozen.head(HeadKind::Primary).weight());
}

#[test]
fn learning_rate_follows_the_schedule() {
    let mut session = tiny_session();
    session.lr_schedule = vec![(0, 0.1), (1, 0.01)];
    let out = second_session(TrainingMode::Standard, &session).outcome;
    for s in &out.steps {
        assert_eq!(s.learning_rate, if s.epoch == 0 { 0.1 } else { 0.01 });
    }
}

#[test]
fn zero_budget_attack_gives_clean_accuracy() {
    let d = tiny_data();
    let mut rng = SeedTree::new(1).rng(Purpose::ModelInit, 0, 0);
    let mut model = ModelState::new(backbone(), &mut rng).unwrap();
    model.grow_heads(4, &mut rng).unwrap();
    let sets: Vec<&[LabeledExample]> = vec![&d.dataset.test[..12], &d.dataset.test[12..]];
    let zero = AttackConfig { epsilon: 0.0, alpha: 2.0 / 255.0, steps: 10, random_start: true };
    for head in [HeadKind::Primary, HeadKind::Auxiliary] {
        let sa = evaluate_sa(&model, Predictor::Head(head), &sets).unwrap();
        let ra = evaluate_ra(&model, Predictor::Head(head), &sets, &zero, 3).unwrap();
        assert_eq!(sa, ra);
        let attacked = evaluate_ra(&model, Predictor::Head(head), &sets, &AttackConfig::evaluation(), 3).unwrap();
        assert!(attacked.average <= sa.average);
    }
}

fn stream_cfg(mode: TrainingMode) -> StreamConfig {
    StreamConfig {
        backbone: backbone(),
        session: tiny_session(),
        mode,
        method: MethodConfig::default(),
        memory_per_class: 4,
        query: QueryConfig { budget_per_class: 4, ..Default::default() },
        evaluation: EvaluationConfig { robust_accuracy: RaSchedule::FinalSession, attack: AttackConfig { steps: 2, ..AttackConfig::evaluation() }, ..Default::default() },
    }
}

#[test]
fn same_seed_same_records() {
    let d = tiny_data();
    let split = SplitConfig { classes_per_task: 2, task_count: 2, class_order_seed: None, validation_fraction: 0.2 };
    let stream = build_stream(&split, &d.dataset, 9).unwrap();
    let cfg = stream_cfg(TrainingMode::Robust);
    let a = run_stream(&stream, Some(&d.pool), &cfg, 9, None).unwrap();
    let b = run_stream(&stream, Some(&d.pool), &cfg, 9, None).unwrap();
    assert!(a.complete);
    assert_eq!(a.records(), b.records());
    let c = run_stream(&stream, Some(&d.pool), &cfg, 10, None).unwrap();
    assert_ne!(a.records(), c.records());
}

#[test]
fn records_cover_every_seen_task() {
    let d = tiny_data();
    let split = SplitConfig { classes_per_task: 2, task_count: 2, class_order_seed: None, validation_fraction: 0.2 };
    let stream = build_stream(&split, &d.dataset, 2).unwrap();
    let r = run_stream(&stream, Some(&d.pool), &stream_cfg(TrainingMode::Standard), 2, None).unwrap();
    assert_eq!(r.sessions.len(), 2);
    assert_eq!(r.sessions[0].queried_size, 8);
    assert_eq!(r.sessions[1].bank_size, 16);
    let records = r.records();
    for rec in &records {
        assert!(rec.task <= rec.session);
        assert!((0.0..=1.0).contains(&rec.value));
    }
    assert!(records.iter().any(|r| r.session == 2 && r.task == 1));
}
