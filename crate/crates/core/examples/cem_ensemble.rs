//! Route test images to a task by nearest-neighbour vote over stored and
//! queried items, then classify inside that task's block.

use cil_qud::harness::{build_stream, SplitConfig};
use cil_qud::inference::{cem_predict_batch, evaluate_sa, CemReference, Predictor};
use cil_qud::query::run_query;
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{seen_validation, train_session_standard, SessionData};
use cil_qud::*;
use ndarray::{array, Array2};

fn main() -> Result<()> {
    // Hand-built reference: three points of task 0 near the origin, two of
    // task 1 further out.
    let emb = array![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [1.0, 1.0], [1.1, 1.0]];
    let reference = CemReference::from_embeddings(emb, vec![0, 0, 0, 1, 1], vec![0..2, 2..4])?;
    println!("vote at (0.9, 0.9), k=3: task {}", reference.vote(array![0.9, 0.9].view(), 3));
    println!("vote at (0.9, 0.9), k=5: task {}", reference.vote(array![0.9, 0.9].view(), 5));

    let syn = SyntheticConfig { classes: 6, ..Default::default() };
    let d = generate(&syn)?;
    let split = SplitConfig { classes_per_task: 2, task_count: 3, class_order_seed: None, validation_fraction: 0.1 };
    let stream = build_stream(&split, &d.dataset, 0)?;
    let seeds = SeedTree::new(0);
    let mut session = SessionConfig::with_epochs(8, 0.02);
    session.steps_per_epoch = Some(15);
    let method = MethodConfig::default();
    let qcfg = QueryConfig { budget_per_class: 100, ..Default::default() };

    let mut model = ModelState::new(BackboneConfig { input: syn.shape(), conv_channels: vec![8, 16], feature_dim: 32 }, &mut seeds.rng(Purpose::ModelInit, 0, 0))?;
    let mut bank = MemoryBank::new(10);
    let mut queried = None;
    let mut snapshot = None;
    for (i, task) in stream.tasks().iter().enumerate() {
        let s = i + 1;
        model.grow_heads(task.class_labels.len(), &mut seeds.rng(Purpose::HeadGrowth, s, 0))?;
        let val = seen_validation(&stream, s);
        let data = SessionData { session: s, snapshot: snapshot.as_ref(), bank: &bank, queried: queried.as_ref(), task, validation: &val };
        model = train_session_standard(model, data, &session, &method, &seeds)?.model;
        bank.update(task, seeds.seed(Purpose::MemoryBank, s, 0))?;
        snapshot = Some(model.take_snapshot());
        queried = run_query(&qcfg, &model, &bank, &d.pool, seeds.seed(Purpose::Query, s, 0))?;
    }

    let reference = CemReference::build(&model, &bank, queried.as_ref(), &stream, stream.len())?;
    let cem = CemConfig::default();
    let tests: Vec<&[LabeledExample]> = stream.tasks().iter().map(|t| t.test.as_slice()).collect();
    for predictor in [Predictor::Head(HeadKind::Primary), Predictor::Head(HeadKind::Auxiliary), Predictor::Cem { reference: &reference, cfg: cem.clone() }] {
        let name = predictor.name();
        let acc = evaluate_sa(&model, predictor, &tests)?;
        println!("{name:>9}: {:?} avg {:.1}%", acc.per_task.iter().map(|v| (v * 100.0).round()).collect::<Vec<_>>(), 100.0 * acc.average);
    }
    let x: Array2<f64> = data::stack_images(&stream.tasks()[0].test[..8]);
    println!("first task, 8 images: {:?}", cem_predict_batch(&model, &x.view(), &reference, &cem)?);
    Ok(())
}
