//! PGD against a linear scorer, then robust accuracy of a trained model.

use cil_qud::inference::{evaluate_ra, evaluate_sa, Predictor};
use cil_qud::regularizers::pgd_attack;
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{seen_validation, train_session, SessionData};
use cil_qud::*;
use ndarray::{array, Array2};

fn main() -> Result<()> {
    // Loss -y * (w . x): the best l-inf step is eps * sign(-y * w).
    let w = array![0.5, -2.0, 0.0, 1.0];
    let y = 1.0;
    let x = Array2::from_elem((1, 4), 0.5);
    let cfg = AttackConfig { epsilon: 0.03, alpha: 0.05, steps: 1, random_start: false };
    let grad = w.mapv(|v| -y * v).insert_axis(ndarray::Axis(0));
    let adv = pgd_attack(&x, &cfg, &mut rand::rng(), |_| Ok(grad.clone()))?;
    println!("delta {:?}", (&adv - &x).row(0).to_vec());

    let syn = SyntheticConfig { classes: 4, ..Default::default() };
    let d = generate(&syn)?;
    let split = harness::SplitConfig { classes_per_task: 4, task_count: 1, class_order_seed: None, validation_fraction: 0.1 };
    let stream = harness::build_stream(&split, &d.dataset, 0)?;
    let seeds = SeedTree::new(0);
    let mut model = ModelState::new(BackboneConfig { input: syn.shape(), conv_channels: vec![8, 16], feature_dim: 32 }, &mut seeds.rng(Purpose::ModelInit, 0, 0))?;
    model.grow_heads(4, &mut seeds.rng(Purpose::HeadGrowth, 1, 0))?;
    let bank = MemoryBank::new(10);
    let val = seen_validation(&stream, 1);
    let task = &stream.tasks()[0];
    let data = SessionData { session: 1, snapshot: None, bank: &bank, queried: None, task, validation: &val };
    let mut session = SessionConfig::with_epochs(4, 0.05);
    session.attack.steps = 5;

    let test = [task.test.as_slice()];
    for mode in [TrainingMode::Standard, TrainingMode::Robust] {
        let m = train_session(model.clone(), data, &session, &MethodConfig::default(), mode, &seeds, None)?.model;
        let sa = evaluate_sa(&m, Predictor::Head(HeadKind::Primary), &test)?;
        let ra = evaluate_ra(&m, Predictor::Head(HeadKind::Primary), &test, &AttackConfig::evaluation(), 0)?;
        println!("{mode:?}: SA {:.1}%  RA {:.1}%", 100.0 * sa.average, 100.0 * ra.average);
    }
    Ok(())
}
