//! Train on the first task, then query the unlabeled pool with each method
//! and measure how many picks really belong to the anchor's class.

use std::collections::HashMap;

use cil_qud::harness::{build_stream, SplitConfig};
use cil_qud::query::{run_query, PoolBucket};
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{seen_validation, train_session_standard, SessionData};
use cil_qud::*;

fn main() -> Result<()> {
    let syn = SyntheticConfig::default();
    let d = generate(&syn)?;
    let hidden: HashMap<&str, usize> = d.pool.items().iter().zip(&d.pool_classes).map(|(i, &c)| (i.source_id.as_str(), c)).collect();
    let split = SplitConfig { classes_per_task: 2, task_count: 5, class_order_seed: None, validation_fraction: 0.1 };
    let stream = build_stream(&split, &d.dataset, 0)?;
    let seeds = SeedTree::new(0);

    let mut model = ModelState::new(BackboneConfig { input: syn.shape(), conv_channels: vec![8, 16], feature_dim: 32 }, &mut seeds.rng(Purpose::ModelInit, 0, 0))?;
    model.grow_heads(2, &mut seeds.rng(Purpose::HeadGrowth, 1, 0))?;
    let task = &stream.tasks()[0];
    let mut bank = MemoryBank::new(10);
    let val = seen_validation(&stream, 1);
    let data = SessionData { session: 1, snapshot: None, bank: &bank, queried: None, task, validation: &val };
    let model = train_session_standard(model, data, &SessionConfig { steps_per_epoch: Some(15), ..SessionConfig::with_epochs(8, 0.05) }, &MethodConfig::default(), &seeds)?.model;
    bank.update(task, 1)?;

    for method in [QueryMethod::FeatureKnn, QueryMethod::LargestLogit, QueryMethod::Random] {
        let q = run_query(&QueryConfig { method, budget_per_class: 100, ..Default::default() }, &model, &bank, &d.pool, 3)?.expect("bank is not empty");
        let mut line = format!("{method:?}: {} items", q.len());
        for (bucket, items) in q.buckets() {
            let hits = match bucket {
                PoolBucket::Class(c) => items.iter().filter(|i| hidden[i.source_id.as_str()] == stream.original_label(*c)).count(),
                PoolBucket::Unassigned => items.iter().filter(|i| task.class_labels.iter().any(|&c| hidden[i.source_id.as_str()] == stream.original_label(c))).count(),
            };
            line += &format!(", {bucket:?} precision {:.0}%", 100.0 * hits as f64 / items.len().max(1) as f64);
        }
        println!("{line}");
    }
    Ok(())
}
