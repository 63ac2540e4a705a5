//! Run with per-epoch checkpoints, reload the selected model of the last
//! session and confirm it predicts exactly as before.

use cil_qud::harness::{build_stream, SplitConfig};
use cil_qud::inference::predict_batch;
use cil_qud::report::{Metric, ReportHead};
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{EvaluationConfig, RaSchedule};
use cil_qud::*;

fn main() -> Result<()> {
    let syn = SyntheticConfig { classes: 4, train_per_class: 60, ..Default::default() };
    let d = generate(&syn)?;
    let split = SplitConfig { classes_per_task: 2, task_count: 2, class_order_seed: None, validation_fraction: 0.1 };
    let stream = build_stream(&split, &d.dataset, 3)?;
    let cfg = StreamConfig {
        backbone: BackboneConfig { input: syn.shape(), conv_channels: vec![8], feature_dim: 16 },
        session: SessionConfig { steps_per_epoch: Some(15), ..SessionConfig::with_epochs(3, 0.05) },
        mode: TrainingMode::Standard,
        method: MethodConfig::default(),
        memory_per_class: 10,
        query: QueryConfig { budget_per_class: 50, ..Default::default() },
        evaluation: EvaluationConfig { robust_accuracy: RaSchedule::Never, ..Default::default() },
    };
    let dir = std::env::temp_dir().join(format!("cilqud-ckpt-{}", std::process::id()));
    let report = run_stream(&stream, Some(&d.pool), &cfg, 3, Some(&dir))?;
    let mut files: Vec<_> = std::fs::read_dir(&dir)?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    files.sort();
    println!("checkpoints: {files:?}");

    let ck = Checkpoint::load(&dir.join("session2_final.json"))?;
    println!("session {} seed {} lambda {}", ck.session, ck.master_seed, ck.hyperparameters.lambda_lwf);
    let x = data::stack_images(&stream.tasks()[1].test);
    let labels = data::labels_of(&stream.tasks()[1].test);
    let pred = predict_batch(&ck.model, HeadKind::Primary, &x.view())?;
    let acc = pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    let reported = report.sessions[1].get(Metric::Sa, ReportHead::Primary).map_or(f64::NAN, |a| a.per_task[1]);
    println!("reloaded task 2 accuracy {:.3}, reported {:.3}", acc, reported);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
