//! Adversarial incremental training with robust distillation on queried
//! data and the consistency term.

use cil_qud::harness::{build_stream, SplitConfig};
use cil_qud::report::render_summary;
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{EvaluationConfig, RaSchedule};
use cil_qud::*;

fn main() -> Result<()> {
    let syn = SyntheticConfig { classes: 6, ..Default::default() };
    let d = generate(&syn)?;
    let split = SplitConfig { classes_per_task: 2, task_count: 3, class_order_seed: None, validation_fraction: 0.1 };
    let stream = build_stream(&split, &d.dataset, 0)?;

    let mut session = SessionConfig::with_epochs(5, 0.02);
    session.steps_per_epoch = Some(12);
    session.hyperparameters.robust_lwf_kind = RobustLwfKind::Rkd;
    session.hyperparameters.use_rtc = true;
    session.attack.steps = 5;
    let cfg = StreamConfig {
        backbone: BackboneConfig { input: syn.shape(), conv_channels: vec![8, 16], feature_dim: 32 },
        session,
        mode: TrainingMode::Robust,
        method: MethodConfig::default(),
        memory_per_class: 10,
        query: QueryConfig { budget_per_class: 100, ..Default::default() },
        evaluation: EvaluationConfig { robust_accuracy: RaSchedule::EverySession, ..Default::default() },
    };
    let report = run_stream(&stream, Some(&d.pool), &cfg, 0, None)?;
    print!("{}", render_summary(&report.records()));
    println!("{:.1}s", report.wall_clock_secs);
    Ok(())
}
