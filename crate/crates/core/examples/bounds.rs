//! The four non-incremental reference models on a small stream.

use cil_qud::harness::{build_stream, run_baseline_bounds, BoundKind, SplitConfig};
use cil_qud::report::{Metric, ReportHead};
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{EvaluationConfig, RaSchedule};
use cil_qud::*;

fn main() -> Result<()> {
    let syn = SyntheticConfig { classes: 6, train_per_class: 100, ..Default::default() };
    let d = generate(&syn)?;
    let split = SplitConfig { classes_per_task: 2, task_count: 3, class_order_seed: None, validation_fraction: 0.1 };
    let stream = build_stream(&split, &d.dataset, 0)?;
    let mut session = SessionConfig::with_epochs(8, 0.02);
    session.steps_per_epoch = Some(40);
    session.attack.steps = 5;
    let cfg = StreamConfig {
        backbone: BackboneConfig { input: syn.shape(), conv_channels: vec![8, 16], feature_dim: 32 },
        session,
        mode: TrainingMode::Standard,
        method: MethodConfig::default(),
        memory_per_class: 10,
        query: QueryConfig { budget_per_class: 100, ..Default::default() },
        evaluation: EvaluationConfig { robust_accuracy: RaSchedule::FinalSession, cem_enabled: false, ..Default::default() },
    };
    for kind in BoundKind::ALL {
        let r = run_baseline_bounds(&stream, Some(&d.pool), &cfg, kind, 0)?;
        let sa = r.final_accuracy(Metric::Sa, ReportHead::Primary).map_or(f64::NAN, |a| a.average);
        let ra = r.final_accuracy(Metric::Ra, ReportHead::Primary).map_or(f64::NAN, |a| a.average);
        println!("{:<10} trained on {:>4} images, {:>4} queried: SA {:5.1}%  RA {:5.1}%", kind.as_str(), r.sessions[0].bank_size, r.sessions[0].queried_size, 100.0 * sa, 100.0 * ra);
    }
    Ok(())
}
