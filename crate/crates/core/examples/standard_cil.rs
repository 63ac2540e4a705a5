//! Five incremental sessions of standard training: the vanilla baseline
//! against KD on queried unlabeled data with the auxiliary head.

use cil_qud::harness::{build_stream, SplitConfig};
use cil_qud::report::render_summary;
use cil_qud::synthetic::{generate, SyntheticConfig};
use cil_qud::trainer::{EvaluationConfig, RaSchedule};
use cil_qud::*;

fn main() -> Result<()> {
    let syn = SyntheticConfig::default();
    let d = generate(&syn)?;
    let split = SplitConfig { classes_per_task: 2, task_count: 5, class_order_seed: None, validation_fraction: 0.1 };
    let seed = 1;
    let stream = build_stream(&split, &d.dataset, seed)?;

    let full = StreamConfig {
        backbone: BackboneConfig { input: syn.shape(), conv_channels: vec![8, 16], feature_dim: 32 },
        session: SessionConfig { steps_per_epoch: Some(12), ..SessionConfig::with_epochs(8, 0.02) },
        mode: TrainingMode::Standard,
        method: MethodConfig::default(),
        memory_per_class: 10,
        query: QueryConfig { budget_per_class: 100, ..Default::default() },
        evaluation: EvaluationConfig { robust_accuracy: RaSchedule::Never, ..Default::default() },
    };
    let vanilla = StreamConfig {
        method: MethodConfig::vanilla(),
        query: QueryConfig { method: QueryMethod::None, ..full.query },
        ..full.clone()
    };

    for (name, cfg) in [("vanilla", &vanilla), ("queried KD + auxiliary head", &full)] {
        let report = run_stream(&stream, Some(&d.pool), cfg, seed, None)?;
        println!("== {name} ({:.1}s)", report.wall_clock_secs);
        for s in &report.sessions {
            println!("session {} picked epoch {}, bank {}, queried {}", s.session, s.selected_epoch, s.bank_size, s.queried_size);
        }
        print!("{}", render_summary(&report.records()));
    }
    Ok(())
}
