//! Parse a TOML experiment, run it and write records, summary and plots.

use cil_qud::harness::{parse_config, run_experiment};

const CONFIG: &str = r#"
memory_per_class = 10

[dataset]
kind = "synthetic"
classes = 4
train_per_class = 80

[split]
classes_per_task = 2
task_count = 2

[query]
budget_per_class = 60

[session]
epochs = 3
steps_per_epoch = 15
lr_schedule = [[0, 0.05], [2, 0.005]]

[evaluation]
robust_accuracy = "final_session"
"#;

fn main() -> cil_qud::Result<()> {
    let mut cfg = parse_config(CONFIG)?;
    cfg.output_dir = std::env::temp_dir().join("cilqud-experiment");
    println!("lambda {} K {} eps {:.4}", cfg.session.hyperparameters.lambda_lwf, cfg.evaluation.cem.k_neighbors, cfg.session.attack.epsilon);
    let report = run_experiment(&cfg, 11)?;
    println!("{} sessions in {:.1}s", report.sessions.len(), report.wall_clock_secs);
    for entry in std::fs::read_dir(&cfg.output_dir)? {
        println!("  {}", entry?.path().display());
    }
    print!("{}", std::fs::read_to_string(cfg.output_dir.join("summary.txt"))?);
    Ok(())
}
