//! Generate the toy dataset, write it as a PNG directory and read it back.

use cil_qud::harness::{build_stream, export_directory, load_directory, SplitConfig};
use cil_qud::synthetic::{generate, SyntheticConfig};

fn main() -> cil_qud::Result<()> {
    let cfg = SyntheticConfig { train_per_class: 50, test_per_class: 20, pool_per_class: 30, pool_per_distractor: 30, ..Default::default() };
    let data = generate(&cfg)?;
    println!(
        "{} train, {} test, {} pool items ({} distractor classes)",
        data.dataset.train.len(),
        data.dataset.test.len(),
        data.pool.len(),
        cfg.distractor_classes
    );

    let dir = std::env::temp_dir().join("cilqud-synthetic");
    let _ = std::fs::remove_dir_all(&dir);
    export_directory(&data.dataset, Some(&data.pool), &dir)?;
    let (dataset, pool) = load_directory(&dir)?;
    let worst = dataset
        .train
        .iter()
        .zip(&data.dataset.train)
        .flat_map(|(a, b)| a.image.pixels().iter().zip(b.image.pixels()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!("round trip through {}: pool {}, worst pixel error {worst:.4} (8-bit PNG)", dir.display(), pool.map_or(0, |p| p.len()));

    let split = SplitConfig { classes_per_task: 2, task_count: 5, class_order_seed: None, validation_fraction: 0.1 };
    let stream = build_stream(&split, &dataset, 7)?;
    for t in stream.tasks() {
        let original: Vec<usize> = t.class_labels.iter().map(|&c| stream.original_label(c)).collect();
        println!("task {}: classes {:?} (dataset labels {:?}), {} train / {} val / {} test", t.task_id, t.class_labels, original, t.train.len(), t.val.len(), t.test.len());
    }
    Ok(())
}
