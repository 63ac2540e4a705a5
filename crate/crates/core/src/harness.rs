//! Experiment configuration, dataset ingestion, stream construction and the
//! non-incremental reference baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{LwfData, MethodConfig, SessionConfig, TrainingMode};
use crate::data::{ClassId, Image, LabeledDataset, LabeledExample, Task, TaskStream, UnlabeledItem, UnlabeledPool};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::nn::{BackboneConfig, ImageShape};
use crate::query::{run_query, QueryConfig, QueryMethod};
use crate::report::{emit_report, preflight_output_dir, StreamReport};
use crate::sampling::MemoryBank;
use crate::seeds::{Purpose, SeedTree};
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{evaluate_session, run_stream, train_session, EvaluationConfig, RaSchedule, SessionData, StreamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated in memory from a seed.
    Synthetic(SyntheticConfig),
    /// A directory with `train.csv`, `test.csv` and optionally `pool.csv`.
    Directory { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub classes_per_task: usize,
    pub task_count: usize,
    /// Defaults to the master seed.
    #[serde(default)]
    pub class_order_seed: Option<u64>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { conv_channels: vec![8, 16], feature_dim: 32 }
    }
}

/// Top-level run description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_mode")]
    pub mode: TrainingMode,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default = "default_memory")]
    pub memory_per_class: usize,
    #[serde(default)]
    pub query: QueryConfig,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write a checkpoint after every epoch and the selected one per session.
    #[serde(default)]
    pub checkpoints: bool,
}

fn default_mode() -> TrainingMode {
    TrainingMode::Standard
}

fn default_memory() -> usize {
    20
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split.classes_per_task == 0 || self.split.task_count == 0 {
            return Err(Error::config("split needs classes_per_task >= 1 and task_count >= 1"));
        }
        if !(0.0..1.0).contains(&self.split.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                s.validate()?;
                check_split(&self.split, s.classes)?;
                self.stream_config(s.shape()).validate()
            }
            DatasetSpec::Directory { path } => {
                if !path.is_dir() {
                    return Err(Error::config(format!("dataset directory {} does not exist", path.display())));
                }
                self.stream_config(ImageShape::new(1, 1, 1)).validate_training()
            }
        }
    }

    /// Training settings for images of `shape`.
    pub fn stream_config(&self, shape: ImageShape) -> StreamConfig {
        StreamConfig {
            backbone: BackboneConfig { input: shape, conv_channels: self.model.conv_channels.clone(), feature_dim: self.model.feature_dim },
            session: self.session.clone(),
            mode: self.mode,
            method: self.method,
            memory_per_class: self.memory_per_class,
            query: self.query,
            evaluation: self.evaluation.clone(),
        }
    }
}

fn check_split(split: &SplitConfig, classes: usize) -> Result<()> {
    let needed = split.classes_per_task * split.task_count;
    if needed > classes {
        return Err(Error::config(format!(
            "{} tasks of {} classes need {needed} classes, the dataset has {classes}",
            split.task_count, split.classes_per_task
        )));
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a TOML config; relative dataset paths resolve
/// against the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg: ExperimentConfig = toml::from_str(&text)?;
    if let DatasetSpec::Directory { path: p } = &mut cfg.dataset {
        if p.is_relative() {
            if let Some(base) = path.parent() {
                *p = base.join(&*p);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), message: message.into() }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    source_id: String,
    path: String,
    label: Option<usize>,
}

fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (shape, pixels): (ImageShape, Vec<f64>) = match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            (ImageShape::new(g.height() as usize, g.width() as usize, 1), g.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
        }
        _ => {
            let rgb = img.to_rgb8();
            (
                ImageShape::new(rgb.height() as usize, rgb.width() as usize, 3),
                rgb.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect(),
            )
        }
    };
    Image::new(shape, pixels)
}

fn read_manifest(dir: &Path, name: &str) -> Result<Vec<(String, Image, Option<usize>)>> {
    let path = dir.join(name);
    let mut reader = csv::Reader::from_path(&path)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        if !seen.insert(row.source_id.clone()) {
            return Err(dataset_err(&path, format!("duplicate source_id `{}`", row.source_id)));
        }
        let image = read_image(&dir.join(&row.path)).map_err(|e| dataset_err(&dir.join(&row.path), e.to_string()))?;
        out.push((row.source_id, image, row.label));
    }
    Ok(out)
}

fn labeled(path: &Path, rows: Vec<(String, Image, Option<usize>)>) -> Result<Vec<LabeledExample>> {
    rows.into_iter()
        .map(|(source_id, image, label)| {
            let label = label.ok_or_else(|| dataset_err(path, format!("`{source_id}` has no label")))?;
            Ok(LabeledExample { image, label, source_id })
        })
        .collect()
}

/// Loads a dataset directory. Manifests are CSV with columns
/// `source_id,path,label`; paths are relative to the directory and the pool
/// manifest leaves `label` empty.
pub fn load_directory(dir: &Path) -> Result<(LabeledDataset, Option<UnlabeledPool>)> {
    let train = labeled(&dir.join("train.csv"), read_manifest(dir, "train.csv")?)?;
    let test = labeled(&dir.join("test.csv"), read_manifest(dir, "test.csv")?)?;
    let shape = train.first().map(|e| e.image.shape()).ok_or_else(|| dataset_err(dir, "train manifest is empty"))?;
    let class_count = train.iter().chain(&test).map(|e| e.label + 1).max().unwrap_or(0);
    let dataset = LabeledDataset { shape, class_count, train, test };
    dataset.validate().map_err(|e| dataset_err(dir, e.to_string()))?;
    let pool = if dir.join("pool.csv").exists() {
        let items = read_manifest(dir, "pool.csv")?
            .into_iter()
            .map(|(source_id, image, _)| {
                if image.shape() != shape {
                    return Err(dataset_err(dir, format!("pool item `{source_id}` has a different image shape")));
                }
                Ok(UnlabeledItem { image, source_id })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(UnlabeledPool::new(items)?)
    } else {
        None
    };
    Ok((dataset, pool))
}

fn save_png(image: &Image, path: &Path) -> Result<()> {
    let s = image.shape();
    let bytes: Vec<u8> = image.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    let color = match s.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::usage(format!("cannot write a {c}-channel PNG"))),
    };
    image::save_buffer(path, &bytes, s.width as u32, s.height as u32, color)?;
    Ok(())
}

/// Writes a dataset (and pool) in the layout [`load_directory`] reads.
/// Pixels are quantized to 8 bits.
pub fn export_directory(dataset: &LabeledDataset, pool: Option<&UnlabeledPool>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let write = |name: &str, rows: Vec<(&str, &Image, Option<usize>)>| -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
        for (i, (id, image, label)) in rows.into_iter().enumerate() {
            let rel = format!("images/{name}-{i:06}.png");
            save_png(image, &dir.join(&rel))?;
            w.serialize(ManifestRow { source_id: id.to_string(), path: rel, label })?;
        }
        w.flush()?;
        Ok(())
    };
    write("train", dataset.train.iter().map(|e| (e.source_id.as_str(), &e.image, Some(e.label))).collect())?;
    write("test", dataset.test.iter().map(|e| (e.source_id.as_str(), &e.image, Some(e.label))).collect())?;
    if let Some(p) = pool {
        write("pool", p.items().iter().map(|i| (i.source_id.as_str(), &i.image, None)).collect())?;
    }
    Ok(())
}

/// Permutes the classes with the class-order seed, cuts them into equal
/// tasks, relabels them `0..` in arrival order and splits each class's
/// training data into train and validation parts.
pub fn build_stream(split: &SplitConfig, dataset: &LabeledDataset, master_seed: u64) -> Result<TaskStream> {
    check_split(split, dataset.class_count)?;
    let seeds = SeedTree::new(master_seed);
    let order_seed = split.class_order_seed.unwrap_or(master_seed);
    let mut order: Vec<usize> = (0..dataset.class_count).collect();
    order.shuffle(&mut SeedTree::new(order_seed).rng(Purpose::ClassOrder, 0, 0));
    let used = split.classes_per_task * split.task_count;
    let global: BTreeMap<usize, ClassId> = order[..used].iter().enumerate().map(|(g, &orig)| (orig, g)).collect();

    let mut train_by: BTreeMap<ClassId, Vec<LabeledExample>> = (0..used).map(|g| (g, Vec::new())).collect();
    let mut test_by: BTreeMap<ClassId, Vec<LabeledExample>> = (0..used).map(|g| (g, Vec::new())).collect();
    for (src, dst) in [(&dataset.train, &mut train_by), (&dataset.test, &mut test_by)] {
        for e in src {
            if let Some(&g) = global.get(&e.label) {
                dst.get_mut(&g).expect("class present").push(LabeledExample { label: g, ..e.clone() });
            }
        }
    }
    if let Some((g, _)) = train_by.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::usage(format!("class {} has no training examples", order[*g])));
    }

    let mut tasks = Vec::with_capacity(split.task_count);
    for t in 0..split.task_count {
        let classes: Vec<ClassId> = (t * split.classes_per_task..(t + 1) * split.classes_per_task).collect();
        let mut task = Task { task_id: t + 1, class_labels: classes.iter().copied().collect(), train: vec![], val: vec![], test: vec![] };
        for &c in &classes {
            let mut examples = std::mem::take(train_by.get_mut(&c).expect("class present"));
            examples.shuffle(&mut seeds.rng(Purpose::ValidationSplit, 0, c as u64));
            let n_val = if examples.len() >= 2 { ((examples.len() as f64 * split.validation_fraction).round() as usize).max(1) } else { 0 };
            let n_val = if split.validation_fraction == 0.0 { 0 } else { n_val };
            task.val.extend(examples.drain(..n_val));
            task.train.extend(examples);
            task.test.append(test_by.get_mut(&c).expect("class present"));
        }
        tasks.push(task);
    }
    TaskStream::new(tasks, order[..used].to_vec())
}

/// Non-incremental reference trainings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// Standard training on the stored exemplars of every class.
    MtLower,
    /// Standard training on all training data.
    MtUpper,
    /// Adversarial training on the stored exemplars of every class.
    MtatLower,
    /// Adversarial training on all data plus the consistency term on
    /// queried unlabeled data.
    MtatUpper,
}

impl BoundKind {
    pub const ALL: [BoundKind; 4] = [BoundKind::MtLower, BoundKind::MtUpper, BoundKind::MtatLower, BoundKind::MtatUpper];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::MtLower => "mt_lower",
            BoundKind::MtUpper => "mt_upper",
            BoundKind::MtatLower => "mtat_lower",
            BoundKind::MtatUpper => "mtat_upper",
        }
    }

    fn robust(self) -> bool {
        matches!(self, BoundKind::MtatLower | BoundKind::MtatUpper)
    }

    fn full_data(self) -> bool {
        matches!(self, BoundKind::MtUpper | BoundKind::MtatUpper)
    }
}

impl FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoundKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown bound `{s}` (expected mt_lower, mt_upper, mtat_lower or mtat_upper)")))
    }
}

/// Trains one model on all classes at once and scores its primary head on
/// every task's test set. The upper adversarial bound first trains for one
/// epoch, queries the pool with that model against stored anchors of all
/// classes, then trains from scratch with the consistency term on the
/// queried items.
pub fn run_baseline_bounds(
    stream: &TaskStream,
    pool: Option<&UnlabeledPool>,
    cfg: &StreamConfig,
    kind: BoundKind,
    master_seed: u64,
) -> Result<StreamReport> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::usage("task stream is empty"));
    }
    let started = std::time::Instant::now();
    let seeds = SeedTree::new(master_seed);
    let mut bank = MemoryBank::new(cfg.memory_per_class);
    for t in stream.tasks() {
        bank.update(t, seeds.seed(Purpose::MemoryBank, t.task_id, 0))?;
    }
    let all = Task {
        task_id: 1,
        class_labels: (0..stream.class_count()).collect(),
        train: if kind.full_data() { stream.tasks().iter().flat_map(|t| t.train.iter().cloned()).collect() } else { bank.examples().cloned().collect() },
        val: stream.tasks().iter().flat_map(|t| t.val.iter().cloned()).collect(),
        test: vec![],
    };
    let empty_bank = MemoryBank::new(cfg.memory_per_class);
    let mode = if kind.robust() { TrainingMode::Robust } else { TrainingMode::Standard };
    let method = MethodConfig { auxiliary_head: false, lwf_data: LwfData::Queried };
    let mut session = cfg.session.clone();
    session.hyperparameters.use_rtc = kind == BoundKind::MtatUpper;

    let fresh = || -> Result<ModelState> {
        let mut m = ModelState::new(cfg.backbone.clone(), &mut seeds.rng(Purpose::ModelInit, 0, 0))?;
        m.grow_heads(stream.class_count(), &mut seeds.rng(Purpose::HeadGrowth, 1, 0))?;
        Ok(m)
    };
    let data = SessionData { session: 1, snapshot: None, bank: &empty_bank, queried: None, task: &all, validation: &all.val };

    let queried = match (kind, pool) {
        (BoundKind::MtatUpper, Some(p)) if !p.is_empty() && session.hyperparameters.gamma2 > 0.0 => {
            let mut warm_cfg = session.clone();
            warm_cfg.epochs = 1;
            warm_cfg.lr_schedule = vec![(0, session.learning_rate(0))];
            warm_cfg.hyperparameters.use_rtc = false;
            let warm = train_session(fresh()?, data, &warm_cfg, &method, mode, &seeds, None)?.model;
            let qcfg = QueryConfig { method: if cfg.query.method == QueryMethod::None { QueryMethod::FeatureKnn } else { cfg.query.method }, ..cfg.query };
            run_query(&qcfg, &warm, &bank, p, seeds.seed(Purpose::Query, 1, 0))?
        }
        _ => None,
    };
    let data = SessionData { queried: queried.as_ref(), ..data };
    if kind == BoundKind::MtatUpper && queried.is_none() {
        session.hyperparameters.use_rtc = false;
    }
    let outcome = train_session(fresh()?, data, &session, &method, mode, &seeds, None)?;
    let with_ra = cfg.evaluation.robust_accuracy != RaSchedule::Never;
    let (sa, ra) = evaluate_session(&outcome.model, stream, stream.len(), &bank, None, false, &cfg.evaluation, with_ra, master_seed)?;

    let mut echo = serde_json::to_value(cfg)?;
    echo["bound"] = serde_json::Value::String(kind.as_str().into());
    let mut report = StreamReport::new(echo, master_seed);
    report.sessions.push(crate::report::SessionReport {
        session: 1,
        classes_seen: stream.class_count(),
        selected_epoch: outcome.selected_epoch,
        validation_accuracy: outcome.validation_accuracy,
        bank_size: if kind.full_data() { all.train.len() } else { bank.len() },
        queried_size: queried.as_ref().map_or(0, |q| q.len()),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        sa,
        ra,
    });
    report.complete = true;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Data and settings ready to run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stream: TaskStream,
    pub pool: Option<UnlabeledPool>,
    pub stream_config: StreamConfig,
}

/// Loads or generates the data and builds the task stream.
pub fn prepare(cfg: &ExperimentConfig, master_seed: u64) -> Result<Prepared> {
    let (dataset, pool) = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => {
            let d = generate(s)?;
            (d.dataset, Some(d.pool))
        }
        DatasetSpec::Directory { path } => load_directory(path)?,
    };
    let stream = build_stream(&cfg.split, &dataset, master_seed)?;
    let stream_config = cfg.stream_config(dataset.shape);
    stream_config.validate()?;
    Ok(Prepared { stream, pool, stream_config })
}

fn echo(cfg: &ExperimentConfig, extra: Option<(&str, &str)>) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some((k, val)) = extra {
        v[k] = serde_json::Value::String(val.into());
    }
    Ok(v)
}

/// Runs the incremental stream and writes the report to `output_dir`. A
/// partial report is written when a session fails.
pub fn run_experiment(cfg: &ExperimentConfig, master_seed: u64) -> Result<StreamReport> {
    preflight_output_dir(&cfg.output_dir)?;
    let p = prepare(cfg, master_seed)?;
    let ckpt = cfg.checkpoints.then(|| cfg.output_dir.join("checkpoints"));
    match run_stream(&p.stream, p.pool.as_ref(), &p.stream_config, master_seed, ckpt.as_deref()) {
        Ok(mut report) => {
            report.config = echo(cfg, None)?;
            emit_report(&report, &cfg.output_dir)?;
            Ok(report)
        }
        Err(Error::StreamAborted { mut partial, source }) => {
            partial.config = echo(cfg, None)?;
            emit_report(&partial, &cfg.output_dir)?;
            Err(Error::StreamAborted { partial, source })
        }
        Err(e) => Err(e),
    }
}

/// Runs one baseline and writes its report to `output_dir/<bound>`.
pub fn run_bounds_experiment(cfg: &ExperimentConfig, kind: BoundKind, master_seed: u64) -> Result<StreamReport> {
    let dir = cfg.output_dir.join(kind.as_str());
    preflight_output_dir(&dir)?;
    let p = prepare(cfg, master_seed)?;
    let mut report = run_baseline_bounds(&p.stream, p.pool.as_ref(), &p.stream_config, kind, master_seed)?;
    report.config = echo(cfg, Some(("bound", kind.as_str())))?;
    emit_report(&report, &dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(classes: usize, per_class: usize) -> LabeledDataset {
        let shape = ImageShape::new(2, 2, 1);
        let ex = |c: usize, i: usize, tag: &str| LabeledExample {
            image: Image::new(shape, vec![c as f64 / classes as f64; 4]).unwrap(),
            label: c,
            source_id: format!("{tag}-{c}-{i}"),
        };
        LabeledDataset {
            shape,
            class_count: classes,
            train: (0..classes).flat_map(|c| (0..per_class).map(move |i| ex(c, i, "tr"))).collect(),
            test: (0..classes).flat_map(|c| (0..3).map(move |i| ex(c, i, "te"))).collect(),
        }
    }

    fn split(c: usize, t: usize) -> SplitConfig {
        SplitConfig { classes_per_task: c, task_count: t, class_order_seed: None, validation_fraction: 0.1 }
    }

    #[test]
    fn ten_classes_five_tasks() {
        let s = build_stream(&split(2, 5), &tiny_dataset(10, 20), 4).unwrap();
        assert_eq!(s.len(), 5);
        for (i, t) in s.tasks().iter().enumerate() {
            assert_eq!(t.class_labels, [2 * i, 2 * i + 1].into());
            assert_eq!(t.val.len(), 4);
            assert_eq!(t.train.len(), 36);
        }
        let again = build_stream(&split(2, 5), &tiny_dataset(10, 20), 4).unwrap();
        assert_eq!((0..10).map(|c| s.original_label(c)).collect::<Vec<_>>(), (0..10).map(|c| again.original_label(c)).collect::<Vec<_>>());
    }

    #[test]
    fn hundred_classes_ten_tasks() {
        let s = build_stream(&split(10, 10), &tiny_dataset(100, 2), 0).unwrap();
        assert!(s.tasks().iter().all(|t| t.class_labels.len() == 10));
    }

    #[test]
    fn oversized_split_rejected() {
        assert!(build_stream(&split(3, 5), &tiny_dataset(10, 5), 0).is_err());
    }

    #[test]
    fn empty_class_rejected() {
        let mut d = tiny_dataset(4, 5);
        d.train.retain(|e| e.label != 2);
        assert!(build_stream(&split(2, 2), &d, 0).is_err());
    }

    #[test]
    fn bound_names_parse() {
        for k in BoundKind::ALL {
            assert_eq!(k.as_str().parse::<BoundKind>().unwrap(), k);
        }
        assert!("mt".parse::<BoundKind>().is_err());
    }
}
