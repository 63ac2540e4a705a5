//! One incremental session (standard or adversarial) and the whole stream.

use std::borrow::Cow;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::{AttackConfig, CemConfig, LwfData, LwfKind, MethodConfig, RobustLwfKind, SessionConfig, TrainingMode};
use crate::data::{augment_batch, labels_of, stack_images, ClassId, LabeledExample, Task, TaskStream, UnlabeledPool};
use crate::error::{Error, Result};
use crate::inference::{evaluate_ra, evaluate_sa, CemReference, Predictor, TaskAccuracy};
use crate::model::{Checkpoint, HeadKind, ModelState, Snapshot};
use crate::nn::BackboneConfig;
use crate::optim::MomentumSgd;
use crate::query::{run_query, QueriedPool, QueryConfig, QueryMethod};
use crate::regularizers::{
    adversarial_labeled, cross_entropy, ft_loss, kd_loss, kl_divergence, rft_attack, rkd_attack, rtc_attack, LossGrad,
};
use crate::report::{ReportHead, SessionReport, StreamReport};
use crate::sampling::{build_class_balanced_batch, build_random_batch, build_unlabeled_batch, MemoryBank};
use crate::seeds::{Purpose, SeedTree};

const AUGMENT_PAD: usize = 2;

/// Weighted loss terms of one step. `total` is accumulated alongside the
/// gradients; the audit compares it with the sum of the parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub supervised_primary: f64,
    pub supervised_auxiliary: f64,
    pub lwf_primary: f64,
    pub lwf_auxiliary: f64,
    pub rtc: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn component_sum(&self) -> f64 {
        self.supervised_primary + self.supervised_auxiliary + self.lwf_primary + self.lwf_auxiliary + self.rtc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub loss: LossComponents,
}

/// Everything a session reads besides the model.
#[derive(Clone, Copy, Debug)]
pub struct SessionData<'a> {
    /// 1-based session number, used for seeding.
    pub session: usize,
    pub snapshot: Option<&'a Snapshot>,
    pub bank: &'a MemoryBank,
    pub queried: Option<&'a QueriedPool>,
    pub task: &'a Task,
    pub validation: &'a [LabeledExample],
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub model: ModelState,
    pub selected_epoch: usize,
    pub validation_accuracy: Vec<f64>,
    pub steps: Vec<StepLog>,
}

/// Output of [`select_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSelection {
    pub index: usize,
    pub accuracies: Vec<f64>,
}

/// Picks the checkpoint with the best primary-head validation accuracy;
/// ties go to the later checkpoint.
pub fn select_model(checkpoints: &[ModelState], validation: &[LabeledExample]) -> Result<ModelSelection> {
    if checkpoints.is_empty() {
        return Err(Error::usage("model selection needs at least one checkpoint"));
    }
    if validation.is_empty() {
        return Err(Error::usage("model selection needs a non-empty validation set"));
    }
    let accuracies = checkpoints
        .iter()
        .map(|m| evaluate_sa(m, Predictor::Head(HeadKind::Primary), &[validation]).map(|a| a.average))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSelection { index: select_index(&accuracies), accuracies })
}

fn select_index(accuracies: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a >= accuracies[best] {
            best = i;
        }
    }
    best
}

struct StepBatches {
    cb: (Array2<f64>, Vec<ClassId>),
    rs: Option<(Array2<f64>, Vec<ClassId>)>,
    ud: Option<Array2<f64>>,
}

enum LwfTerm {
    Kd,
    Ft,
    Rkd,
    Rft,
}

fn lwf_term(mode: TrainingMode, cfg: &SessionConfig) -> (f64, LwfTerm) {
    let hp = &cfg.hyperparameters;
    match mode {
        TrainingMode::Standard => (
            hp.lambda_lwf,
            match hp.lwf_kind {
                LwfKind::Kd => LwfTerm::Kd,
                LwfKind::Ft => LwfTerm::Ft,
            },
        ),
        TrainingMode::Robust => (
            hp.gamma1,
            match hp.robust_lwf_kind {
                RobustLwfKind::Rkd => LwfTerm::Rkd,
                RobustLwfKind::Rft => LwfTerm::Rft,
                RobustLwfKind::Kd => LwfTerm::Kd,
                RobustLwfKind::Ft => LwfTerm::Ft,
            },
        ),
    }
}

fn rtc_weight(mode: TrainingMode, cfg: &SessionConfig) -> f64 {
    let hp = &cfg.hyperparameters;
    if mode == TrainingMode::Robust && hp.use_rtc {
        hp.gamma2
    } else {
        0.0
    }
}

/// Adds the gradient of `objective(head logits[:, ..block])` into `grads`
/// and returns its value.
fn accumulate_head<F>(model: &ModelState, grads: &mut ModelState, head: HeadKind, x: &Array2<f64>, block: usize, objective: F) -> Result<f64>
where
    F: FnOnce(&ArrayView2<f64>) -> Result<LossGrad>,
{
    let cache = model.forward_features_cached(&x.view())?;
    let logits = model.forward_head(head, &cache.features().view())?;
    let lg = objective(&logits.slice(s![.., ..block]))?;
    let (g_ext, g_primary, g_auxiliary) = grads.parts_mut();
    let g_head = match head {
        HeadKind::Primary => g_primary,
        HeadKind::Auxiliary => g_auxiliary,
    };
    let d_features = model.head(head).backward(&cache.features().view(), &lg.grad.view(), Some(g_head));
    model.extractor().backward(&cache, &d_features.view(), Some(g_ext), false);
    Ok(lg.value)
}

fn accumulate_features<F>(model: &ModelState, grads: &mut ModelState, x: &Array2<f64>, objective: F) -> Result<f64>
where
    F: FnOnce(&ArrayView2<f64>) -> Result<LossGrad>,
{
    let cache = model.forward_features_cached(&x.view())?;
    let lg = objective(&cache.features().view())?;
    let (g_ext, _, _) = grads.parts_mut();
    model.extractor().backward(&cache, &lg.grad.view(), Some(g_ext), false);
    Ok(lg.value)
}

/// Loss and gradient of one step; gradients are added into `grads`.
#[allow(clippy::too_many_arguments)]
fn step_loss(
    model: &ModelState,
    grads: &mut ModelState,
    snapshot: Option<&Snapshot>,
    batches: &StepBatches,
    mode: TrainingMode,
    cfg: &SessionConfig,
    method: &MethodConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<LossComponents> {
    let hp = &cfg.hyperparameters;
    let attack = &cfg.attack;
    let seen = model.seen_class_count();
    let mut c = LossComponents::default();

    let supervised = [(HeadKind::Primary, Some(&batches.cb)), (HeadKind::Auxiliary, batches.rs.as_ref())];
    for (head, batch) in supervised {
        let Some((x, y)) = batch else { continue };
        let x = match mode {
            TrainingMode::Standard => Cow::Borrowed(x),
            TrainingMode::Robust => Cow::Owned(adversarial_labeled(model, head, x, y, attack, rng)?),
        };
        let v = accumulate_head(model, grads, head, &x, seen, |z| cross_entropy(z, y))?;
        c.total += v;
        match head {
            HeadKind::Primary => c.supervised_primary = v,
            HeadKind::Auxiliary => c.supervised_auxiliary = v,
        }
    }

    let (weight, term) = lwf_term(mode, cfg);
    if let (Some(snap), Some(ud), true) = (snapshot, batches.ud.as_ref(), weight > 0.0) {
        let k = snap.seen_class_count();
        let t = hp.kd_temperature;
        let heads: &[HeadKind] = if method.auxiliary_head { &HeadKind::BOTH } else { &[HeadKind::Primary] };
        for &head in heads {
            let v = match term {
                LwfTerm::Kd | LwfTerm::Rkd => {
                    let x = match term {
                        LwfTerm::Rkd => Cow::Owned(rkd_attack(model, snap, head, ud, attack, t, rng)?),
                        _ => Cow::Borrowed(ud),
                    };
                    let target = snap.model().logits(head, &ud.view())?;
                    accumulate_head(model, grads, head, &x, k, |z| Ok(kd_loss(z, &target.view(), t)?.scaled(weight)))?
                }
                LwfTerm::Ft | LwfTerm::Rft => {
                    let x = match term {
                        LwfTerm::Rft => Cow::Owned(rft_attack(model, snap, ud, attack, rng)?),
                        _ => Cow::Borrowed(ud),
                    };
                    let target = snap.model().forward_features(&ud.view())?;
                    accumulate_features(model, grads, &x, |f| Ok(ft_loss(f, &target.view())?.scaled(weight)))?
                }
            };
            c.total += v;
            match head {
                HeadKind::Primary => c.lwf_primary = v,
                HeadKind::Auxiliary => c.lwf_auxiliary = v,
            }
        }
    }

    let gamma2 = rtc_weight(mode, cfg);
    if let (Some(ud), true) = (batches.ud.as_ref(), gamma2 > 0.0) {
        let adv = rtc_attack(model, HeadKind::Primary, ud, attack, rng)?;
        let clean = model.logits(HeadKind::Primary, &ud.view())?;
        let v = accumulate_head(model, grads, HeadKind::Primary, &adv, seen, |z| Ok(kl_divergence(z, &clean.view())?.scaled(gamma2)))?;
        c.rtc = v;
        c.total += v;
    }
    Ok(c)
}

fn check_session(model: &ModelState, data: &SessionData<'_>, cfg: &SessionConfig, method: &MethodConfig, mode: TrainingMode) -> Result<()> {
    cfg.validate()?;
    if model.in_session() {
        return Err(Error::state("model is already inside a session"));
    }
    if model.seen_class_count() < data.task.class_range().end {
        return Err(Error::usage(format!(
            "heads cover {} classes but task {} needs {}; grow the heads first",
            model.seen_class_count(),
            data.task.task_id,
            data.task.class_range().end
        )));
    }
    if data.task.train.is_empty() {
        return Err(Error::usage(format!("task {} has no training data", data.task.task_id)));
    }
    let (weight, _) = lwf_term(mode, cfg);
    let needs_pool = method.lwf_data == LwfData::Queried && data.snapshot.is_some() && weight > 0.0;
    if needs_pool && data.queried.is_none_or(|q| q.is_empty()) {
        return Err(Error::usage(format!(
            "session {} uses the LwF terms on queried data but no queried pool was given",
            data.session
        )));
    }
    if method.lwf_data == LwfData::Stored && data.snapshot.is_some() && weight > 0.0 && data.bank.is_empty() {
        return Err(Error::usage("LwF on stored data needs a non-empty memory bank"));
    }
    Ok(())
}

fn build_batches(
    data: &SessionData<'_>,
    cfg: &SessionConfig,
    method: &MethodConfig,
    need_ud: bool,
    seeds: &SeedTree,
    counter: u64,
) -> Result<StepBatches> {
    let session = data.session;
    let current = &data.task.train;
    let sizes = cfg.batch;
    let cb = build_class_balanced_batch(data.bank, current, sizes.class_balanced, seeds.seed(Purpose::ClassBalancedBatch, session, counter))?;
    let rs = if method.auxiliary_head {
        Some(build_random_batch(data.bank, current, sizes.random, seeds.seed(Purpose::RandomBatch, session, counter))?)
    } else {
        None
    };
    let ud_seed = seeds.seed(Purpose::UnlabeledBatch, session, counter);
    let ud = match (need_ud && sizes.unlabeled > 0, method.lwf_data) {
        (false, _) => None,
        (true, LwfData::Queried) => match data.queried {
            Some(q) if !q.is_empty() => Some(stack_images(&build_unlabeled_batch(q, sizes.unlabeled, ud_seed)?)),
            _ => None,
        },
        (true, LwfData::Stored) if !data.bank.is_empty() => {
            Some(stack_images(&build_random_batch(data.bank, &[], sizes.unlabeled, ud_seed)?))
        }
        (true, LwfData::Stored) => None,
    };
    let mut out = StepBatches {
        cb: (stack_images(&cb), labels_of(&cb)),
        rs: rs.filter(|r| !r.is_empty()).map(|r| (stack_images(&r), labels_of(&r))),
        ud,
    };
    if cfg.augment {
        let shape = data.task.train[0].image.shape();
        let mut rng = seeds.rng(Purpose::Augment, session, counter);
        augment_batch(&mut out.cb.0, shape, AUGMENT_PAD, true, &mut rng);
        if let Some((x, _)) = out.rs.as_mut() {
            augment_batch(x, shape, AUGMENT_PAD, true, &mut rng);
        }
        if let Some(x) = out.ud.as_mut() {
            augment_batch(x, shape, AUGMENT_PAD, true, &mut rng);
        }
    }
    Ok(out)
}

/// Steps per epoch when not configured: one pass of the larger labeled
/// batch over the current and stored data.
pub fn default_steps_per_epoch(cfg: &SessionConfig, task: &Task, bank: &MemoryBank) -> usize {
    let per_step = cfg.batch.class_balanced.max(cfg.batch.random).max(1);
    (task.train.len() + bank.len()).div_ceil(per_step).max(1)
}

/// Where per-epoch checkpoints go, if anywhere.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub master_seed: u64,
}

/// Trains one session and returns the validation-selected model.
///
/// Standard mode minimizes the class-balanced and random-sample
/// cross-entropies plus the weighted LwF terms on both heads. Robust mode
/// replaces the supervised inputs by PGD perturbations, uses the robust LwF
/// variant and optionally the consistency term on the unlabeled batch.
pub fn train_session(
    mut model: ModelState,
    data: SessionData<'_>,
    cfg: &SessionConfig,
    method: &MethodConfig,
    mode: TrainingMode,
    seeds: &SeedTree,
    sink: Option<CheckpointSink<'_>>,
) -> Result<SessionOutcome> {
    check_session(&model, &data, cfg, method, mode)?;
    let (weight, _) = lwf_term(mode, cfg);
    let need_ud = (data.snapshot.is_some() && weight > 0.0) || rtc_weight(mode, cfg) > 0.0;
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| default_steps_per_epoch(cfg, data.task, data.bank));

    model.begin_session()?;
    let mut opt = MomentumSgd::new(&model, cfg.momentum);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut logs = Vec::with_capacity(cfg.epochs * steps);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        for step in 0..steps {
            let counter = (epoch * steps + step) as u64;
            let batches = build_batches(&data, cfg, method, need_ud, seeds, counter)?;
            let mut grads = model.zeros_like();
            let mut rng = seeds.rng(Purpose::Attack, data.session, counter);
            let loss = step_loss(&model, &mut grads, data.snapshot, &batches, mode, cfg, method, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(Error::state(format!("loss became non-finite at epoch {epoch}, step {step}")));
            }
            opt.step(&mut model, &grads, lr);
            logs.push(StepLog { epoch, step, learning_rate: lr, loss });
        }
        if let Some(sink) = sink {
            let path = sink.dir.join(format!("session{}_epoch{}.json", data.session, epoch + 1));
            Checkpoint::new(model.clone(), cfg.hyperparameters.clone(), sink.master_seed, data.session, Some(epoch + 1)).save(&path)?;
        }
        checkpoints.push(model.clone());
    }
    let selection = select_model(&checkpoints, data.validation)?;
    let mut chosen = checkpoints.swap_remove(selection.index);
    chosen.end_session();
    if let Some(sink) = sink {
        let path = sink.dir.join(format!("session{}_final.json", data.session));
        Checkpoint::new(chosen.clone(), cfg.hyperparameters.clone(), sink.master_seed, data.session, None).save(&path)?;
    }
    Ok(SessionOutcome { model: chosen, selected_epoch: selection.index + 1, validation_accuracy: selection.accuracies, steps: logs })
}

pub fn train_session_standard(
    model: ModelState,
    data: SessionData<'_>,
    cfg: &SessionConfig,
    method: &MethodConfig,
    seeds: &SeedTree,
) -> Result<SessionOutcome> {
    train_session(model, data, cfg, method, TrainingMode::Standard, seeds, None)
}

pub fn train_session_robust(
    model: ModelState,
    data: SessionData<'_>,
    cfg: &SessionConfig,
    method: &MethodConfig,
    seeds: &SeedTree,
) -> Result<SessionOutcome> {
    train_session(model, data, cfg, method, TrainingMode::Robust, seeds, None)
}

/// When robust accuracy is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaSchedule {
    Never,
    FinalSession,
    EverySession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub attack: AttackConfig,
    pub robust_accuracy: RaSchedule,
    /// Score the ensemble alongside the two heads.
    pub cem_enabled: bool,
    pub cem: CemConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { attack: AttackConfig::evaluation(), robust_accuracy: RaSchedule::EverySession, cem_enabled: true, cem: CemConfig::default() }
    }
}

/// Settings for a full incremental run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub session: SessionConfig,
    pub mode: TrainingMode,
    #[serde(default)]
    pub method: MethodConfig,
    pub memory_per_class: usize,
    #[serde(default)]
    pub query: QueryConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.validate_training()
    }

    /// Everything except the backbone, whose check needs the image shape.
    pub fn validate_training(&self) -> Result<()> {
        self.session.validate()?;
        self.evaluation.attack.validate()?;
        self.evaluation.cem.validate()?;
        if self.memory_per_class == 0 {
            return Err(Error::config("memory_per_class must be >= 1"));
        }
        if self.method.lwf_data == LwfData::Queried && self.query.method == QueryMethod::None {
            let (weight, _) = lwf_term(self.mode, &self.session);
            if weight > 0.0 {
                return Err(Error::config("LwF on queried data needs a query method other than `none`"));
            }
        }
        Ok(())
    }
}

/// Scores every requested predictor on the test sets of the seen tasks.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_session(
    model: &ModelState,
    stream: &TaskStream,
    seen_tasks: usize,
    bank: &MemoryBank,
    queried: Option<&QueriedPool>,
    auxiliary_head: bool,
    eval: &EvaluationConfig,
    with_ra: bool,
    seed: u64,
) -> Result<(Vec<(ReportHead, TaskAccuracy)>, Vec<(ReportHead, TaskAccuracy)>)> {
    let test_sets: Vec<&[LabeledExample]> = stream.tasks()[..seen_tasks].iter().map(|t| t.test.as_slice()).collect();
    let reference = if auxiliary_head && eval.cem_enabled && !(bank.is_empty() && queried.is_none_or(|q| q.is_empty())) {
        Some(CemReference::build(model, bank, queried, stream, seen_tasks)?)
    } else {
        None
    };
    let mut predictors = vec![(ReportHead::Primary, Predictor::Head(HeadKind::Primary))];
    if auxiliary_head {
        predictors.push((ReportHead::Auxiliary, Predictor::Head(HeadKind::Auxiliary)));
    }
    if let Some(r) = reference.as_ref() {
        predictors.push((ReportHead::Cem, Predictor::Cem { reference: r, cfg: eval.cem }));
    }
    let mut sa = Vec::new();
    let mut ra = Vec::new();
    for (i, (name, p)) in predictors.into_iter().enumerate() {
        sa.push((name, evaluate_sa(model, p, &test_sets)?));
        if with_ra {
            let s = crate::seeds::SeedTree::new(seed).seed(Purpose::Evaluation, seen_tasks, i as u64);
            ra.push((name, evaluate_ra(model, p, &test_sets, &eval.attack, s)?));
        }
    }
    Ok((sa, ra))
}

/// Validation examples of every task up to and including `seen_tasks`.
pub fn seen_validation(stream: &TaskStream, seen_tasks: usize) -> Vec<LabeledExample> {
    stream.tasks()[..seen_tasks].iter().flat_map(|t| t.val.iter().cloned()).collect()
}

/// Runs every task in order: grow the heads, train, store anchors, freeze
/// a snapshot, query the pool, evaluate on all seen tasks.
///
/// A failing session aborts with [`Error::StreamAborted`] carrying the
/// sessions finished so far.
pub fn run_stream(
    stream: &TaskStream,
    pool: Option<&UnlabeledPool>,
    cfg: &StreamConfig,
    master_seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<StreamReport> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::usage("task stream is empty"));
    }
    let started = Instant::now();
    let mut report = StreamReport::new(serde_json::to_value(cfg)?, master_seed);
    match run_sessions(stream, pool, cfg, master_seed, checkpoint_dir, &mut report) {
        Ok(()) => {
            report.complete = true;
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            Ok(report)
        }
        Err(e) => {
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            Err(Error::StreamAborted { partial: Box::new(report), source: Box::new(e) })
        }
    }
}

fn run_sessions(
    stream: &TaskStream,
    pool: Option<&UnlabeledPool>,
    cfg: &StreamConfig,
    master_seed: u64,
    checkpoint_dir: Option<&Path>,
    report: &mut StreamReport,
) -> Result<()> {
    let seeds = SeedTree::new(master_seed);
    let mut model = ModelState::new(cfg.backbone.clone(), &mut seeds.rng(Purpose::ModelInit, 0, 0))?;
    let mut bank = MemoryBank::new(cfg.memory_per_class);
    let mut snapshot: Option<Snapshot> = None;
    let mut queried: Option<QueriedPool> = None;
    let sink = checkpoint_dir.map(|dir| CheckpointSink { dir, master_seed });
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for (index, task) in stream.tasks().iter().enumerate() {
        let session = index + 1;
        let started = Instant::now();
        model.grow_heads(task.class_labels.len(), &mut seeds.rng(Purpose::HeadGrowth, session, 0))?;
        let validation = seen_validation(stream, session);
        let data = SessionData {
            session,
            snapshot: snapshot.as_ref(),
            bank: &bank,
            queried: queried.as_ref(),
            task,
            validation: &validation,
        };
        let outcome = train_session(model, data, &cfg.session, &cfg.method, cfg.mode, &seeds, sink)?;
        model = outcome.model;
        bank.update(task, seeds.seed(Purpose::MemoryBank, session, 0))?;
        let snap = model.take_snapshot();
        queried = match pool {
            Some(p) if !p.is_empty() => run_query(&cfg.query, snap.model(), &bank, p, seeds.seed(Purpose::Query, session, 0))?,
            _ => None,
        };
        snapshot = Some(snap);

        let with_ra = match cfg.evaluation.robust_accuracy {
            RaSchedule::Never => false,
            RaSchedule::FinalSession => session == stream.len(),
            RaSchedule::EverySession => true,
        };
        let (sa, ra) =
            evaluate_session(&model, stream, session, &bank, queried.as_ref(), cfg.method.auxiliary_head, &cfg.evaluation, with_ra, master_seed)?;
        report.sessions.push(SessionReport {
            session,
            classes_seen: model.seen_class_count(),
            selected_epoch: outcome.selected_epoch,
            validation_accuracy: outcome.validation_accuracy,
            bank_size: bank.len(),
            queried_size: queried.as_ref().map_or(0, QueriedPool::len),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            sa,
            ra,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_best_then_latest() {
        assert_eq!(select_index(&[0.60, 0.72, 0.69]), 1);
        assert_eq!(select_index(&[0.5, 0.7, 0.7]), 2);
        assert_eq!(select_index(&[0.1]), 0);
    }
}
