//! Prediction, accuracy under clean and attacked inputs, and the classifier
//! ensemble that routes each input to one head by a nearest-neighbour task
//! vote.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AttackConfig, CemAttack, CemConfig};
use crate::data::{labels_of, stack_images, ClassId, Image, LabeledExample, TaskStream};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelState};
use crate::query::{embed_items, PoolBucket, QueriedPool};
use crate::regularizers::{cross_entropy, pgd_attack, LossGrad};
use crate::sampling::MemoryBank;

const EVAL_CHUNK: usize = 256;

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_batch(model: &ModelState, head: HeadKind, images: &ArrayView2<f64>) -> Result<Vec<ClassId>> {
    let logits = model.logits(head, images)?;
    Ok(logits.rows().into_iter().map(argmax).collect())
}

pub fn predict(model: &ModelState, head: HeadKind, image: &Image) -> Result<ClassId> {
    Ok(predict_batch(model, head, &stack_images(std::slice::from_ref(image)).view())?[0])
}

/// Embedded stored and queried items, each tagged with its task.
#[derive(Clone, Debug)]
pub struct CemReference {
    embeddings: Array2<f64>,
    tasks: Vec<usize>,
    blocks: Vec<Range<ClassId>>,
}

impl CemReference {
    /// `blocks[i]` is the class range of task `i`; the last block is the
    /// newest task.
    pub fn from_embeddings(embeddings: Array2<f64>, tasks: Vec<usize>, blocks: Vec<Range<ClassId>>) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::usage("ensemble reference set is empty"));
        }
        if embeddings.nrows() != tasks.len() {
            return Err(Error::usage("one task id is needed per reference embedding"));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= blocks.len()) {
            return Err(Error::usage(format!("reference task {t} has no class block")));
        }
        Ok(Self { embeddings, tasks, blocks })
    }

    /// Embeds the bank and the class-assigned part of the queried pool with
    /// `model`, for every task seen so far in `stream`.
    pub fn build(model: &ModelState, bank: &MemoryBank, queried: Option<&QueriedPool>, stream: &TaskStream, seen_tasks: usize) -> Result<Self> {
        let class_task = stream.class_to_task();
        let mut images: Vec<&Image> = Vec::new();
        let mut tasks = Vec::new();
        for (class, examples) in bank.per_class() {
            let task = class_task[class];
            if task < seen_tasks {
                images.extend(examples.iter().map(|e| &e.image));
                tasks.extend(std::iter::repeat_n(task, examples.len()));
            }
        }
        if let Some(pool) = queried {
            for (bucket, items) in pool.buckets() {
                if let PoolBucket::Class(class) = bucket {
                    let task = class_task[class];
                    if task < seen_tasks {
                        images.extend(items.iter().map(|i| &i.image));
                        tasks.extend(std::iter::repeat_n(task, items.len()));
                    }
                }
            }
        }
        if images.is_empty() {
            return Err(Error::usage("ensemble reference set is empty"));
        }
        let embeddings = embed_items(model, &images)?;
        let blocks = stream.tasks()[..seen_tasks].iter().map(|t| t.class_range()).collect();
        Self::from_embeddings(embeddings, tasks, blocks)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn newest_task(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn block(&self, task: usize) -> Range<ClassId> {
        self.blocks[task].clone()
    }

    /// Majority task among the `k` nearest references. Distance ties are
    /// ordered by task id and vote ties go to the smaller task id.
    pub fn vote(&self, feature: ArrayView1<f64>, k: usize) -> usize {
        let mut scored: Vec<(f64, usize)> = self
            .embeddings
            .rows()
            .into_iter()
            .zip(&self.tasks)
            .map(|(r, &t)| (r.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), t))
            .collect();
        let k = k.min(scored.len());
        scored.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut counts = vec![0usize; self.blocks.len()];
        for &(_, t) in &scored[..k] {
            counts[t] += 1;
        }
        let mut best = 0;
        for (t, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = t;
            }
        }
        best
    }

    /// Head and class block chosen for a feature vector.
    pub fn route(&self, feature: ArrayView1<f64>, k: usize) -> (HeadKind, Range<ClassId>) {
        let task = self.vote(feature, k);
        let head = if task == self.newest_task() { HeadKind::Auxiliary } else { HeadKind::Primary };
        (head, self.block(task))
    }
}

fn block_argmax(logits: ArrayView1<f64>, block: &Range<ClassId>) -> ClassId {
    block.start + argmax(logits.slice(s![block.clone()]))
}

pub fn cem_predict_batch(model: &ModelState, images: &ArrayView2<f64>, reference: &CemReference, cfg: &CemConfig) -> Result<Vec<ClassId>> {
    cfg.validate()?;
    let features = model.forward_features(images)?;
    let primary = model.forward_head(HeadKind::Primary, &features.view())?;
    let auxiliary = model.forward_head(HeadKind::Auxiliary, &features.view())?;
    Ok(features
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let (head, block) = reference.route(f, cfg.k_neighbors);
            let logits = if head == HeadKind::Primary { primary.row(i) } else { auxiliary.row(i) };
            block_argmax(logits, &block)
        })
        .collect())
}

pub fn cem_predict(model: &ModelState, image: &Image, reference: &CemReference, cfg: &CemConfig) -> Result<ClassId> {
    Ok(cem_predict_batch(model, &stack_images(std::slice::from_ref(image)).view(), reference, cfg)?[0])
}

/// What is being scored.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Head(HeadKind),
    Cem { reference: &'a CemReference, cfg: CemConfig },
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Head(h) => h.as_str(),
            Predictor::Cem { .. } => "cem",
        }
    }

    fn predict(&self, model: &ModelState, images: &ArrayView2<f64>) -> Result<Vec<ClassId>> {
        match self {
            Predictor::Head(h) => predict_batch(model, *h, images),
            Predictor::Cem { reference, cfg } => cem_predict_batch(model, images, reference, cfg),
        }
    }
}

/// Accuracy per task plus their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub per_task: Vec<f64>,
    pub average: f64,
}

impl TaskAccuracy {
    pub fn from_per_task(per_task: Vec<f64>) -> Self {
        let average = if per_task.is_empty() { 0.0 } else { per_task.iter().sum::<f64>() / per_task.len() as f64 };
        Self { per_task, average }
    }
}

fn check_sets(test_sets: &[&[LabeledExample]]) -> Result<()> {
    if test_sets.is_empty() || test_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::usage("every evaluated task needs a non-empty test set"));
    }
    Ok(())
}

fn accuracy(pred: &[ClassId], labels: &[ClassId]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Clean accuracy of `predictor` on each task's test set.
pub fn evaluate_sa(model: &ModelState, predictor: Predictor<'_>, test_sets: &[&[LabeledExample]]) -> Result<TaskAccuracy> {
    check_sets(test_sets)?;
    let mut per_task = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        let mut preds = Vec::with_capacity(set.len());
        for chunk in set.chunks(EVAL_CHUNK) {
            preds.extend(predictor.predict(model, &stack_images(chunk).view())?);
        }
        per_task.push(accuracy(&preds, &labels_of(set)));
    }
    Ok(TaskAccuracy::from_per_task(per_task))
}

/// Input gradient of the cross-entropy over `block` of `head`'s logits,
/// with labels given relative to the block start.
fn block_ce_grad(model: &ModelState, head: HeadKind, x: &Array2<f64>, block: &Range<ClassId>, labels: &[usize]) -> Result<Array2<f64>> {
    let cache = model.forward_features_cached(&x.view())?;
    let logits = model.forward_head(head, &cache.features().view())?;
    let LossGrad { grad, .. } = cross_entropy(&logits.slice(s![.., block.clone()]), labels)?;
    let mut full = Array2::zeros(logits.raw_dim());
    full.slice_mut(s![.., block.clone()]).assign(&grad);
    let d_features = model.head(head).backward(&cache.features().view(), &full.view(), None);
    Ok(model.extractor().backward(&cache, &d_features.view(), None, true).expect("input gradient requested"))
}

/// Perturbed copy of `images` for scoring `predictor`.
pub fn adversarial_batch(
    model: &ModelState,
    predictor: Predictor<'_>,
    images: &Array2<f64>,
    labels: &[ClassId],
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let full = 0..model.seen_class_count();
    match predictor {
        Predictor::Head(h) => pgd_attack(images, attack, rng, |x| block_ce_grad(model, h, x, &full, labels)),
        Predictor::Cem { cfg, .. } if cfg.attack == CemAttack::Transfer => {
            pgd_attack(images, attack, rng, |x| block_ce_grad(model, HeadKind::Primary, x, &full, labels))
        }
        Predictor::Cem { reference, cfg } => {
            let features = model.forward_features(&images.view())?;
            let mut groups: BTreeMap<(HeadKind, usize, usize), Vec<usize>> = BTreeMap::new();
            for (i, f) in features.rows().into_iter().enumerate() {
                let (head, block) = reference.route(f, cfg.k_neighbors);
                if block.contains(&labels[i]) {
                    groups.entry((head, block.start, block.end)).or_default().push(i);
                }
            }
            let mut out = images.clone();
            for ((head, lo, hi), rows) in groups {
                let sub = images.select(ndarray::Axis(0), &rows);
                let rel: Vec<usize> = rows.iter().map(|&i| labels[i] - lo).collect();
                let adv = pgd_attack(&sub, attack, rng, |x| block_ce_grad(model, head, x, &(lo..hi), &rel))?;
                for (k, &i) in rows.iter().enumerate() {
                    out.row_mut(i).assign(&adv.row(k));
                }
            }
            Ok(out)
        }
    }
}

/// Accuracy on PGD-perturbed test sets.
pub fn evaluate_ra(
    model: &ModelState,
    predictor: Predictor<'_>,
    test_sets: &[&[LabeledExample]],
    attack: &AttackConfig,
    seed: u64,
) -> Result<TaskAccuracy> {
    check_sets(test_sets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_task = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        let mut preds = Vec::with_capacity(set.len());
        for chunk in set.chunks(EVAL_CHUNK) {
            let x = stack_images(chunk);
            let adv = adversarial_batch(model, predictor, &x, &labels_of(chunk), attack, &mut rng)?;
            preds.extend(predictor.predict(model, &adv.view())?);
        }
        per_task.push(accuracy(&preds, &labels_of(set)));
    }
    Ok(TaskAccuracy::from_per_task(per_task))
}
