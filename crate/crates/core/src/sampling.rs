//! Memory bank of stored anchors and the three per-step batch builders.
//!
//! Every builder is a pure function of its inputs and an explicit seed.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::BatchSizes;
use crate::data::{ClassId, LabeledExample, Task, UnlabeledItem};
use crate::error::{Error, Result};
use crate::query::QueriedPool;

/// Stored exemplars of past classes, at most `budget_per_class` each.
#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    per_class: BTreeMap<ClassId, Vec<LabeledExample>>,
    budget_per_class: usize,
}

impl MemoryBank {
    pub fn new(budget_per_class: usize) -> Self {
        Self { per_class: BTreeMap::new(), budget_per_class }
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class(&self, class: ClassId) -> &[LabeledExample] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn per_class(&self) -> &BTreeMap<ClassId, Vec<LabeledExample>> {
        &self.per_class
    }

    pub fn examples(&self) -> impl Iterator<Item = &LabeledExample> {
        self.per_class.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    /// Stores `min(budget, available)` uniformly chosen training examples
    /// of every class of `finished_task`.
    pub fn update(&mut self, finished_task: &Task, seed: u64) -> Result<()> {
        if let Some(dup) = finished_task.class_labels.iter().find(|c| self.per_class.contains_key(c)) {
            return Err(Error::state(format!("class {dup} is already stored in the memory bank")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: BTreeMap<ClassId, Vec<&LabeledExample>> =
            finished_task.class_labels.iter().map(|&c| (c, Vec::new())).collect();
        for e in &finished_task.train {
            if let Some(v) = by_class.get_mut(&e.label) {
                v.push(e);
            }
        }
        for (class, pool) in by_class {
            let take = self.budget_per_class.min(pool.len());
            let chosen = index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i].clone()).collect();
            self.per_class.insert(class, chosen);
        }
        Ok(())
    }
}

/// Functional form of [`MemoryBank::update`].
pub fn update_memory_bank(bank: &MemoryBank, finished_task: &Task, seed: u64) -> Result<MemoryBank> {
    let mut next = bank.clone();
    next.update(finished_task, seed)?;
    Ok(next)
}

/// `count` draws from `0..n`: without replacement when possible.
fn draw<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    if count <= n {
        index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Batch whose per-class counts differ by at most one across every class
/// in the bank and in `current`. Leftover slots go to a random subset of
/// classes; classes with fewer examples than their quota are sampled with
/// replacement.
pub fn build_class_balanced_batch(
    bank: &MemoryBank,
    current: &[LabeledExample],
    size: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let mut pools: BTreeMap<ClassId, Vec<&LabeledExample>> = BTreeMap::new();
    for e in bank.examples().chain(current) {
        pools.entry(e.label).or_default().push(e);
    }
    if pools.is_empty() {
        return Err(Error::usage("class-balanced batch needs stored or current data"));
    }
    if size == 0 {
        return Ok(Vec::new());
    }
    let classes = pools.len();
    if size < classes {
        return Err(Error::usage(format!("class-balanced batch of {size} cannot cover {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = size / classes;
    let mut quota = vec![base; classes];
    for i in index::sample(&mut rng, classes, size % classes) {
        quota[i] += 1;
    }
    let mut batch = Vec::with_capacity(size);
    for (pool, q) in pools.values().zip(quota) {
        batch.extend(draw(&mut rng, pool.len(), q).into_iter().map(|i| pool[i].clone()));
    }
    Ok(batch)
}

/// Uniform sample over the union of stored and current examples.
pub fn build_random_batch(bank: &MemoryBank, current: &[LabeledExample], size: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    let stored: Vec<&LabeledExample> = bank.examples().collect();
    let n = stored.len() + current.len();
    if n == 0 {
        return Err(Error::usage("random batch needs stored or current data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw(&mut rng, n, size)
        .into_iter()
        .map(|i| if i < stored.len() { stored[i].clone() } else { current[i - stored.len()].clone() })
        .collect())
}

/// Uniform sample from the queried pool, repeating items if the pool is
/// smaller than `size`.
pub fn build_unlabeled_batch(pool: &QueriedPool, size: usize, seed: u64) -> Result<Vec<UnlabeledItem>> {
    if size == 0 {
        return Ok(Vec::new());
    }
    let items: Vec<&UnlabeledItem> = pool.items().collect();
    if items.is_empty() {
        return Err(Error::usage("unlabeled batch requested from an empty queried pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw(&mut rng, items.len(), size).into_iter().map(|i| items[i].clone()).collect())
}

/// One step's worth of batches.
#[derive(Clone, Debug, Default)]
pub struct BatchTriple {
    pub cb: Vec<LabeledExample>,
    pub rs: Vec<LabeledExample>,
    pub ud: Vec<UnlabeledItem>,
}

impl BatchTriple {
    /// Builds all three batches; `ud` stays empty without a pool.
    pub fn build(
        bank: &MemoryBank,
        current: &[LabeledExample],
        pool: Option<&QueriedPool>,
        sizes: BatchSizes,
        seeds: [u64; 3],
    ) -> Result<Self> {
        Ok(Self {
            cb: build_class_balanced_batch(bank, current, sizes.class_balanced, seeds[0])?,
            rs: build_random_batch(bank, current, sizes.random, seeds[1])?,
            ud: match pool {
                Some(p) => build_unlabeled_batch(p, sizes.unlabeled, seeds[2])?,
                None => Vec::new(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::nn::ImageShape;

    fn ex(label: ClassId, i: usize) -> LabeledExample {
        LabeledExample {
            image: Image::new(ImageShape::new(1, 1, 1), vec![0.5]).unwrap(),
            label,
            source_id: format!("c{label}-{i}"),
        }
    }

    fn task(id: usize, classes: &[ClassId], per_class: usize) -> Task {
        Task {
            task_id: id,
            class_labels: classes.iter().copied().collect(),
            train: classes.iter().flat_map(|&c| (0..per_class).map(move |i| ex(c, i))).collect(),
            val: vec![],
            test: vec![],
        }
    }

    fn counts(batch: &[LabeledExample]) -> BTreeMap<ClassId, usize> {
        let mut m = BTreeMap::new();
        for e in batch {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn bank_clamps_to_availability_and_rejects_duplicates() {
        let mut bank = MemoryBank::new(10);
        let mut t = task(1, &[0, 1], 20);
        t.train.retain(|e| e.label == 0 || e.source_id.rsplit('-').next().unwrap().parse::<usize>().unwrap() < 5);
        bank.update(&t, 1).unwrap();
        assert_eq!(bank.class(0).len(), 10);
        assert_eq!(bank.class(1).len(), 5);
        assert!(matches!(bank.update(&t, 2), Err(Error::State(_))));
    }

    #[test]
    fn bank_sampling_is_without_replacement() {
        let mut bank = MemoryBank::new(100);
        bank.update(&task(1, &[3], 500), 9).unwrap();
        let mut ids: Vec<_> = bank.class(3).iter().map(|e| e.source_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn four_classes_split_evenly() {
        let mut bank = MemoryBank::new(10);
        bank.update(&task(1, &[0, 1], 30), 0).unwrap();
        let cur = task(2, &[2, 3], 300).train;
        let b = build_class_balanced_batch(&bank, &cur, 64, 4).unwrap();
        assert!(counts(&b).values().all(|&c| c == 16));
    }

    #[test]
    fn first_session_balances_current_classes() {
        let cur = task(1, &[0, 1], 50).train;
        let b = build_class_balanced_batch(&MemoryBank::new(5), &cur, 7, 1).unwrap();
        let c = counts(&b);
        assert_eq!(c.len(), 2);
        assert!(c.values().max().unwrap() - c.values().min().unwrap() <= 1);
    }

    #[test]
    fn balanced_batch_errors() {
        assert!(build_class_balanced_batch(&MemoryBank::new(5), &[], 8, 0).is_err());
        let cur = task(1, &[0, 1, 2], 5).train;
        assert!(build_class_balanced_batch(&MemoryBank::new(5), &cur, 2, 0).is_err());
    }

    #[test]
    fn random_batch_determinism_and_empty() {
        let mut bank = MemoryBank::new(10);
        bank.update(&task(1, &[0], 10), 0).unwrap();
        let cur = task(2, &[1], 100).train;
        let a = build_random_batch(&bank, &cur, 32, 77).unwrap();
        let b = build_random_batch(&bank, &cur, 32, 77).unwrap();
        assert_eq!(a, b);
        assert!(build_random_batch(&bank, &cur, 0, 77).unwrap().is_empty());
    }
}
