//! Selecting relevant unlabeled images from an external pool.
//!
//! The default method ranks pool items by their Euclidean distance, in the
//! feature space of a frozen extractor, to the stored anchors of each
//! previous class. Largest-logit and random selection are the ablation
//! baselines. Every method hands each pool item to at most one class:
//! classes are served in ascending id order and an item claimed by one
//! class is no longer a candidate for the next.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, ClassId, HasImage, UnlabeledItem, UnlabeledPool};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelState};
use crate::sampling::MemoryBank;

const EMBED_CHUNK: usize = 256;

/// Key of a queried-pool bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PoolBucket {
    Class(ClassId),
    /// Items picked without reference to any class.
    Unassigned,
}

/// Unlabeled items grouped by the class whose anchors retrieved them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueriedPool {
    buckets: BTreeMap<PoolBucket, Vec<UnlabeledItem>>,
    budget_per_class: usize,
}

impl QueriedPool {
    pub fn new(buckets: BTreeMap<PoolBucket, Vec<UnlabeledItem>>, budget_per_class: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for (bucket, items) in &buckets {
            if items.len() > budget_per_class {
                return Err(Error::usage(format!("bucket {bucket:?} holds {} items, budget is {budget_per_class}", items.len())));
            }
            for item in items {
                if !seen.insert(item.source_id.as_str()) {
                    return Err(Error::usage(format!("source_id `{}` appears twice in the queried pool", item.source_id)));
                }
            }
        }
        Ok(Self { buckets, budget_per_class })
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn buckets(&self) -> &BTreeMap<PoolBucket, Vec<UnlabeledItem>> {
        &self.buckets
    }

    pub fn bucket(&self, bucket: PoolBucket) -> &[UnlabeledItem] {
        self.buckets.get(&bucket).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn items(&self) -> impl Iterator<Item = &UnlabeledItem> {
        self.buckets.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source ids per bucket, for comparisons in tests and reports.
    pub fn source_ids(&self) -> BTreeMap<PoolBucket, Vec<String>> {
        self.buckets.iter().map(|(b, v)| (*b, v.iter().map(|i| i.source_id.clone()).collect())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMethod {
    FeatureKnn,
    LargestLogit,
    Random,
    None,
}

/// How one class's anchors are combined when ranking pool items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorAggregation {
    /// Rank by distance to the closest anchor of the class.
    MinDistance,
    /// Take each anchor's `budget` nearest items, merge, then rank.
    PerAnchorMerge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub method: QueryMethod,
    pub budget_per_class: usize,
    /// L2-normalize embeddings before measuring distance.
    pub normalize: bool,
    pub aggregation: AnchorAggregation,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { method: QueryMethod::FeatureKnn, budget_per_class: 5000, normalize: false, aggregation: AnchorAggregation::MinDistance }
    }
}

/// Features of arbitrary items, computed in chunks.
pub fn embed_items<T: HasImage>(model: &ModelState, items: &[T]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((items.len(), model.feature_dim()));
    for (start, chunk) in (0..).step_by(EMBED_CHUNK).zip(items.chunks(EMBED_CHUNK)) {
        let f = model.forward_features(&stack_images(chunk).view())?;
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(&f);
    }
    Ok(out)
}

/// One `(source_id, feature)` pair per pool item.
pub fn embed_pool(model: &ModelState, pool: &UnlabeledPool) -> Result<Vec<(String, Vec<f64>)>> {
    if pool.is_empty() {
        return Err(Error::usage("cannot embed an empty pool"));
    }
    let f = embed_items(model, pool.items())?;
    Ok(pool.items().iter().zip(f.rows()).map(|(item, row)| (item.source_id.clone(), row.to_vec())).collect())
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_key_then_id<'a>(keys: &'a [f64], ids: &'a [&'a str]) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| keys[a].total_cmp(&keys[b]).then_with(|| ids[a].cmp(ids[b]))
}

/// Core nearest-anchor selection on precomputed embeddings.
///
/// Returns, per class in ascending order, the selected pool indices in rank
/// order (ascending distance, then ascending source id).
pub fn select_nearest(
    anchors: &BTreeMap<ClassId, Array2<f64>>,
    pool: &ArrayView2<f64>,
    ids: &[&str],
    budget: usize,
    aggregation: AnchorAggregation,
) -> BTreeMap<ClassId, Vec<usize>> {
    let n = pool.nrows();
    let mut claimed = vec![false; n];
    let mut out = BTreeMap::new();
    for (&class, anchor_rows) in anchors {
        let candidates: Vec<usize> = (0..n).filter(|&i| !claimed[i]).collect();
        let dists: Vec<Vec<f64>> = anchor_rows
            .rows()
            .into_iter()
            .map(|a| (0..n).map(|i| if claimed[i] { f64::INFINITY } else { sq_dist(a, pool.row(i)) }).collect())
            .collect();
        let mut min_dist = vec![f64::INFINITY; n];
        for d in &dists {
            for (m, &v) in min_dist.iter_mut().zip(d) {
                *m = m.min(v);
            }
        }
        let mut ranked = match aggregation {
            AnchorAggregation::MinDistance => candidates,
            AnchorAggregation::PerAnchorMerge => {
                let mut merged = vec![false; n];
                for d in &dists {
                    let mut order = candidates.clone();
                    order.sort_by(by_key_then_id(d, ids));
                    for &i in order.iter().take(budget) {
                        merged[i] = true;
                    }
                }
                (0..n).filter(|&i| merged[i]).collect()
            }
        };
        ranked.sort_by(by_key_then_id(&min_dist, ids));
        ranked.truncate(budget);
        for &i in &ranked {
            claimed[i] = true;
        }
        out.insert(class, ranked);
    }
    out
}

fn assemble(pool: &UnlabeledPool, selection: BTreeMap<ClassId, Vec<usize>>, budget: usize) -> Result<QueriedPool> {
    let buckets = selection
        .into_iter()
        .map(|(c, idx)| (PoolBucket::Class(c), idx.into_iter().map(|i| pool.items()[i].clone()).collect()))
        .collect();
    QueriedPool::new(buckets, budget)
}

/// Nearest-anchor query with `model`'s feature extractor.
pub fn query_feature_knn(
    model: &ModelState,
    bank: &MemoryBank,
    pool: &UnlabeledPool,
    budget_per_class: usize,
    normalize: bool,
    aggregation: AnchorAggregation,
) -> Result<QueriedPool> {
    if bank.is_empty() {
        return Err(Error::usage("feature KNN query needs at least one stored anchor"));
    }
    if budget_per_class == 0 || pool.is_empty() {
        return QueriedPool::new(BTreeMap::new(), budget_per_class);
    }
    let mut pool_emb = embed_items(model, pool.items())?;
    let mut anchors = BTreeMap::new();
    for (&class, examples) in bank.per_class() {
        let mut a = embed_items(model, examples)?;
        if normalize {
            normalize_rows(&mut a);
        }
        anchors.insert(class, a);
    }
    if normalize {
        normalize_rows(&mut pool_emb);
    }
    let ids: Vec<&str> = pool.items().iter().map(|i| i.source_id.as_str()).collect();
    let selection = select_nearest(&anchors, &pool_emb.view(), &ids, budget_per_class, aggregation);
    assemble(pool, selection, budget_per_class)
}

/// Ranking by class logit. Each item is only eligible for the previous
/// class with its largest logit (ties to the lower class id); within a
/// class, larger logits come first and ties go to the smaller source id.
pub fn select_largest_logit(logits: &ArrayView2<f64>, ids: &[&str], budget: usize, classes: &[ClassId]) -> BTreeMap<ClassId, Vec<usize>> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let best: Vec<ClassId> = logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut arg = sorted[0];
            for &c in &sorted[1..] {
                if row[c] > row[arg] {
                    arg = c;
                }
            }
            arg
        })
        .collect();
    let mut out = BTreeMap::new();
    for &class in &sorted {
        let keys: Vec<f64> = logits.column(class).iter().map(|v| -v).collect();
        let mut ranked: Vec<usize> = (0..logits.nrows()).filter(|&i| best[i] == class).collect();
        ranked.sort_by(by_key_then_id(&keys, ids));
        ranked.truncate(budget);
        out.insert(class, ranked);
    }
    out
}

pub fn query_largest_logit(model: &ModelState, pool: &UnlabeledPool, budget_per_class: usize, previous_classes: &[ClassId]) -> Result<QueriedPool> {
    if previous_classes.is_empty() {
        return Err(Error::usage("largest-logit query needs at least one previous class"));
    }
    if let Some(&c) = previous_classes.iter().find(|&&c| c >= model.seen_class_count()) {
        return Err(Error::usage(format!("class {c} is not covered by the primary head")));
    }
    if budget_per_class == 0 || pool.is_empty() {
        return QueriedPool::new(BTreeMap::new(), budget_per_class);
    }
    let features = embed_items(model, pool.items())?;
    let logits = model.forward_head(HeadKind::Primary, &features.view())?;
    let ids: Vec<&str> = pool.items().iter().map(|i| i.source_id.as_str()).collect();
    let selection = select_largest_logit(&logits.view(), &ids, budget_per_class, previous_classes);
    assemble(pool, selection, budget_per_class)
}

/// `min(total_budget, |pool|)` items drawn without replacement.
pub fn query_random(pool: &UnlabeledPool, total_budget: usize, seed: u64) -> Result<QueriedPool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = total_budget.min(pool.len());
    let items = index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool.items()[i].clone()).collect();
    QueriedPool::new(BTreeMap::from([(PoolBucket::Unassigned, items)]), total_budget)
}

/// Runs the configured method against the classes stored in `bank`.
/// Random selection draws `budget_per_class` times the stored class count.
pub fn run_query(cfg: &QueryConfig, model: &ModelState, bank: &MemoryBank, pool: &UnlabeledPool, seed: u64) -> Result<Option<QueriedPool>> {
    if bank.is_empty() {
        return Ok(None);
    }
    let classes: Vec<ClassId> = bank.classes().collect();
    let queried = match cfg.method {
        QueryMethod::None => return Ok(None),
        QueryMethod::FeatureKnn => query_feature_knn(model, bank, pool, cfg.budget_per_class, cfg.normalize, cfg.aggregation)?,
        QueryMethod::LargestLogit => query_largest_logit(model, pool, cfg.budget_per_class, &classes)?,
        QueryMethod::Random => query_random(pool, cfg.budget_per_class * classes.len(), seed)?,
    };
    Ok(Some(queried))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn toy_two_anchor_selection() {
        let anchors = BTreeMap::from([(0, array![[0.0, 0.0], [10.0, 10.0]])]);
        let pool = array![[1.0, 0.0], [9.0, 10.0], [5.0, 5.0]];
        let sel = select_nearest(&anchors, &pool.view(), &["a", "b", "c"], 2, AnchorAggregation::MinDistance);
        assert_eq!(sel[&0], vec![0, 1]);
    }

    #[test]
    fn claimed_items_are_not_reused() {
        let anchors = BTreeMap::from([(0, array![[0.0]]), (1, array![[0.1]])]);
        let pool = array![[0.0], [0.05], [3.0]];
        let sel = select_nearest(&anchors, &pool.view(), &["a", "b", "c"], 2, AnchorAggregation::MinDistance);
        assert_eq!(sel[&0], vec![0, 1]);
        assert_eq!(sel[&1], vec![2]);
    }

    #[test]
    fn distance_ties_break_on_source_id() {
        let anchors = BTreeMap::from([(0, array![[0.0]])]);
        let pool = array![[1.0], [-1.0], [1.0]];
        let sel = select_nearest(&anchors, &pool.view(), &["z", "m", "a"], 2, AnchorAggregation::MinDistance);
        assert_eq!(sel[&0], vec![2, 1]);
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let anchors = BTreeMap::from([(0, array![[0.0]])]);
        let pool = array![[1.0]];
        let sel = select_nearest(&anchors, &pool.view(), &["a"], 0, AnchorAggregation::MinDistance);
        assert!(sel[&0].is_empty());
    }

    #[test]
    fn largest_logit_all_equal_falls_back_to_source_ids() {
        let logits = Array2::<f64>::zeros((3, 2));
        let sel = select_largest_logit(&logits.view(), &["c", "a", "b"], 2, &[0, 1]);
        assert_eq!(sel[&0], vec![1, 2]);
        assert!(sel[&1].is_empty());
    }

    #[test]
    fn largest_logit_partitions_when_budget_is_large() {
        let logits = array![[2.0, 1.0], [0.0, 3.0], [5.0, -1.0]];
        let sel = select_largest_logit(&logits.view(), &["a", "b", "c"], 10, &[0, 1]);
        assert_eq!(sel[&0], vec![2, 0]);
        assert_eq!(sel[&1], vec![1]);
    }

    #[test]
    fn queried_pool_rejects_duplicates() {
        use crate::data::Image;
        use crate::nn::ImageShape;
        let item = UnlabeledItem { image: Image::new(ImageShape::new(1, 1, 1), vec![0.0]).unwrap(), source_id: "x".into() };
        let buckets = BTreeMap::from([(PoolBucket::Class(0), vec![item.clone()]), (PoolBucket::Class(1), vec![item])]);
        assert!(QueriedPool::new(buckets, 5).is_err());
    }
}
