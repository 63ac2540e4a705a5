//! Images, labeled and unlabeled examples, and the incremental task stream.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ImageShape;

/// Global class id, dense from zero in arrival order.
pub type ClassId = usize;

/// `H x W x C` image with values in `[0, 1]`, stored row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    shape: ImageShape,
    pixels: Arc<[f64]>,
}

impl Image {
    /// Rejects pixel buffers of the wrong length or outside `[0, 1]`.
    pub fn new(shape: ImageShape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::usage(format!(
                "image buffer has {} values, shape {}x{}x{} needs {}",
                pixels.len(),
                shape.height,
                shape.width,
                shape.channels,
                shape.len()
            )));
        }
        if let Some((i, v)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::usage(format!("pixel {i} has value {v}, outside [0, 1]")));
        }
        Ok(Self { shape, pixels: pixels.into() })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: Image,
    pub label: ClassId,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledItem {
    pub image: Image,
    pub source_id: String,
}

/// Anything that carries an image.
pub trait HasImage {
    fn image(&self) -> &Image;
}

impl HasImage for LabeledExample {
    fn image(&self) -> &Image {
        &self.image
    }
}

impl HasImage for UnlabeledItem {
    fn image(&self) -> &Image {
        &self.image
    }
}

impl HasImage for Image {
    fn image(&self) -> &Image {
        self
    }
}

impl<T: HasImage> HasImage for &T {
    fn image(&self) -> &Image {
        (*self).image()
    }
}

/// Stacks images into a `(B, H*W*C)` matrix.
pub fn stack_images<T: HasImage>(items: &[T]) -> Array2<f64> {
    let len = items.first().map(|i| i.image().pixels().len()).unwrap_or(0);
    let mut out = Array2::<f64>::zeros((items.len(), len));
    for (mut row, item) in out.rows_mut().into_iter().zip(items) {
        row.as_slice_mut().expect("row-major").copy_from_slice(item.image().pixels());
    }
    out
}

pub fn labels_of(items: &[LabeledExample]) -> Vec<ClassId> {
    items.iter().map(|e| e.label).collect()
}

/// Random shift by up to `pad` pixels (zero fill) and horizontal flip,
/// applied in place to a `(B, H*W*C)` batch.
pub fn augment_batch<R: Rng + ?Sized>(batch: &mut Array2<f64>, shape: ImageShape, pad: usize, flip: bool, rng: &mut R) {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut scratch = vec![0.0; shape.len()];
    for mut row in batch.rows_mut() {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let mirror = flip && rng.random_bool(0.5);
        let src = row.as_slice_mut().expect("row-major");
        scratch.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if mirror { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let from = (sy as usize * w + sx as usize) * c;
                let to = (y * w + x) * c;
                scratch[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        src.copy_from_slice(&scratch);
    }
}

/// A labeled dataset before it is cut into tasks. Labels are the dataset's
/// own class ids `0..class_count`.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub shape: ImageShape,
    pub class_count: usize,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        for e in self.train.iter().chain(&self.test) {
            if e.label >= self.class_count {
                return Err(Error::usage(format!("example {} has label {} >= class count {}", e.source_id, e.label, self.class_count)));
            }
            if e.image.shape() != self.shape {
                return Err(Error::usage(format!("example {} has a different image shape", e.source_id)));
            }
        }
        Ok(())
    }
}

/// External images without labels.
#[derive(Clone, Debug, Default)]
pub struct UnlabeledPool {
    items: Vec<UnlabeledItem>,
}

impl UnlabeledPool {
    pub fn new(items: Vec<UnlabeledItem>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item.source_id.as_str()) {
                return Err(Error::usage(format!("duplicate source_id `{}` in unlabeled pool", item.source_id)));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[UnlabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One incremental task: a block of new classes and their data.
#[derive(Clone, Debug)]
pub struct Task {
    /// 1-based position in the stream.
    pub task_id: usize,
    pub class_labels: BTreeSet<ClassId>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Task {
    pub fn class_range(&self) -> std::ops::Range<ClassId> {
        let lo = *self.class_labels.first().unwrap_or(&0);
        let hi = self.class_labels.last().map(|c| c + 1).unwrap_or(0);
        lo..hi
    }
}

/// Tasks in arrival order. Task `i` owns the contiguous global ids
/// `k_{i-1}..k_i`.
#[derive(Clone, Debug)]
pub struct TaskStream {
    tasks: Vec<Task>,
    /// `original_label[global id]` is the dataset's own label.
    original_label: Vec<usize>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, original_label: Vec<usize>) -> Result<Self> {
        let mut next = 0;
        for (i, task) in tasks.iter().enumerate() {
            if task.task_id != i + 1 {
                return Err(Error::usage(format!("task at position {i} has id {}", task.task_id)));
            }
            if task.class_labels.is_empty() {
                return Err(Error::usage(format!("task {} has no classes", task.task_id)));
            }
            let expected: BTreeSet<_> = (next..next + task.class_labels.len()).collect();
            if task.class_labels != expected {
                return Err(Error::usage(format!(
                    "task {} classes are not the contiguous block starting at {next}",
                    task.task_id
                )));
            }
            for e in task.train.iter().chain(&task.val).chain(&task.test) {
                if !task.class_labels.contains(&e.label) {
                    return Err(Error::usage(format!("example {} is outside task {}", e.source_id, task.task_id)));
                }
            }
            next += task.class_labels.len();
        }
        if original_label.len() != next {
            return Err(Error::usage("class mapping length differs from the class count"));
        }
        Ok(Self { tasks, original_label })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.original_label.len()
    }

    pub fn original_label(&self, class: ClassId) -> usize {
        self.original_label[class]
    }

    /// Task index (0-based) owning `class`.
    pub fn task_of_class(&self, class: ClassId) -> Option<usize> {
        self.tasks.iter().position(|t| t.class_labels.contains(&class))
    }

    /// Class id to 0-based task index, for every class in the stream.
    pub fn class_to_task(&self) -> BTreeMap<ClassId, usize> {
        self.tasks.iter().enumerate().flat_map(|(i, t)| t.class_labels.iter().map(move |&c| (c, i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(v: f64) -> Image {
        Image::new(ImageShape::new(2, 2, 1), vec![v; 4]).unwrap()
    }

    #[test]
    fn image_range_is_enforced() {
        assert!(Image::new(ImageShape::new(1, 2, 1), vec![0.0, 1.2]).is_err());
        assert!(Image::new(ImageShape::new(1, 2, 1), vec![0.0]).is_err());
        assert!(Image::new(ImageShape::new(1, 2, 1), vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn duplicate_pool_ids_rejected() {
        let a = UnlabeledItem { image: img(0.1), source_id: "a".into() };
        assert!(UnlabeledPool::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn stream_requires_contiguous_blocks() {
        let ex = |label| LabeledExample { image: img(0.5), label, source_id: format!("{label}") };
        let t1 = Task { task_id: 1, class_labels: [0, 1].into(), train: vec![ex(0), ex(1)], val: vec![], test: vec![] };
        let t2 = Task { task_id: 2, class_labels: [3, 4].into(), train: vec![], val: vec![], test: vec![] };
        assert!(TaskStream::new(vec![t1.clone(), t2], vec![0; 4]).is_err());
        let t2 = Task { task_id: 2, class_labels: [2, 3].into(), train: vec![], val: vec![], test: vec![] };
        let s = TaskStream::new(vec![t1, t2], vec![5, 6, 7, 8]).unwrap();
        assert_eq!(s.task_of_class(3), Some(1));
        assert_eq!(s.original_label(2), 7);
    }

    #[test]
    fn augmentation_without_shift_or_flip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = ImageShape::new(3, 3, 1);
        let mut b = Array2::from_shape_fn((2, 9), |(i, j)| (i * 9 + j) as f64 / 20.0);
        let orig = b.clone();
        augment_batch(&mut b, shape, 0, false, &mut rng);
        assert_eq!(b, orig);
    }
}
