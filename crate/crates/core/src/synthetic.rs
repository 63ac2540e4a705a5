//! Seeded toy image data: a labeled dataset of blob-pattern classes and an
//! unlabeled pool mixing fresh draws of those classes with unseen ones.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledDataset, LabeledExample, UnlabeledItem, UnlabeledPool};
use crate::error::{Error, Result};
use crate::nn::ImageShape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub prototypes_per_class: usize,
    pub blobs_per_prototype: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Unlabeled draws from each labeled class.
    pub pool_per_class: usize,
    /// Classes that only ever appear in the pool.
    pub distractor_classes: usize,
    pub pool_per_distractor: usize,
    /// Maximum shift in pixels applied to every draw.
    pub max_shift: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            height: 12,
            width: 12,
            prototypes_per_class: 3,
            blobs_per_prototype: 3,
            train_per_class: 200,
            test_per_class: 100,
            pool_per_class: 200,
            distractor_classes: 10,
            pool_per_distractor: 200,
            max_shift: 1,
            noise_std: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.prototypes_per_class == 0 || self.blobs_per_prototype == 0 {
            return Err(Error::config("synthetic data needs at least one class, prototype and blob"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("synthetic images must be at least 4x4"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synthetic classes need train and test examples"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Generated data. `pool_classes[i]` is the hidden class of pool item `i`,
/// with distractors numbered after the labeled classes.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    pub pool: UnlabeledPool,
    pub pool_classes: Vec<usize>,
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amplitude: f64,
}

fn prototype<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Vec<Blob> {
    (0..cfg.blobs_per_prototype)
        .map(|_| Blob {
            cy: rng.random_range(1.5..cfg.height as f64 - 2.5),
            cx: rng.random_range(1.5..cfg.width as f64 - 2.5),
            sigma: rng.random_range(0.9..2.0),
            amplitude: rng.random_range(0.5..1.0),
        })
        .collect()
}

fn render<R: Rng + ?Sized>(cfg: &SyntheticConfig, blobs: &[Blob], noise: &Normal<f64>, rng: &mut R) -> Image {
    let s = cfg.max_shift as i64;
    let dy = rng.random_range(-s..=s) as f64;
    let dx = rng.random_range(-s..=s) as f64;
    let contrast = rng.random_range(0.7..1.1);
    let offset = rng.random_range(-0.05..0.05);
    let mut pixels = Vec::with_capacity(cfg.height * cfg.width);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let mut v = 0.0;
            for b in blobs {
                let d2 = (y as f64 - b.cy - dy).powi(2) + (x as f64 - b.cx - dx).powi(2);
                v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            pixels.push((contrast * v.min(1.0) + offset + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    Image::new(cfg.shape(), pixels).expect("rendered pixels are clamped")
}

fn draw<R: Rng + ?Sized>(cfg: &SyntheticConfig, protos: &[Vec<Blob>], noise: &Normal<f64>, rng: &mut R) -> Image {
    let p = &protos[rng.random_range(0..protos.len())];
    render(cfg, p, noise, rng)
}

/// Generates the labeled dataset and the unlabeled pool from `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let total = cfg.classes + cfg.distractor_classes;
    let protos: Vec<Vec<Vec<Blob>>> =
        (0..total).map(|_| (0..cfg.prototypes_per_class).map(|_| prototype(cfg, &mut rng)).collect()).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, p) in protos.iter().enumerate().take(cfg.classes) {
        for i in 0..cfg.train_per_class {
            train.push(LabeledExample { image: draw(cfg, p, &noise, &mut rng), label: c, source_id: format!("train-{c}-{i}") });
        }
        for i in 0..cfg.test_per_class {
            test.push(LabeledExample { image: draw(cfg, p, &noise, &mut rng), label: c, source_id: format!("test-{c}-{i}") });
        }
    }

    let mut pool: Vec<(usize, Image)> = Vec::new();
    for (c, p) in protos.iter().enumerate() {
        let n = if c < cfg.classes { cfg.pool_per_class } else { cfg.pool_per_distractor };
        for _ in 0..n {
            pool.push((c, draw(cfg, p, &noise, &mut rng)));
        }
    }
    pool.shuffle(&mut rng);
    let pool_classes = pool.iter().map(|(c, _)| *c).collect();
    let items = pool.into_iter().enumerate().map(|(i, (_, image))| UnlabeledItem { image, source_id: format!("pool-{i:06}") }).collect();

    let dataset = LabeledDataset { shape: cfg.shape(), class_count: cfg.classes, train, test };
    dataset.validate()?;
    Ok(SyntheticData { dataset, pool: UnlabeledPool::new(items)?, pool_classes })
}
