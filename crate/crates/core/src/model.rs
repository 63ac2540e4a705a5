//! The growing two-head classifier, its frozen snapshots and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Hyperparameters;
use crate::error::{Error, Result};
use crate::nn::{Backbone, BackboneConfig, ForwardCache, LinearHead};

/// Which classifier head to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Trained on class-balanced batches.
    Primary,
    /// Trained on uniformly sampled batches.
    Auxiliary,
}

impl HeadKind {
    pub const BOTH: [HeadKind; 2] = [HeadKind::Primary, HeadKind::Auxiliary];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Primary => "primary",
            HeadKind::Auxiliary => "auxiliary",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primary" => Ok(HeadKind::Primary),
            "auxiliary" => Ok(HeadKind::Auxiliary),
            other => Err(Error::usage(format!("unknown head `{other}` (expected primary or auxiliary)"))),
        }
    }
}

/// Feature extractor plus primary and auxiliary heads over all seen classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    extractor: Backbone,
    primary: LinearHead,
    auxiliary: LinearHead,
    #[serde(default)]
    in_session: bool,
}

impl ModelState {
    /// A fresh model with zero seen classes.
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let extractor = Backbone::new(config, rng)?;
        let d = extractor.feature_dim();
        Ok(Self { extractor, primary: LinearHead::empty(d), auxiliary: LinearHead::empty(d), in_session: false })
    }

    pub fn from_parts(extractor: Backbone, primary: LinearHead, auxiliary: LinearHead) -> Result<Self> {
        let d = extractor.feature_dim();
        if primary.feature_dim() != d || auxiliary.feature_dim() != d {
            return Err(Error::config("head feature dimension differs from the extractor"));
        }
        if primary.classes() != auxiliary.classes() {
            return Err(Error::config("primary and auxiliary heads cover different class counts"));
        }
        Ok(Self { extractor, primary, auxiliary, in_session: false })
    }

    pub fn seen_class_count(&self) -> usize {
        self.primary.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn extractor(&self) -> &Backbone {
        &self.extractor
    }

    pub fn head(&self, which: HeadKind) -> &LinearHead {
        match which {
            HeadKind::Primary => &self.primary,
            HeadKind::Auxiliary => &self.auxiliary,
        }
    }

    pub fn head_mut(&mut self, which: HeadKind) -> &mut LinearHead {
        match which {
            HeadKind::Primary => &mut self.primary,
            HeadKind::Auxiliary => &mut self.auxiliary,
        }
    }

    pub fn extractor_mut(&mut self) -> &mut Backbone {
        &mut self.extractor
    }

    /// One feature row per image row of `images` (`(B, H*W*C)`).
    pub fn forward_features(&self, images: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.extractor.features(images)
    }

    pub fn forward_features_cached(&self, images: &ArrayView2<f64>) -> Result<ForwardCache> {
        self.extractor.forward(images)
    }

    pub fn forward_head(&self, which: HeadKind, features: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.head(which).forward(features)
    }

    pub fn logits(&self, which: HeadKind, images: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.forward_features(images)?;
        self.forward_head(which, &f.view())
    }

    /// Adds `new_class_count` outputs to both heads.
    pub fn grow_heads<R: Rng + ?Sized>(&mut self, new_class_count: usize, rng: &mut R) -> Result<()> {
        if self.in_session {
            return Err(Error::state("cannot grow heads while a training session is running"));
        }
        if new_class_count == 0 {
            return Err(Error::usage("grow_heads needs at least one new class"));
        }
        self.primary.grow(new_class_count, rng);
        self.auxiliary.grow(new_class_count, rng);
        Ok(())
    }

    pub fn begin_session(&mut self) -> Result<()> {
        if self.in_session {
            return Err(Error::state("a session is already running"));
        }
        self.in_session = true;
        Ok(())
    }

    pub fn end_session(&mut self) {
        self.in_session = false;
    }

    pub fn in_session(&self) -> bool {
        self.in_session
    }

    pub fn take_snapshot(&self) -> Snapshot {
        let mut frozen = self.clone();
        frozen.in_session = false;
        Snapshot(Arc::new(frozen))
    }

    /// Same layout, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            extractor: self.extractor.zeros_like(),
            primary: self.primary.zeros_like(),
            auxiliary: self.auxiliary.zeros_like(),
            in_session: false,
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.extractor.tensors();
        out.extend(self.primary.tensors());
        out.extend(self.auxiliary.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.extractor.tensors_mut();
        out.extend(self.primary.tensors_mut());
        out.extend(self.auxiliary.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Splits into disjoint mutable borrows of extractor and both heads.
    pub(crate) fn parts_mut(&mut self) -> (&mut Backbone, &mut LinearHead, &mut LinearHead) {
        (&mut self.extractor, &mut self.primary, &mut self.auxiliary)
    }
}

/// Read-only copy of a finished model, shared cheaply between readers.
#[derive(Clone, Debug)]
pub struct Snapshot(Arc<ModelState>);

impl Snapshot {
    pub fn model(&self) -> &ModelState {
        &self.0
    }

    pub fn seen_class_count(&self) -> usize {
        self.0.seen_class_count()
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serialized training state. JSON floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelState,
    pub hyperparameters: Hyperparameters,
    pub master_seed: u64,
    pub session: usize,
    pub epoch: Option<usize>,
}

impl Checkpoint {
    pub fn new(model: ModelState, hyperparameters: Hyperparameters, master_seed: u64, session: usize, epoch: Option<usize>) -> Self {
        Self { format_version: CHECKPOINT_FORMAT_VERSION, model, hyperparameters, master_seed, session, epoch }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "checkpoint format version {} is not supported (expected {})",
                ck.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ImageShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (ModelState, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = BackboneConfig { input: ImageShape::new(8, 8, 1), conv_channels: vec![4, 4], feature_dim: 6 };
        (ModelState::new(cfg, &mut rng).unwrap(), rng)
    }

    #[test]
    fn heads_track_seen_classes() {
        let (mut m, mut rng) = model();
        for _ in 0..5 {
            m.grow_heads(2, &mut rng).unwrap();
        }
        let x = Array2::from_elem((3, 64), 0.5);
        assert_eq!(m.logits(HeadKind::Primary, &x.view()).unwrap().dim(), (3, 10));
        assert_eq!(m.logits(HeadKind::Auxiliary, &x.view()).unwrap().dim(), (3, 10));
    }

    #[test]
    fn growth_is_rejected_mid_session_and_for_zero() {
        let (mut m, mut rng) = model();
        assert!(matches!(m.grow_heads(0, &mut rng), Err(Error::Usage(_))));
        m.begin_session().unwrap();
        assert!(matches!(m.grow_heads(2, &mut rng), Err(Error::State(_))));
        m.end_session();
        m.grow_heads(2, &mut rng).unwrap();
    }

    #[test]
    fn grow_80_by_20() {
        let (mut m, mut rng) = model();
        m.grow_heads(80, &mut rng).unwrap();
        let old = m.head(HeadKind::Primary).weight().clone();
        m.grow_heads(20, &mut rng).unwrap();
        assert_eq!(m.seen_class_count(), 100);
        assert_eq!(m.head(HeadKind::Primary).weight().slice(ndarray::s![..80, ..]), old);
    }

    #[test]
    fn zero_features_give_equal_new_logits() {
        let (mut m, mut rng) = model();
        m.grow_heads(3, &mut rng).unwrap();
        let logits = m.forward_head(HeadKind::Primary, &Array2::zeros((1, 6)).view()).unwrap();
        assert!(logits.iter().all(|&v| v == logits[[0, 0]]));
    }

    #[test]
    fn heads_are_independent() {
        let (mut m, mut rng) = model();
        m.grow_heads(2, &mut rng).unwrap();
        let x = Array2::from_shape_fn((1, 64), |(_, j)| (j as f64) / 64.0);
        assert_ne!(m.logits(HeadKind::Primary, &x.view()).unwrap(), m.logits(HeadKind::Auxiliary, &x.view()).unwrap());
    }

    #[test]
    fn snapshot_is_frozen() {
        let (mut m, mut rng) = model();
        m.grow_heads(2, &mut rng).unwrap();
        let snap = m.take_snapshot();
        let probe = Array2::from_elem((2, 64), 0.3);
        let before = snap.model().logits(HeadKind::Primary, &probe.view()).unwrap();
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1);
        }
        assert_eq!(snap.model().logits(HeadKind::Primary, &probe.view()).unwrap(), before);
    }

    #[test]
    fn unknown_head_name_is_usage_error() {
        assert!(matches!("sideways".parse::<HeadKind>(), Err(Error::Usage(_))));
        assert_eq!("auxiliary".parse::<HeadKind>().unwrap(), HeadKind::Auxiliary);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let (mut m, mut rng) = model();
        m.grow_heads(4, &mut rng).unwrap();
        let ck = Checkpoint::new(m, Hyperparameters::default(), 42, 2, Some(7));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.model.tensors().iter().zip(ck.model.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let (m, _) = model();
        let mut ck = Checkpoint::new(m, Hyperparameters::default(), 0, 0, None);
        ck.format_version = 99;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
