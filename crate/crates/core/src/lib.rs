//! Class-incremental learning with a small exemplar memory, queried
//! unlabeled data and two classifier heads, with an optional adversarial
//! training mode that keeps robustness across tasks.
//!
//! The pieces compose as follows: [`harness::build_stream`] cuts a labeled
//! dataset into tasks, [`trainer::run_stream`] trains session by session
//! (growing the heads of a [`model::ModelState`], sampling batches from the
//! [`sampling::MemoryBank`] and the [`query::QueriedPool`], and applying the
//! regularizers in [`regularizers`]), and [`inference`] scores the heads and
//! the nearest-neighbour ensemble on clean and perturbed inputs.

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod nn;
pub mod optim;
pub mod query;
pub mod regularizers;
pub mod report;
pub mod sampling;
pub mod seeds;
pub mod synthetic;
pub mod trainer;

pub use config::{
    AttackConfig, BatchSizes, CemAttack, CemConfig, Hyperparameters, LwfData, LwfKind, MethodConfig, RobustLwfKind, SessionConfig,
    TrainingMode,
};
pub use data::{ClassId, Image, LabeledDataset, LabeledExample, Task, TaskStream, UnlabeledItem, UnlabeledPool};
pub use error::{Error, Result};
pub use model::{Checkpoint, HeadKind, ModelState, Snapshot};
pub use nn::{BackboneConfig, ImageShape};
pub use query::{QueriedPool, QueryConfig, QueryMethod};
pub use sampling::MemoryBank;
pub use seeds::{Purpose, SeedTree};
pub use trainer::{run_stream, StreamConfig};
