//! Offline meta-reinforcement learning with adversarial data augmentation
//! for task-representation learning.
//!
//! The pipeline runs in stages: collect offline data per training task,
//! fit per-task dynamics ensembles, jointly train a transition encoder and an
//! adversarial data-collection policy inside the learned models, train a
//! context-conditioned policy on frozen embeddings, and evaluate on seen and
//! unseen tasks.

pub mod advpolicy;
pub mod datagen;
pub mod dynamics;
pub mod envsuite;
pub mod error;
pub mod evalproto;
pub mod metapolicy;
pub mod orchestrate;
pub mod rng;
pub mod sac;
pub mod taskrep;

pub use envsuite::{make_env, Environment, Family, TaskSet, TaskSpec};
pub use error::{Error, Result};
