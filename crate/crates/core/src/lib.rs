//! Variable scene graphs (VSGs).
//!
//! A scene graph holds the objects of an indoor scan together with their
//! semantic classes, attributes, positions and typed relationships. This crate
//! learns, per object, how likely it is to change before the next observation:
//! whether it moves (position variability), changes state (state variability)
//! or disappears (instance variability). Predictions come from a two-layer
//! message-passing graph network trained with a masked focal loss, and feed an
//! active change-detection planner.
//!
//! Module map:
//! - [`graph`]: scene-graph data model, taxonomies, file format
//! - [`embedding`]: binary encoding, PCA compression, edge construction
//! - [`nn`]: dense MLP kernel with hand-written backward passes and Adam
//! - [`model`]: the MP-Conv network, an MLP baseline, checkpoints
//! - [`dataset`]: labels, pair augmentation, synthetic scenes, 3RScan ingestion
//! - [`training`]: focal loss, training loop, metrics
//! - [`planner`]: TSP solvers and the Coverage / VSG-Planner simulator
//! - [`par`]: data-parallel map with a sequential fallback

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod par;
pub mod planner;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
