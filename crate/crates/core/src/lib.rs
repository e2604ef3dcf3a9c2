//! Joint search over per-feature vocabulary sizes and embedding dimensions.
//!
//! A recommendation model reads each categorical feature through a grid of
//! embedding blocks. A policy-gradient controller picks, per training step,
//! which blocks every feature uses: either one rectangular corner of the grid
//! (a single-size embedding) or an independent row depth per column group
//! (a multi-size embedding, where frequent items get wider vectors than rare
//! ones). The controller is rewarded with a validation objective minus a
//! penalty for exceeding a parameter budget, and its converged choice is the
//! exported architecture.
//!
//! Module map:
//!
//! - [`tensor`], [`params`], [`autodiff`]: dense `f64` tensors, parameter
//!   storage with Adam, and a reverse-mode tape.
//! - [`search_space`]: block grids, lookups under a choice, and memory cost.
//! - [`multi_size`]: a standalone multi-size embedding layer.
//! - [`controller`]: the sampling policy, its baseline, and the update rule.
//! - [`reward`]: Sampled Recall@1, ROC-AUC, cost-loss.
//! - [`tasks`]: seeded synthetic retrieval and ranking datasets.
//! - [`model`], [`trainer`]: the main model and the joint search loop.
//! - [`oracle`]: exhaustive candidate sweeps used as ground truth.
//! - [`config`], [`run`]: run configuration, run directories and reports.

pub mod autodiff;
pub mod config;
pub mod controller;
pub mod error;
pub mod model;
pub mod multi_size;
pub mod oracle;
pub mod params;
pub mod reward;
pub mod run;
pub mod search_space;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{NisError, Result};
