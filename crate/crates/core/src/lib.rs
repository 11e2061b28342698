//! Individual treatment effect estimation on directed graphs under
//! networked interference.
//!
//! A typical run simulates (or ingests) a [`Dataset`], fits a [`GiteModel`]
//! with [`fit`], then scores a split with [`eval`].

pub mod ag;
pub mod balance;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod propcheck;
pub mod train;

pub use data::{simulate, Dataset, SimConfig, SplitPart};
pub use error::{Error, Result};
pub use graph::DirectedGraph;
pub use metrics::MetricsRecord;
pub use model::{GiteModel, ModelConfig, PiEtaMode, Variant};
pub use train::{eval, fit, FitResult, TrainConfig};
