//! Configuration, datasets, file formats and experiment commands.

pub mod config;
pub mod datasets;
pub mod experiment;
pub mod formats;

pub use config::{EvalSpec, ExperimentConfig, MetricKind, ModelSpec};
pub use datasets::{load_dataset, reference_sample, Dataset, DatasetKind, DatasetSpec, LinearTruth, Normalization};
