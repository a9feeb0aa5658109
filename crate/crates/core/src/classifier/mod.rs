//! Image classification: data, models, training and experiment drivers.

pub mod data;
pub mod experiments;
pub mod model;
pub mod train;

pub use data::{load_dataset, patchify, unpatchify, DataSource, Dataset, DatasetSpec};
pub use experiments::{grid_csv, run_grid, GridRow, GRID_HEADER};
pub use model::{Classifier, ClassifierConfig, ModelKind};
pub use train::{train, RunManifest, TrainConfig};
