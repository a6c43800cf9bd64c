//! End-to-end plumbing on synthetic data: dataset generation, training,
//! evaluation, ablation tables and diagnostics.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod eval;
pub mod gradsuite;
pub mod image;
pub mod synth;
pub mod train;

pub use ablate::{ablate, AblationResult};
pub use config::{DecodeMode, RunConfig};
pub use dataset::{generate_dataset, Dataset, DatasetMeta, Split};
pub use eval::{evaluate_split, predict_split};
pub use image::RgbImage;
pub use synth::SceneConfig;
pub use train::{load_model, train, TrainOutcome};
