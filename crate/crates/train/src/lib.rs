//! Desk-scale semi-supervised segmentation on synthetic scenes: a tiny
//! feature extractor with hand-written gradients, weak/strong augmentation,
//! derivative-label-propagation pseudo-labels and a momentum network.

pub mod augment;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod momentum;
pub mod scene;
pub mod study;
pub mod trainer;

pub use augment::{augment, AugmentMode, AugmentParams};
pub use config::{Ablation, BatchSchedule, Toggles, TrainConfig};
pub use error::{TrainError, TrainResult};
pub use metrics::{evaluate_miou, Confusion, MiouReport};
pub use model::{Shape, ToyModel};
pub use momentum::{momentum_update, MomentumState};
pub use scene::{generate_synthetic_scene, SceneLayout, SceneParams, SyntheticScene};
pub use study::{ablation_study, operator_study, StudyRow};
pub use trainer::{generate_dataset, train, Dataset, EpochMetrics, RunArtifacts};
