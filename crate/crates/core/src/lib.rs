//! Logit distillation with a G-Ghost student backbone, a small CPU training
//! engine, dataset handling, evaluation metrics and complexity accounting.

pub mod backbone;
pub mod complexity;
pub mod data;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod train;

pub use backbone::{build_student, build_teacher, GGhostStageSpec, StudentConfig, TeacherConfig};
pub use complexity::{analyze, crosscheck_stage, reduction_ratios, ComplexityReport};
pub use data::{scan_and_split, Dataset, DatasetManifest, InMemoryDataset};
pub use graph::{LayerGraph, LayerKind};
pub use loss::{DistillConfig, LogitBatch, LossBreakdown};
pub use metrics::{evaluate, top_k_accuracy, EvalReport};
pub use nn::Network;
pub use train::{train, train_step, TrainConfig, TrainState};
