//! Metrics, fold plans, training loops and two-sample statistics.

pub mod folds;
pub mod metrics;
pub mod stats;
pub mod train;

pub use folds::{kfold_plan, FoldPlan};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use train::{cross_eval, cross_validate, cross_validate_threaded, evaluate, train_model, CvResult, TrainConfig};
