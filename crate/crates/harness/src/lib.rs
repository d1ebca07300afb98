//! Experiment harness: configuration, the training pipeline, evaluation
//! drivers, hyperparameter sweeps and the estimator-variance study.

pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pipeline;
pub mod rundir;
pub mod stats;
pub mod sweep;
pub mod variance;

pub use config::{EvalMode, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use eval::{cmd_eval, eval_with_agent};
pub use metrics::MetricsRecord;
pub use pipeline::{build_dataset_and_train, load_agent, run_pipeline, train_agent, Manifest, STAGES};
pub use sweep::{cmd_sweep, sweep_with_agent};
pub use variance::{cmd_variance_study, variance_with_agent};
