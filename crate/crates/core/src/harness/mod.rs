//! Experiment orchestration: configuration, seeded runs, checkpoints,
//! metrics and ablation grids.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod trainer;

pub use ablation::{load_runs, run_ablation, AblationReport, CellSummary, Grid, SeedResult};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config, parse_config_from, AlgorithmKind, ExperimentConfig};
pub use metrics::{emit_plot_data, read_metrics, MetricsRecord, RunSeries};
pub use trainer::{resume_training, run_training, run_training_until, RunOutcome, TrainingState};
