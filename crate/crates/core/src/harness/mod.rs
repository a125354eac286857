//! Experiment orchestration: configuration, checkpoints, the
//! pretrain/fine-tune/evaluate pipeline and the grid runners.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod train;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{EvalConfig, LogConfig, MaskConfig, OptimizerConfig, PretrainConfig, TrainConfig};
pub use experiments::{
    ablation_cells, ablation_csv, decompose_inspect, in_domain_auc, in_domain_video_auc, inspection_csv, robustness_csv,
    robustness_trend, run_ablation, run_robustness, tiny_grad_check, tiny_grad_problem, tiny_model_config, write_ablation,
    AblationCell, AblationRow, AblationTable, LayerInspection, RobustnessRow, K_GRID, M_GRID,
};
pub use train::{
    accuracy, class_batch, detection_batch, evaluate, evaluate_set, find_metric, iterations_per_epoch, metrics_csv,
    read_grad_log, read_iterations_csv, replay_masks, run_finetune, run_pretrain, score, write_iterations_csv,
    FinetuneOutcome, Finetuner, IterationLog, Level, PretrainOutcome, RunRecord, SplitMetrics,
};
