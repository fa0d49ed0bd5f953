//! Weighted multi-task loss, stage plans and progressive fine-tuning.

mod loss;
mod optim;
mod plan;
mod trainer;

pub use loss::{multitask_loss, LossBreakdown, LossWeights, Targets};
pub use optim::{AdamW, AdamWConfig};
pub use plan::{apply_stage, full_finetune_plan, make_default_stage_plan, DefaultPlanConfig, Stage, StagePlan};
pub use trainer::{
    evaluate, evaluate_outputs, loss_and_gradients, predict, run_progressive_finetune, run_progressive_finetune_with,
    EpochMetrics, FinetuneConfig, FinetuneOutcome, StageResult, TaskData,
};
