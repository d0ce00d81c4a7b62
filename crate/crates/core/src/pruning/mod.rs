//! Pruning plans from cost tables, and the pipelines that apply them.
//!
//! Two staged pipelines are provided. The fine-tuning pipeline prunes width
//! first, retrains by distillation, rescores layers on the retrained model,
//! then prunes depth and retrains again. The pre-training pipeline scores
//! every module kind on the unmodified model, applies one combined plan and
//! retrains once.

mod compare;
mod pipeline;
mod plan;

pub use compare::{compare_strategies, Comparison, ComparisonRow, Variant};
pub use pipeline::{
    run_finetune_pipeline, run_pipeline, run_pretrain_pipeline, Framework, PhaseReport, PipelineReport, PipelineRun,
    Stage, StageConfig,
};
pub use plan::{
    arch_param_count, kept_count, make_depth_plan, make_width_plan, simulate_arch, PlanProvenance, PruneTarget,
    PruningPlan, TowerTarget, WidthMode,
};
