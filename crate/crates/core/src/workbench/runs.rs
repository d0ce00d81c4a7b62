//! Composite runs used by the command-line tool: teacher training and the
//! loss-ablation sweep.

use serde::{Deserialize, Serialize};

use crate::distill::{train_distill, DistillConfig, LossWeights, TrainReport};
use crate::error::Result;
use crate::evaluation::{evaluate, RetrievalMetrics};
use crate::model::{AblationSet, DualEncoder, ModuleKind};
use crate::pruning::{make_width_plan, PruneTarget, StageConfig};
use crate::scalar::Scalar;
use crate::scoring::build_cost_tables;

use super::config::RunConfig;
use super::data::Dataset;

/// Initializes the configured teacher and trains it contrastively on the
/// training split.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset) -> Result<(DualEncoder<f64>, TrainReport)> {
    let model_cfg = cfg.teacher_config(&data.spec);
    let init = DualEncoder::init(&model_cfg)?;
    train_distill(&init, None, &data.train, Some(&data.val), &cfg.teacher_train.itc_only())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAblationRow {
    pub label: String,
    pub weights: LossWeights,
    pub param_count: usize,
    pub metrics: RetrievalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAblation {
    pub target: PruneTarget,
    pub teacher_hash: String,
    pub student_hash: String,
    /// Width-pruned student before any retraining.
    pub pruned_metrics: RetrievalMetrics,
    pub rows: Vec<LossAblationRow>,
}

/// The full objective followed by each distillation term switched off, then
/// contrastive training alone.
pub fn loss_variants(full: LossWeights) -> Vec<(&'static str, LossWeights)> {
    vec![
        ("Full", full),
        ("w/o L_sim", LossWeights { alpha: 0.0, ..full }),
        ("w/o L_feat", LossWeights { beta: 0.0, ..full }),
        ("w/o L_hidn", LossWeights { gamma: 0.0, ..full }),
        ("w/o Distillation", LossWeights::ITC_ONLY),
    ]
}

/// Width-prunes `teacher` once by MoPE, then retrains copies of the student
/// with each loss variant under the same budget and seed.
pub fn run_loss_ablation<S: Scalar>(
    teacher: &DualEncoder<S>,
    data: &Dataset,
    target: &PruneTarget,
    cfg: &StageConfig,
) -> Result<LossAblation> {
    let width_only = PruneTarget {
        vision: crate::pruning::TowerTarget { depth: None, ..target.vision },
        text: crate::pruning::TowerTarget { depth: None, ..target.text },
        ..*target
    };
    let score = cfg.score.clone().with_kinds(&[ModuleKind::Head, ModuleKind::NeuronGroup]);
    let scored = build_cost_tables(teacher, &data.val, &score)?;
    let plan = make_width_plan(&scored.model, &scored.tables, &width_only)?;
    let student = plan.apply(&scored.model)?;
    let ks = &cfg.score.objective.ks;
    let pruned_metrics = evaluate(&student, &data.val, &AblationSet::new(), ks)?;
    let mut rows = Vec::new();
    for (label, weights) in loss_variants(cfg.distill.weights) {
        let dc = DistillConfig {
            weights,
            ..cfg.distill.clone()
        };
        let (trained, _) = train_distill(&student, Some(teacher), &data.train, None, &dc)?;
        rows.push(LossAblationRow {
            label: label.to_string(),
            weights,
            param_count: trained.param_count(),
            metrics: evaluate(&trained, &data.val, &AblationSet::new(), ks)?,
        });
    }
    Ok(LossAblation {
        target: width_only,
        teacher_hash: teacher.hash(),
        student_hash: student.hash(),
        pruned_metrics,
        rows,
    })
}
