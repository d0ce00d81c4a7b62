use std::fmt;

use serde::{Deserialize, Serialize};

use crate::distill::{train_distill, DistillConfig, TrainReport};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RetrievalMetrics};
use crate::model::{AblationSet, DualEncoder, Encoder, ModuleKind};
use crate::scalar::Scalar;
use crate::scoring::{build_cost_tables, CostTables, ImportanceMetric, ScoreConfig, Scored};
use crate::workbench::data::{Dataset, Split};

use super::plan::{make_depth_plan, make_width_plan, PruneTarget, PruningPlan};

/// Order in which width and depth are pruned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    /// Fine-tuning stage: prune width, retrain, rescore layers on the
    /// retrained model, prune depth, retrain.
    WidthFirstThenDepth,
    /// Pre-training stage: score everything once, prune once, retrain once.
    WidthAndDepth,
    /// Reverse order of the fine-tuning stage; only used for comparisons.
    DepthFirstThenWidth,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::WidthFirstThenDepth => "width-first-then-depth",
            Framework::WidthAndDepth => "width-and-depth",
            Framework::DepthFirstThenWidth => "depth-first-then-width",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Finetune,
    Pretrain,
}

impl Stage {
    pub fn framework(self) -> Framework {
        match self {
            Stage::Finetune => Framework::WidthFirstThenDepth,
            Stage::Pretrain => Framework::WidthAndDepth,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Stage::Finetune),
            "pretrain" => Ok(Stage::Pretrain),
            _ => Err(Error::Usage(format!("unknown stage `{s}` (expected finetune or pretrain)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Scoring of heads and neuron groups (its `metric` ranks width).
    pub score: ScoreConfig,
    /// Ranks layers for depth pruning.
    pub strategy: ImportanceMetric,
    /// Retraining after the first (or only) pruning step.
    pub distill: DistillConfig,
    /// Retraining after the second pruning step; defaults to `distill`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_distill: Option<DistillConfig>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            score: ScoreConfig::default(),
            strategy: ImportanceMetric::Mope,
            distill: DistillConfig::default(),
            second_distill: None,
        }
    }
}

impl StageConfig {
    pub fn second_distill(&self) -> &DistillConfig {
        self.second_distill.as_ref().unwrap_or(&self.distill)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub plan_hash: String,
    pub param_count: usize,
    /// Validation metrics straight after surgery.
    pub pruned_metrics: RetrievalMetrics,
    pub train: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub framework: Framework,
    pub strategy: ImportanceMetric,
    pub target: PruneTarget,
    pub teacher_hash: String,
    pub teacher_metrics: RetrievalMetrics,
    pub teacher_param_count: usize,
    pub tables: Vec<CostTables>,
    pub plans: Vec<PruningPlan>,
    pub phases: Vec<PhaseReport>,
    pub student_hash: String,
    pub param_count: usize,
    pub final_metrics: RetrievalMetrics,
}

#[derive(Clone, Debug)]
pub struct PipelineRun<S> {
    pub student: DualEncoder<S>,
    pub report: PipelineReport,
}

fn width_kinds(target: &PruneTarget) -> Vec<ModuleKind> {
    let mut kinds = Vec::new();
    let budget = target.param_budget.is_some();
    if budget || Encoder::BOTH.iter().any(|&e| target.tower(e).width < 1.0) {
        kinds.push(ModuleKind::Head);
    }
    if budget || Encoder::BOTH.iter().any(|&e| target.tower(e).ffn_width() < 1.0) {
        kinds.push(ModuleKind::NeuronGroup);
    }
    kinds
}

fn changes_depth<S: Scalar>(model: &DualEncoder<S>, target: &PruneTarget) -> bool {
    Encoder::BOTH
        .iter()
        .any(|&e| target.tower(e).depth.is_some_and(|k| k < model.tower(e).arch.n_layers()))
}

/// Layer table for `strategy`, or `None` when the strategy is positional or
/// no layer is removed.
fn layer_tables<S: Scalar>(
    model: &DualEncoder<S>,
    val: &Split,
    target: &PruneTarget,
    cfg: &StageConfig,
) -> Result<Option<CostTables>> {
    if cfg.strategy.is_positional() || !changes_depth(model, target) {
        return Ok(None);
    }
    let score = cfg.score.clone().with_kinds(&[ModuleKind::Layer]).with_metric(cfg.strategy);
    Ok(Some(build_cost_tables(model, val, &score)?.tables))
}

struct Pipeline<'a, S: Scalar> {
    teacher: &'a DualEncoder<S>,
    data: &'a Dataset,
    target: &'a PruneTarget,
    cfg: &'a StageConfig,
    tables: Vec<CostTables>,
    plans: Vec<PruningPlan>,
    phases: Vec<PhaseReport>,
}

impl<'a, S: Scalar> Pipeline<'a, S> {
    fn width_scored(&mut self, model: &DualEncoder<S>, extra: &[ModuleKind]) -> Result<Scored<S>> {
        let mut kinds = width_kinds(self.target);
        kinds.extend_from_slice(extra);
        let score = self.cfg.score.clone().with_kinds(&kinds);
        let scored = build_cost_tables(model, &self.data.val, &score)?;
        self.tables.push(scored.tables.clone());
        Ok(scored)
    }

    fn width_step(&mut self, model: &DualEncoder<S>) -> Result<(PruningPlan, DualEncoder<S>)> {
        let scored = self.width_scored(model, &[])?;
        let plan = make_width_plan(&scored.model, &scored.tables, self.target)?;
        let pruned = plan.apply(&scored.model)?;
        Ok((plan, pruned))
    }

    fn depth_step(&mut self, model: &DualEncoder<S>) -> Result<(PruningPlan, DualEncoder<S>)> {
        let tables = layer_tables(model, &self.data.val, self.target, self.cfg)?;
        let plan = make_depth_plan(model, tables.as_ref(), self.target, self.cfg.strategy)?;
        if let Some(t) = tables {
            self.tables.push(t);
        }
        let pruned = plan.apply(model)?;
        Ok((plan, pruned))
    }

    fn retrain(
        &mut self,
        name: &str,
        plan: PruningPlan,
        student: DualEncoder<S>,
        cfg: &DistillConfig,
    ) -> Result<DualEncoder<S>> {
        let pruned_metrics = evaluate(&student, &self.data.val, &AblationSet::new(), &cfg_ks(self.cfg))?;
        let (student, train) = train_distill(&student, Some(self.teacher), &self.data.train, Some(&self.data.val), cfg)?;
        log::info!(
            "{name} phase: {} parameters, recall mean {:.4} -> {:.4}",
            plan.param_count,
            pruned_metrics.recall_mean,
            train.final_metrics.as_ref().map_or(f64::NAN, |m| m.recall_mean)
        );
        self.phases.push(PhaseReport {
            name: name.to_string(),
            plan_hash: plan.hash()?,
            param_count: plan.param_count,
            pruned_metrics,
            train,
        });
        self.plans.push(plan);
        Ok(student)
    }

    fn run(mut self, framework: Framework) -> Result<PipelineRun<S>> {
        self.target.validate()?;
        let val = &self.data.val;
        let teacher_metrics = evaluate(self.teacher, val, &AblationSet::new(), &cfg_ks(self.cfg))?;
        let second = self.cfg.second_distill().clone();
        let student = match framework {
            Framework::WidthFirstThenDepth => {
                let (plan, pruned) = self.width_step(self.teacher)?;
                let student = self.retrain("width", plan, pruned, &self.cfg.distill.clone())?;
                let (plan, pruned) = self.depth_step(&student)?;
                self.retrain("depth", plan, pruned, &second)?
            }
            Framework::DepthFirstThenWidth => {
                let (plan, pruned) = self.depth_step(self.teacher)?;
                let student = self.retrain("depth", plan, pruned, &self.cfg.distill.clone())?;
                let (plan, pruned) = self.width_step(&student)?;
                self.retrain("width", plan, pruned, &second)?
            }
            Framework::WidthAndDepth => {
                // One scoring pass: the layer table joins the width tables
                // when the strategy is MoPE, otherwise it is scored apart.
                let mope_layers = self.cfg.strategy == ImportanceMetric::Mope
                    && self.cfg.score.metric == ImportanceMetric::Mope
                    && changes_depth(self.teacher, self.target);
                let extra: &[ModuleKind] = if mope_layers { &[ModuleKind::Layer] } else { &[] };
                let scored = self.width_scored(self.teacher, extra)?;
                let layer_table = if mope_layers {
                    Some(scored.tables.clone())
                } else {
                    let t = layer_tables(&scored.model, val, self.target, self.cfg)?;
                    self.tables.extend(t.clone());
                    t
                };
                let width = make_width_plan(&scored.model, &scored.tables, self.target)?;
                let depth = make_depth_plan(&scored.model, layer_table.as_ref(), self.target, self.cfg.strategy)?;
                let plan = PruningPlan::combine(&scored.model, &width, &depth)?;
                let pruned = plan.apply(&scored.model)?;
                self.retrain("width-and-depth", plan, pruned, &self.cfg.distill.clone())?
            }
        };
        let final_metrics = match self.phases.last().and_then(|p| p.train.final_metrics.clone()) {
            Some(m) => m,
            None => evaluate(&student, val, &AblationSet::new(), &cfg_ks(self.cfg))?,
        };
        let report = PipelineReport {
            framework,
            strategy: self.cfg.strategy,
            target: *self.target,
            teacher_hash: self.teacher.hash(),
            teacher_metrics,
            teacher_param_count: self.teacher.param_count(),
            tables: self.tables,
            plans: self.plans,
            phases: self.phases,
            student_hash: student.hash(),
            param_count: student.param_count(),
            final_metrics,
        };
        Ok(PipelineRun { student, report })
    }
}

fn cfg_ks(cfg: &StageConfig) -> Vec<usize> {
    cfg.score.objective.ks.clone()
}

/// Runs one pruning framework end to end: scoring on the validation split,
/// planning, surgery, and distillation from `teacher` on the training split.
pub fn run_pipeline<S: Scalar>(
    teacher: &DualEncoder<S>,
    data: &Dataset,
    target: &PruneTarget,
    cfg: &StageConfig,
    framework: Framework,
) -> Result<PipelineRun<S>> {
    Pipeline {
        teacher,
        data,
        target,
        cfg,
        tables: Vec::new(),
        plans: Vec::new(),
        phases: Vec::new(),
    }
    .run(framework)
}

/// Width-first-then-depth with two distillation phases; the layer table is
/// rebuilt on the retrained width-pruned student.
pub fn run_finetune_pipeline<S: Scalar>(
    teacher: &DualEncoder<S>,
    data: &Dataset,
    target: &PruneTarget,
    cfg: &StageConfig,
) -> Result<PipelineRun<S>> {
    run_pipeline(teacher, data, target, cfg, Framework::WidthFirstThenDepth)
}

/// Width-and-depth: all tables on the unmodified model, one combined plan,
/// one surgery and one distillation phase with `model` as the teacher.
pub fn run_pretrain_pipeline<S: Scalar>(
    model: &DualEncoder<S>,
    data: &Dataset,
    target: &PruneTarget,
    cfg: &StageConfig,
) -> Result<PipelineRun<S>> {
    run_pipeline(model, data, target, cfg, Framework::WidthAndDepth)
}
