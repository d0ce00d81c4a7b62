use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::RetrievalMetrics;
use crate::model::DualEncoder;
use crate::scalar::Scalar;
use crate::scoring::ImportanceMetric;
use crate::workbench::data::Dataset;

use super::pipeline::{run_pipeline, Framework, PipelineReport, StageConfig};
use super::plan::PruneTarget;

/// One arm of a comparison: a pruning order plus a layer-ranking strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub framework: Framework,
    pub strategy: ImportanceMetric,
}

impl Variant {
    pub fn strategy(strategy: ImportanceMetric) -> Self {
        Self {
            framework: Framework::WidthFirstThenDepth,
            strategy,
        }
    }

    pub fn framework(framework: Framework) -> Self {
        Self {
            framework,
            strategy: ImportanceMetric::Mope,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.framework, self.strategy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub variant: Variant,
    pub param_count: usize,
    pub metrics: RetrievalMetrics,
    pub student_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target: PruneTarget,
    pub teacher_hash: String,
    /// Best recall mean first; ties keep the requested order.
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<PipelineReport>,
}

impl Comparison {
    pub fn row(&self, variant: Variant) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Runs every variant from the same teacher, data, target and training
/// budget, then ranks them by final validation recall mean.
pub fn compare_strategies<S: Scalar>(
    teacher: &DualEncoder<S>,
    data: &Dataset,
    target: &PruneTarget,
    variants: &[Variant],
    cfg: &StageConfig,
) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(Error::Usage("a comparison needs at least two strategies".into()));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].contains(v) {
            return Err(Error::Usage(format!("strategy {v} listed twice")));
        }
    }
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = StageConfig {
            strategy: variant.strategy,
            ..cfg.clone()
        };
        let run = run_pipeline(teacher, data, target, &cfg, variant.framework)?;
        rows.push(ComparisonRow {
            rank: 0,
            variant,
            param_count: run.report.param_count,
            metrics: run.report.final_metrics.clone(),
            student_hash: run.report.student_hash.clone(),
        });
        reports.push(run.report);
    }
    rows.sort_by(|a, b| b.metrics.recall_mean.total_cmp(&a.metrics.recall_mean));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Comparison {
        target: *target,
        teacher_hash: teacher.hash(),
        rows,
        reports,
    })
}
