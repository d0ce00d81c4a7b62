//! Markdown and CSV tables rendered from stored artifacts only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::RetrievalMetrics;
use crate::pruning::Comparison;

use super::runs::LossAblation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Section {
    Strategies,
    Losses,
}

impl Section {
    pub fn artifact(self) -> &'static str {
        match self {
            Section::Strategies => "comparison.json",
            Section::Losses => "loss_ablation.json",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub comparison: Option<Comparison>,
    pub loss_ablation: Option<LossAblation>,
}

const METRIC_HEADERS: [&str; 7] = ["TR@1", "TR@5", "TR@10", "IR@1", "IR@5", "IR@10", "Recall Mean"];

fn metric_cells(m: &RetrievalMetrics) -> Vec<String> {
    let at = |map: &std::collections::BTreeMap<usize, f64>, k| map.get(&k).map_or("-".to_string(), |v| v.to_string());
    let mut cells: Vec<String> = [1, 5, 10].iter().map(|&k| at(&m.tr_at, k)).collect();
    cells.extend([1, 5, 10].iter().map(|&k| at(&m.ir_at, k)));
    cells.push(m.recall_mean.to_string());
    cells
}

fn headers(lead: &[&str]) -> Vec<String> {
    lead.iter().chain(METRIC_HEADERS.iter()).map(|s| s.to_string()).collect()
}

/// Strategy × metric table, best first.
pub fn strategy_table(c: &Comparison) -> Result<Table> {
    if c.rows.is_empty() {
        return Err(Error::Usage("comparison has no strategies".into()));
    }
    let rows = c
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.rank.to_string(),
                r.variant.framework.to_string(),
                r.variant.strategy.to_string(),
                r.param_count.to_string(),
            ];
            row.extend(metric_cells(&r.metrics));
            row
        })
        .collect();
    Ok(Table {
        title: "Layer selection and pruning framework".into(),
        headers: headers(&["Rank", "Framework", "Strategy", "Params"]),
        rows,
    })
}

/// Loss-ablation × metric table, in the fixed variant order.
pub fn loss_ablation_table(l: &LossAblation) -> Result<Table> {
    if l.rows.is_empty() {
        return Err(Error::Usage("loss ablation has no rows".into()));
    }
    let mut rows = vec![{
        let mut row = vec!["Pruned, no retraining".to_string(), "-".to_string()];
        row.extend(metric_cells(&l.pruned_metrics));
        row
    }];
    rows.extend(l.rows.iter().map(|r| {
        let mut row = vec![r.label.clone(), r.param_count.to_string()];
        row.extend(metric_cells(&r.metrics));
        row
    }));
    Ok(Table {
        title: "Distillation loss ablation".into(),
        headers: headers(&["Objective", "Params"]),
        rows,
    })
}

/// Tables for the requested sections; a missing artifact is an error that
/// lists every gap.
pub fn build_report(inputs: &ReportInputs, sections: &[Section]) -> Result<Vec<Table>> {
    if sections.is_empty() {
        return Err(Error::Usage("no report sections requested".into()));
    }
    let gaps: Vec<String> = sections
        .iter()
        .filter(|s| match s {
            Section::Strategies => inputs.comparison.is_none(),
            Section::Losses => inputs.loss_ablation.is_none(),
        })
        .map(|s| s.artifact().to_string())
        .collect();
    if !gaps.is_empty() {
        return Err(Error::Report(gaps));
    }
    sections
        .iter()
        .map(|s| match s {
            Section::Strategies => strategy_table(inputs.comparison.as_ref().expect("checked")),
            Section::Losses => loss_ablation_table(inputs.loss_ablation.as_ref().expect("checked")),
        })
        .collect()
}

pub fn render_markdown(tables: &[Table]) -> String {
    let mut out = String::from("# Pruning report\n");
    for t in tables {
        out.push_str(&format!("\n## {}\n\n", t.title));
        out.push_str(&format!("| {} |\n", t.headers.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(t.headers.len())));
        for r in &t.rows {
            out.push_str(&format!("| {} |\n", r.join(" | ")));
        }
    }
    out
}

/// One CSV document: each row is prefixed by its table title.
pub fn render_csv(tables: &[Table]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let io = |e: csv::Error| Error::Report(vec![format!("csv: {e}")]);
    for t in tables {
        let mut head = vec!["table".to_string()];
        head.extend(t.headers.iter().cloned());
        w.write_record(&head).map_err(io)?;
        for r in &t.rows {
            let mut row = vec![t.title.clone()];
            row.extend(r.iter().cloned());
            w.write_record(&row).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(vec![format!("csv: {e}")]))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_sections_is_a_usage_error() {
        assert!(matches!(build_report(&ReportInputs::default(), &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn missing_artifacts_are_listed() {
        match build_report(&ReportInputs::default(), &[Section::Strategies, Section::Losses]) {
            Err(Error::Report(gaps)) => assert_eq!(gaps.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
