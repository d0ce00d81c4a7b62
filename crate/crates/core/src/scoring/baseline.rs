use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{group_range, DualEncoder, ModuleId, ModuleKind};
use crate::scalar::Scalar;
use crate::workbench::data::Split;

use super::saliency::saliency;
use super::tables::{module_ids, ScoreConfig, ScoreEntry, Scorer};

/// How module importance is measured. Positional metrics only rank layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMetric {
    Mope,
    Magnitude,
    LossGradient,
    EveryOther,
    TopLayers,
    BottomLayers,
}

impl ImportanceMetric {
    pub const ALL: [ImportanceMetric; 6] = [
        ImportanceMetric::Mope,
        ImportanceMetric::Magnitude,
        ImportanceMetric::LossGradient,
        ImportanceMetric::EveryOther,
        ImportanceMetric::TopLayers,
        ImportanceMetric::BottomLayers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImportanceMetric::Mope => "mope",
            ImportanceMetric::Magnitude => "magnitude",
            ImportanceMetric::LossGradient => "loss-gradient",
            ImportanceMetric::EveryOther => "every-other",
            ImportanceMetric::TopLayers => "top-layers",
            ImportanceMetric::BottomLayers => "bottom-layers",
        }
    }

    pub fn is_positional(self) -> bool {
        matches!(
            self,
            ImportanceMetric::EveryOther | ImportanceMetric::TopLayers | ImportanceMetric::BottomLayers
        )
    }

    pub fn supports(self, kind: ModuleKind) -> bool {
        match self {
            ImportanceMetric::Mope | ImportanceMetric::LossGradient => true,
            ImportanceMetric::Magnitude => kind != ModuleKind::Layer,
            _ => kind == ModuleKind::Layer,
        }
    }
}

impl fmt::Display for ImportanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImportanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown strategy `{s}`")))
    }
}

/// Positional score of layer `l` out of `n`; lower scores are removed first.
/// EveryOther drops odd layers before even ones, TopLayers drops from the
/// top, BottomLayers from the bottom.
pub fn positional_score(metric: ImportanceMetric, l: usize, n: usize) -> Option<f64> {
    match metric {
        ImportanceMetric::EveryOther => Some(if l % 2 == 1 { 0.0 } else { 1.0 }),
        ImportanceMetric::TopLayers => Some((n - 1 - l) as f64),
        ImportanceMetric::BottomLayers => Some(l as f64),
        _ => None,
    }
}

fn sq_norm_cols<S: Scalar>(t: &crate::numerics::Tensor<S>, cols: std::ops::Range<usize>) -> f64 {
    (0..t.rows())
        .flat_map(|r| t.row(r)[cols.clone()].iter())
        .map(|x| x.as_f64().powi(2))
        .sum()
}

fn sq_norm_rows<S: Scalar>(t: &crate::numerics::Tensor<S>, rows: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|r| t.row(r).iter()).map(|x| x.as_f64().powi(2)).sum()
}

/// L2 norm of a head's `W_q/W_k/W_v` columns and `W_o` rows, or of a
/// neuron group's `W_1` columns and `W_2` rows.
pub fn magnitude<S: Scalar>(model: &DualEncoder<S>, id: ModuleId) -> Result<f64> {
    let tower = model.tower(id.encoder());
    let w = tower
        .weights
        .layers
        .get(id.layer())
        .ok_or_else(|| Error::Id(format!("{id}: layer out of range")))?;
    let arch = &tower.arch.layers[id.layer()];
    let sq = match id {
        ModuleId::Head { head, .. } => {
            if head >= arch.heads.len() {
                return Err(Error::Id(format!("{id}: head out of range")));
            }
            let dh = model.config.d_head();
            let c = head * dh..(head + 1) * dh;
            sq_norm_cols(&w.w_q, c.clone())
                + sq_norm_cols(&w.w_k, c.clone())
                + sq_norm_cols(&w.w_v, c.clone())
                + sq_norm_rows(&w.w_o, c)
        }
        ModuleId::NeuronGroup { group, groups, .. } => {
            if groups == 0 || groups > arch.neurons || group >= groups {
                return Err(Error::Id(format!("{id}: invalid group")));
            }
            let r = group_range(arch.neurons, groups, group);
            sq_norm_cols(&w.w_1, r.clone()) + sq_norm_rows(&w.w_2, r)
        }
        ModuleId::Layer { .. } => {
            return Err(Error::Usage("magnitude does not rank whole layers".into()));
        }
    };
    Ok(sq.sqrt())
}

/// Scores every module of `kind` under `metric`; higher means more
/// important. `split` is required for data-driven metrics.
pub fn baseline_importance<S: Scalar>(
    model: &DualEncoder<S>,
    metric: ImportanceMetric,
    kind: ModuleKind,
    split: Option<&Split>,
    cfg: &ScoreConfig,
) -> Result<Vec<ScoreEntry>> {
    if !metric.supports(kind) {
        return Err(Error::Usage(format!("{metric} cannot rank {kind:?} modules")));
    }
    let ids = module_ids(model, kind, cfg.n_groups);
    let need_split = || split.ok_or_else(|| Error::Usage(format!("{metric} needs an evaluation split")));
    let scores: Vec<f64> = match metric {
        ImportanceMetric::Mope => {
            return Scorer::new(model, need_split()?, &cfg.objective)?.score_all(&ids, cfg.workers);
        }
        ImportanceMetric::Magnitude => ids.iter().map(|&id| magnitude(model, id)).collect::<Result<_>>()?,
        ImportanceMetric::LossGradient => {
            let s = saliency(model, need_split()?, cfg.grad_batch)?;
            ids.iter()
                .map(|id| {
                    let (enc, l) = (id.encoder(), id.layer());
                    let neurons = &s.neurons.get(enc)[l];
                    let heads = &s.heads.get(enc)[l];
                    match *id {
                        ModuleId::Head { head, .. } => heads[head],
                        ModuleId::NeuronGroup { group, groups, .. } => {
                            neurons[group_range(neurons.len(), groups, group)].iter().sum()
                        }
                        ModuleId::Layer { .. } => heads.iter().sum::<f64>() + neurons.iter().sum::<f64>(),
                    }
                })
                .collect()
        }
        _ => ids
            .iter()
            .map(|id| {
                let n = model.tower(id.encoder()).arch.n_layers();
                positional_score(metric, id.layer(), n).unwrap()
            })
            .collect(),
    };
    Ok(ids.into_iter().zip(scores).map(|(id, score)| ScoreEntry { id, score }).collect())
}

/// Ids ordered from first-to-remove to last: ascending score, ties by
/// ascending (encoder, layer, kind, index).
pub fn removal_order(entries: &[ScoreEntry]) -> Vec<ModuleId> {
    let mut v: Vec<&ScoreEntry> = entries.iter().collect();
    v.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.id.tie_key().cmp(&b.id.tie_key())));
    v.into_iter().map(|e| e.id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Encoder;

    #[test]
    fn every_other_keeps_even_layers() {
        let entries: Vec<ScoreEntry> = (0..6)
            .map(|layer| ScoreEntry {
                id: ModuleId::Layer {
                    encoder: Encoder::Vision,
                    layer,
                },
                score: positional_score(ImportanceMetric::EveryOther, layer, 6).unwrap(),
            })
            .collect();
        let removed: Vec<usize> = removal_order(&entries)[..3].iter().map(|id| id.layer()).collect();
        assert_eq!(removed, vec![1, 3, 5]);
    }

    #[test]
    fn positional_metrics_only_rank_layers() {
        assert!(!ImportanceMetric::TopLayers.supports(ModuleKind::Head));
        assert!(!ImportanceMetric::Magnitude.supports(ModuleKind::Layer));
        assert!(ImportanceMetric::LossGradient.supports(ModuleKind::Layer));
    }

    #[test]
    fn names_round_trip() {
        for m in ImportanceMetric::ALL {
            assert_eq!(m.name().parse::<ImportanceMetric>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
