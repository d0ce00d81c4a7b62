use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    encoder_param_count, group_range, structural_prune, DualEncoder, Encoder, EncoderArch, ModelConfig, ModuleId,
    ModuleKind,
};
use crate::scalar::Scalar;
use crate::scoring::{positional_score, removal_order, CostTables, ImportanceMetric, PerTower, ScoreEntry};
use crate::workbench::canon::{canonical_json, sha256_hex};

/// Pruning target for one tower.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerTarget {
    /// Fraction of heads kept in every layer, in `(0, 1]`.
    pub width: f64,
    /// Fraction of FFN neuron groups kept; defaults to `width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_width: Option<f64>,
    /// Layers kept; `None` keeps all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl Default for TowerTarget {
    fn default() -> Self {
        Self {
            width: 1.0,
            ffn_width: None,
            depth: None,
        }
    }
}

impl TowerTarget {
    pub fn ffn_width(&self) -> f64 {
        self.ffn_width.unwrap_or(self.width)
    }
}

/// How width is planned: uniform per-layer fractions, or a global greedy
/// pass down to a parameter budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthMode {
    Uniform,
    Budget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTarget {
    pub vision: TowerTarget,
    pub text: TowerTarget,
    /// Total parameter budget for width pruning. Excludes fractional widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_budget: Option<usize>,
}

impl PruneTarget {
    /// Same width and depth for both towers.
    pub fn uniform(width: f64, depth: Option<usize>) -> Self {
        let t = TowerTarget {
            width,
            ffn_width: None,
            depth,
        };
        Self {
            vision: t,
            text: t,
            param_budget: None,
        }
    }

    pub fn tower(&self, enc: Encoder) -> &TowerTarget {
        match enc {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
        }
    }

    pub fn mode(&self) -> WidthMode {
        if self.param_budget.is_some() {
            WidthMode::Budget
        } else {
            WidthMode::Uniform
        }
    }

    pub fn validate(&self) -> Result<()> {
        for enc in Encoder::BOTH {
            let t = self.tower(enc);
            for (name, f) in [("width", t.width), ("ffn_width", t.ffn_width())] {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("{enc} {name} {f} outside (0, 1]")));
                }
            }
            if t.depth == Some(0) {
                return Err(Error::Config(format!("{enc} depth must keep at least one layer")));
            }
            if self.param_budget.is_some() && (t.width != 1.0 || t.ffn_width() != 1.0) {
                return Err(Error::Config(
                    "set either a parameter budget or width fractions, not both".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn changes_width(&self) -> bool {
        self.param_budget.is_some()
            || Encoder::BOTH.iter().any(|&e| {
                let t = self.tower(e);
                t.width < 1.0 || t.ffn_width() < 1.0
            })
    }
}

/// Kept count for `n` items at `fraction`: round to nearest, at least one.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanProvenance {
    /// Hash of the model the ids refer to.
    pub model_hash: String,
    /// Hashes of the cost tables the plan was derived from.
    pub tables: Vec<String>,
    pub target: PruneTarget,
    pub mode: WidthMode,
    pub strategy: Option<ImportanceMetric>,
}

/// Modules to remove from one model, and what is left afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Removal order: ascending importance within each planning pass.
    pub remove: Vec<ModuleId>,
    pub arch: PerTower<EncoderArch>,
    /// Closed-form parameter count of the pruned model.
    pub param_count: usize,
    pub provenance: PlanProvenance,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.remove.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    /// Structurally prunes `model`, which must be the model the plan was
    /// made for. A nonempty plan records its hash in the result's provenance.
    pub fn apply<S: Scalar>(&self, model: &DualEncoder<S>) -> Result<DualEncoder<S>> {
        let found = model.hash();
        if found != self.provenance.model_hash {
            return Err(Error::HashMismatch {
                what: "plan model".into(),
                declared: self.provenance.model_hash.clone(),
                found,
            });
        }
        let mut out = structural_prune(model, &self.remove)?;
        if out.vision.arch != self.arch.vision || out.text.arch != self.arch.text {
            return Err(Error::Contract("pruned architecture differs from the plan".into()));
        }
        if !self.remove.is_empty() {
            out.provenance.push(format!("plan:{}", self.hash()?));
        }
        Ok(out)
    }

    /// Width and depth removals in one plan. Width removals inside layers the
    /// depth plan drops are discarded.
    pub fn combine<S: Scalar>(model: &DualEncoder<S>, width: &PruningPlan, depth: &PruningPlan) -> Result<PruningPlan> {
        if width.provenance.model_hash != depth.provenance.model_hash {
            return Err(Error::Planning("width and depth plans target different models".into()));
        }
        let dropped: BTreeSet<(Encoder, usize)> = depth
            .remove
            .iter()
            .filter(|id| id.kind() == ModuleKind::Layer)
            .map(|id| (id.encoder(), id.layer()))
            .collect();
        let mut remove: Vec<ModuleId> = width
            .remove
            .iter()
            .filter(|id| !dropped.contains(&(id.encoder(), id.layer())))
            .copied()
            .collect();
        remove.extend(depth.remove.iter().copied());
        let mut tables = width.provenance.tables.clone();
        tables.extend(depth.provenance.tables.iter().cloned());
        tables.dedup();
        finish(
            model,
            remove,
            PlanProvenance {
                model_hash: width.provenance.model_hash.clone(),
                tables,
                target: width.provenance.target,
                mode: width.provenance.mode,
                strategy: depth.provenance.strategy,
            },
        )
    }
}

/// Architecture left after removing `ids` from `model`.
pub fn simulate_arch<S: Scalar>(model: &DualEncoder<S>, ids: &[ModuleId]) -> Result<PerTower<EncoderArch>> {
    let mut out = PerTower {
        vision: model.vision.arch.clone(),
        text: model.text.arch.clone(),
    };
    for enc in Encoder::BOTH {
        let arch = model.tower(enc).arch.clone();
        let mut heads: Vec<BTreeSet<usize>> = arch.layers.iter().map(|_| BTreeSet::new()).collect();
        let mut neurons: Vec<BTreeSet<usize>> = arch.layers.iter().map(|_| BTreeSet::new()).collect();
        let mut layers = BTreeSet::new();
        for id in ids.iter().filter(|id| id.encoder() == enc) {
            let l = id.layer();
            let Some(la) = arch.layers.get(l) else {
                return Err(Error::Id(format!("{id}: layer out of range")));
            };
            match *id {
                ModuleId::Layer { .. } => {
                    layers.insert(l);
                }
                ModuleId::Head { head, .. } => {
                    if head >= la.heads.len() {
                        return Err(Error::Id(format!("{id}: head out of range")));
                    }
                    heads[l].insert(head);
                }
                ModuleId::NeuronGroup { group, groups, .. } => {
                    if groups == 0 || groups > la.neurons || group >= groups {
                        return Err(Error::Id(format!("{id}: invalid group")));
                    }
                    neurons[l].extend(group_range(la.neurons, groups, group));
                }
            }
        }
        let mut kept = Vec::new();
        for (l, la) in arch.layers.iter().enumerate() {
            if layers.contains(&l) {
                continue;
            }
            let mut la = la.clone();
            la.heads = la
                .heads
                .iter()
                .enumerate()
                .filter(|(i, _)| !heads[l].contains(i))
                .map(|(_, &h)| h)
                .collect();
            la.neurons -= neurons[l].len();
            if la.heads.is_empty() || la.neurons == 0 {
                return Err(Error::Refusal(format!("plan empties {enc} layer {l}")));
            }
            kept.push(la);
        }
        if kept.is_empty() {
            return Err(Error::Refusal(format!("plan removes every {enc} layer")));
        }
        *out.get_mut(enc) = EncoderArch { layers: kept };
    }
    Ok(out)
}

pub fn arch_param_count(cfg: &ModelConfig, arch: &PerTower<EncoderArch>) -> usize {
    encoder_param_count(cfg, Encoder::Vision, &arch.vision) + encoder_param_count(cfg, Encoder::Text, &arch.text) + 1
}

fn finish<S: Scalar>(model: &DualEncoder<S>, remove: Vec<ModuleId>, provenance: PlanProvenance) -> Result<PruningPlan> {
    let arch = simulate_arch(model, &remove)?;
    Ok(PruningPlan {
        param_count: arch_param_count(&model.config, &arch),
        arch,
        remove,
        provenance,
    })
}

/// Scores of one kind grouped by (encoder, layer), checked to cover every
/// module the model has.
fn by_layer(
    tables: &CostTables,
    kind: ModuleKind,
    expected: &PerTower<Vec<usize>>,
) -> Result<BTreeMap<(Encoder, usize), Vec<ScoreEntry>>> {
    let mut out: BTreeMap<(Encoder, usize), Vec<ScoreEntry>> = BTreeMap::new();
    for e in tables.table(kind) {
        out.entry((e.id.encoder(), e.id.layer())).or_default().push(*e);
    }
    for enc in Encoder::BOTH {
        for (l, &n) in expected.get(enc).iter().enumerate() {
            let got = out.get(&(enc, l)).map_or(0, Vec::len);
            if got != n {
                return Err(Error::Planning(format!(
                    "{kind:?} table has {got} entries for {enc} layer {l}, model needs {n}"
                )));
            }
        }
    }
    Ok(out)
}

fn head_counts<S: Scalar>(model: &DualEncoder<S>) -> PerTower<Vec<usize>> {
    let f = |enc| model.tower(enc).arch.layers.iter().map(|l| l.heads.len()).collect();
    PerTower {
        vision: f(Encoder::Vision),
        text: f(Encoder::Text),
    }
}

fn group_counts<S: Scalar>(model: &DualEncoder<S>, tables: &CostTables) -> PerTower<Vec<usize>> {
    let f = |enc| {
        model
            .tower(enc)
            .arch
            .layers
            .iter()
            .map(|l| crate::model::effective_groups(l.neurons, tables.meta.n_groups))
            .collect()
    };
    PerTower {
        vision: f(Encoder::Vision),
        text: f(Encoder::Text),
    }
}

/// Width plan from head and neuron-group tables. Uniform mode keeps the
/// `round(n·fraction)` (at least one) most important heads and groups of
/// every layer. Budget mode walks all heads and groups in ascending
/// importance and removes each one that leaves its layer nonempty, until
/// the closed-form parameter count fits the budget.
pub fn make_width_plan<S: Scalar>(model: &DualEncoder<S>, tables: &CostTables, target: &PruneTarget) -> Result<PruningPlan> {
    target.validate()?;
    let provenance = PlanProvenance {
        model_hash: model.hash(),
        tables: vec![tables.hash()?],
        target: *target,
        mode: target.mode(),
        strategy: Some(tables.meta.metric),
    };
    let mut remove = Vec::new();
    match target.param_budget {
        None => {
            let any = |f: fn(&TowerTarget) -> f64| Encoder::BOTH.iter().any(|&e| f(target.tower(e)) < 1.0);
            if any(|t| t.width) {
                let heads = by_layer(tables, ModuleKind::Head, &head_counts(model))?;
                for ((enc, _), entries) in &heads {
                    let keep = kept_count(entries.len(), target.tower(*enc).width);
                    remove.extend(removal_order(entries).into_iter().take(entries.len() - keep));
                }
            }
            if any(|t| t.ffn_width()) {
                let groups = by_layer(tables, ModuleKind::NeuronGroup, &group_counts(model, tables))?;
                for ((enc, _), entries) in &groups {
                    let keep = kept_count(entries.len(), target.tower(*enc).ffn_width());
                    remove.extend(removal_order(entries).into_iter().take(entries.len() - keep));
                }
            }
            // Group by (encoder, layer) so the plan reads layer by layer.
            remove.sort_by_key(|id| (id.encoder(), id.layer()));
        }
        Some(budget) => {
            let heads = head_counts(model);
            let groups = group_counts(model, tables);
            by_layer(tables, ModuleKind::Head, &heads)?;
            by_layer(tables, ModuleKind::NeuronGroup, &groups)?;
            let mut candidates: Vec<ScoreEntry> = tables.heads.clone();
            candidates.extend(tables.neuron_groups.iter().copied());
            let mut left_heads = heads;
            let mut left_groups = groups;
            let mut params = model.param_count_formula();
            let d = model.config.d;
            let dh = model.config.d_head();
            for id in removal_order(&candidates) {
                if params <= budget {
                    break;
                }
                let (enc, l) = (id.encoder(), id.layer());
                let la = &model.tower(enc).arch.layers[l];
                let saved = match id {
                    ModuleId::Head { .. } => {
                        let left = &mut left_heads.get_mut(enc)[l];
                        if *left == 1 {
                            continue;
                        }
                        *left -= 1;
                        4 * d * dh + 3 * dh
                    }
                    ModuleId::NeuronGroup { group, groups, .. } => {
                        let left = &mut left_groups.get_mut(enc)[l];
                        if *left == 1 {
                            continue;
                        }
                        *left -= 1;
                        group_range(la.neurons, groups, group).len() * (2 * d + 1)
                    }
                    ModuleId::Layer { .. } => unreachable!("width candidates are heads and groups"),
                };
                params -= saved;
                remove.push(id);
            }
            if params > budget {
                return Err(Error::Planning(format!(
                    "budget {budget} unreachable: width pruning bottoms out at {params} parameters"
                )));
            }
        }
    }
    finish(model, remove, provenance)
}

/// Depth plan: per tower, drop the `L − depth` lowest-priority layers under
/// `strategy`. MoPE and LossGradient read the layer table, which must have
/// been built with that metric; positional strategies need no table.
pub fn make_depth_plan<S: Scalar>(
    model: &DualEncoder<S>,
    tables: Option<&CostTables>,
    target: &PruneTarget,
    strategy: ImportanceMetric,
) -> Result<PruningPlan> {
    target.validate()?;
    if strategy == ImportanceMetric::Magnitude {
        return Err(Error::Usage("magnitude does not rank whole layers".into()));
    }
    let mut used_tables = Vec::new();
    let mut remove = Vec::new();
    for enc in Encoder::BOTH {
        let n = model.tower(enc).arch.n_layers();
        let keep = target.tower(enc).depth.unwrap_or(n);
        if keep == 0 || keep > n {
            return Err(Error::Range(format!("{enc} depth {keep} outside [1, {n}]")));
        }
        if keep == n {
            continue;
        }
        let entries: Vec<ScoreEntry> = if strategy.is_positional() {
            (0..n)
                .map(|layer| ScoreEntry {
                    id: ModuleId::Layer { encoder: enc, layer },
                    score: positional_score(strategy, layer, n).expect("positional"),
                })
                .collect()
        } else {
            let tables =
                tables.ok_or_else(|| Error::Usage(format!("strategy {strategy} needs a layer table")))?;
            if tables.meta.metric != strategy {
                return Err(Error::Usage(format!(
                    "strategy {strategy} needs a layer table scored with it, got {}",
                    tables.meta.metric
                )));
            }
            let counts = PerTower {
                vision: vec![1; model.vision.arch.n_layers()],
                text: vec![1; model.text.arch.n_layers()],
            };
            if used_tables.is_empty() {
                used_tables.push(tables.hash()?);
            }
            by_layer(tables, ModuleKind::Layer, &counts)?
                .into_iter()
                .filter(|((e, _), _)| *e == enc)
                .flat_map(|(_, v)| v)
                .collect()
        };
        remove.extend(removal_order(&entries).into_iter().take(n - keep));
    }
    finish(
        model,
        remove,
        PlanProvenance {
            model_hash: model.hash(),
            tables: used_tables,
            target: *target,
            mode: target.mode(),
            strategy: Some(strategy),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_counts_round_to_nearest_with_floor_one() {
        assert_eq!(kept_count(16, 0.375), 6);
        assert_eq!(kept_count(4, 0.5), 2);
        assert_eq!(kept_count(4, 0.1), 1);
        assert_eq!(kept_count(3, 0.5), 2);
        assert_eq!(kept_count(8, 1.0), 8);
    }

    #[test]
    fn budget_and_fraction_are_exclusive() {
        let mut t = PruneTarget::uniform(0.5, None);
        t.param_budget = Some(100);
        assert!(matches!(t.validate(), Err(Error::Config(_))));
        assert!(PruneTarget::uniform(0.0, None).validate().is_err());
        assert!(PruneTarget::uniform(1.0, Some(0)).validate().is_err());
    }
}
