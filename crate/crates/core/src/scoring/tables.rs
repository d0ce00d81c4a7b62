use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{metrics_from_similarity, objective_value, similarity_matrix, EvalObjective};
use crate::model::{
    effective_groups, validate_ablation, AblationSet, DualEncoder, Encoder, ModuleId, ModuleKind,
};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::workbench::canon::{canonical_json, sha256_hex};
use crate::workbench::data::Split;

use super::baseline::{baseline_importance, ImportanceMetric};
use super::saliency::{rewire_ffn, PerTower};

pub const DEFAULT_GROUPS: usize = 8;
pub const DEFAULT_GRAD_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub metric: ImportanceMetric,
    /// Neuron groups per layer (capped at the layer's neuron count).
    pub n_groups: usize,
    pub objective: EvalObjective,
    pub workers: usize,
    /// Pairs per contrastive batch when accumulating gradient saliency.
    pub grad_batch: usize,
    /// Tables to build.
    pub kinds: Vec<ModuleKind>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            metric: ImportanceMetric::Mope,
            n_groups: DEFAULT_GROUPS,
            objective: EvalObjective::default(),
            workers: 1,
            grad_batch: DEFAULT_GRAD_BATCH,
            kinds: vec![ModuleKind::Head, ModuleKind::NeuronGroup, ModuleKind::Layer],
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 {
            return Err(Error::Config("n_groups must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_kinds(mut self, kinds: &[ModuleKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }

    pub fn with_metric(mut self, metric: ImportanceMetric) -> Self {
        self.metric = metric;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: ModuleId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub metric: ImportanceMetric,
    pub objective: EvalObjective,
    pub split: String,
    pub split_hash: String,
    /// Model the head and layer tables were scored on.
    pub model_hash: String,
    pub z_full: Option<f64>,
    pub n_groups: usize,
    /// Rewired model the neuron-group table was scored on.
    pub group_model_hash: Option<String>,
    pub group_z_full: Option<f64>,
}

/// Importance per module, one table per module kind. Higher is more
/// important; entries are kept in ascending id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTables {
    pub meta: TableMeta,
    pub heads: Vec<ScoreEntry>,
    pub neuron_groups: Vec<ScoreEntry>,
    pub layers: Vec<ScoreEntry>,
}

impl CostTables {
    pub fn table(&self, kind: ModuleKind) -> &[ScoreEntry] {
        match kind {
            ModuleKind::Head => &self.heads,
            ModuleKind::NeuronGroup => &self.neuron_groups,
            ModuleKind::Layer => &self.layers,
        }
    }

    pub fn get(&self, id: &ModuleId) -> Option<f64> {
        let t = self.table(id.kind());
        t.binary_search_by(|e| e.id.cmp(id)).ok().map(|i| t[i].score)
    }

    /// Entries of one kind belonging to one tower.
    pub fn entries(&self, kind: ModuleKind, enc: Encoder) -> impl Iterator<Item = &ScoreEntry> {
        self.table(kind).iter().filter(move |e| e.id.encoder() == enc)
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

/// Every module of `kind` in the model's current architecture, ascending.
pub fn module_ids<S: Scalar>(model: &DualEncoder<S>, kind: ModuleKind, n_groups: usize) -> Vec<ModuleId> {
    let mut ids = Vec::new();
    for encoder in Encoder::BOTH {
        for (layer, a) in model.tower(encoder).arch.layers.iter().enumerate() {
            match kind {
                ModuleKind::Head => {
                    ids.extend((0..a.heads.len()).map(|head| ModuleId::Head { encoder, layer, head }))
                }
                ModuleKind::NeuronGroup => {
                    let groups = effective_groups(a.neurons, n_groups);
                    ids.extend((0..groups).map(|group| ModuleId::NeuronGroup {
                        encoder,
                        layer,
                        group,
                        groups,
                    }))
                }
                ModuleKind::Layer => ids.push(ModuleId::Layer { encoder, layer }),
            }
        }
    }
    ids.sort();
    ids
}

/// Evaluates single-module ablations against a fixed model and split. The
/// unablated features and `Z_full` are computed once; each score re-encodes
/// only the tower the module lives in.
pub struct Scorer<'a, S: Scalar> {
    model: &'a DualEncoder<S>,
    split: &'a Split,
    objective: EvalObjective,
    full: PerTower<Tensor<S>>,
    z_full: f64,
}

impl<'a, S: Scalar> Scorer<'a, S> {
    pub fn new(model: &'a DualEncoder<S>, split: &'a Split, objective: &EvalObjective) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Input(format!("split `{}` is empty", split.name)));
        }
        let none = AblationSet::new();
        let full = PerTower {
            vision: model.features(Encoder::Vision, &split.vision_tokens(), &none)?,
            text: model.features(Encoder::Text, &split.text_tokens(), &none)?,
        };
        let mut scorer = Self {
            model,
            split,
            objective: objective.clone(),
            full,
            z_full: 0.0,
        };
        scorer.z_full = scorer.z(&scorer.full.vision, &scorer.full.text)?;
        Ok(scorer)
    }

    fn z(&self, fv: &Tensor<S>, fl: &Tensor<S>) -> Result<f64> {
        let m = metrics_from_similarity(&similarity_matrix(fv, fl)?, &self.objective.ks)?;
        Ok(objective_value(&m, self.objective.objective))
    }

    pub fn z_full(&self) -> f64 {
        self.z_full
    }

    /// `Z_full − Z(id ablated)`.
    pub fn score(&self, id: ModuleId) -> Result<f64> {
        let ablation = AblationSet::single(id);
        validate_ablation(self.model, &ablation)?;
        let enc = id.encoder();
        let tokens = match enc {
            Encoder::Vision => self.split.vision_tokens(),
            Encoder::Text => self.split.text_tokens(),
        };
        let ablated = self.model.features(enc, &tokens, &ablation)?;
        let z = match enc {
            Encoder::Vision => self.z(&ablated, &self.full.text)?,
            Encoder::Text => self.z(&self.full.vision, &ablated)?,
        };
        Ok(self.z_full - z)
    }

    /// Scores every id on a pool of `workers` threads. Results come back in
    /// input order regardless of scheduling.
    pub fn score_all(&self, ids: &[ModuleId], workers: usize) -> Result<Vec<ScoreEntry>> {
        let run = |id: &ModuleId| self.score(*id).map(|score| ScoreEntry { id: *id, score });
        if workers <= 1 {
            return ids.iter().map(run).collect();
        }
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| ids.par_iter().map(run).collect())
    }
}

/// Module-wise pruning error of a single module.
pub fn mope_score<S: Scalar>(
    model: &DualEncoder<S>,
    id: ModuleId,
    split: &Split,
    objective: &EvalObjective,
) -> Result<f64> {
    Scorer::new(model, split, objective)?.score(id)
}

/// Cost tables plus the model their ids refer to.
#[derive(Clone, Debug)]
pub struct Scored<S> {
    pub tables: CostTables,
    /// The input with FFN neurons rewired when the group table was built,
    /// otherwise the input unchanged. Head and layer ids are valid for both.
    pub model: DualEncoder<S>,
    pub permutations: Option<PerTower<Vec<Vec<usize>>>>,
}

/// Builds the requested tables under `cfg.metric`. Heads and layers are
/// scored on `model` as given; neuron groups are scored after rewiring its
/// FFNs by gradient importance. Only MoPE tables carry `Z_full`.
pub fn build_cost_tables<S: Scalar>(model: &DualEncoder<S>, split: &Split, cfg: &ScoreConfig) -> Result<Scored<S>> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::Input(format!("split `{}` is empty", split.name)));
    }
    let wants = |k| cfg.kinds.contains(&k);
    let mope = cfg.metric == ImportanceMetric::Mope;
    let scorer = if mope { Some(Scorer::new(model, split, &cfg.objective)?) } else { None };
    let score = |m: &DualEncoder<S>, s: Option<&Scorer<S>>, kind| match s {
        Some(s) => s.score_all(&module_ids(m, kind, cfg.n_groups), cfg.workers),
        None => baseline_importance(m, cfg.metric, kind, Some(split), cfg),
    };
    let mut tables = CostTables {
        meta: TableMeta {
            metric: cfg.metric,
            objective: cfg.objective.clone(),
            split: split.name.clone(),
            split_hash: split.hash(),
            model_hash: model.hash(),
            z_full: scorer.as_ref().map(Scorer::z_full),
            n_groups: cfg.n_groups,
            group_model_hash: None,
            group_z_full: None,
        },
        heads: Vec::new(),
        neuron_groups: Vec::new(),
        layers: Vec::new(),
    };
    if wants(ModuleKind::Head) {
        tables.heads = score(model, scorer.as_ref(), ModuleKind::Head)?;
    }
    if wants(ModuleKind::Layer) {
        tables.layers = score(model, scorer.as_ref(), ModuleKind::Layer)?;
    }
    if !wants(ModuleKind::NeuronGroup) {
        return Ok(Scored {
            tables,
            model: model.clone(),
            permutations: None,
        });
    }
    let rewired = rewire_ffn(model, split, cfg.grad_batch)?;
    let group_scorer = if mope {
        Some(Scorer::new(&rewired.model, split, &cfg.objective)?)
    } else {
        None
    };
    tables.neuron_groups = score(&rewired.model, group_scorer.as_ref(), ModuleKind::NeuronGroup)?;
    tables.meta.group_model_hash = Some(rewired.model.hash());
    tables.meta.group_z_full = group_scorer.as_ref().map(Scorer::z_full);
    Ok(Scored {
        tables,
        model: rewired.model,
        permutations: Some(rewired.permutations),
    })
}
