//! Module importance: the module-wise pruning error (MoPE) and the cost
//! tables built from it, FFN rewiring by gradient saliency, and the baseline
//! metrics used for comparison.
//!
//! The MoPE of a module θ is `Z(model) − Z(model with θ ablated)`, where `Z`
//! is a retrieval objective on a held-out split. A large value means the
//! model leans on that module.

mod baseline;
mod saliency;
mod tables;

pub use baseline::{baseline_importance, magnitude, positional_score, removal_order, ImportanceMetric};
pub use saliency::{
    descending_order, gradient_batches, neuron_importance, rewire_ffn, saliency, PerTower, Rewired, Saliency,
};
pub use tables::{
    build_cost_tables, module_ids, mope_score, CostTables, ScoreConfig, ScoreEntry, Scored, Scorer, TableMeta,
    DEFAULT_GRAD_BATCH, DEFAULT_GROUPS,
};
