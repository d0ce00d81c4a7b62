//! Dual-encoder transformer with addressable prunable modules.
//!
//! Parameter count of one tower with per-layer kept heads `h_l` (width
//! `d_head` each) and kept FFN neurons `f_l`:
//!
//! ```text
//! vocab·d + seq·d                                   embeddings
//! + Σ_l [ 3·(d·h_l·d_head + h_l·d_head)             Q, K, V with biases
//!         + h_l·d_head·d + d                        output projection
//!         + 2·(2d)                                  two layer norms
//!         + d·f_l + f_l + f_l·d + d ]               FFN
//! + 2d                                              final layer norm
//! + d·e                                             projection (no bias)
//! ```
//!
//! The dual encoder adds one scalar, the logit scale.

mod config;
mod forward;
mod module_id;
mod surgery;
mod weights;

pub use config::{Encoder, ModelConfig};
pub use forward::{
    forward_tower, validate_ablation, BatchEncoding, BoundEncoder, BoundLayer, BoundModel, Encoding, TowerTrace,
    ENCODE_CHUNK,
};
pub use module_id::{effective_groups, group_range, AblationSet, ModuleId, ModuleKind};
pub use surgery::{permute_heads, permute_neurons, structural_prune};
pub use weights::{
    encoder_param_count, initial_logit_scale, layer_param_count, tensor_layout, DualEncoder, EncoderArch, EncoderWeights, LayerArch,
    LayerWeights, Tower, INIT_STD,
};
