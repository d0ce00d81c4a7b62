//! Physical removal and reordering of heads, neurons and layers.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::Encoder;
use super::module_id::{group_range, ModuleId};
use super::weights::{DualEncoder, LayerArch, LayerWeights, Tower};

#[derive(Default)]
struct LayerCut {
    heads: BTreeSet<usize>,
    neurons: BTreeSet<usize>,
}

/// Column indices of the kept heads in a `d × (h·d_head)` projection.
fn head_columns(kept: &[usize], d_head: usize) -> Vec<usize> {
    kept.iter()
        .flat_map(|&h| h * d_head..(h + 1) * d_head)
        .collect()
}

/// Restricts a block to the given heads and neurons (current indices, in the
/// order they should appear).
fn slice_layer<S: Scalar>(
    w: &LayerWeights<S>,
    heads: &[usize],
    neurons: &[usize],
    d_head: usize,
) -> LayerWeights<S> {
    let cols = head_columns(heads, d_head);
    LayerWeights {
        ln1_g: w.ln1_g.clone(),
        ln1_b: w.ln1_b.clone(),
        w_q: w.w_q.select_cols(&cols),
        b_q: w.b_q.select(&cols),
        w_k: w.w_k.select_cols(&cols),
        b_k: w.b_k.select(&cols),
        w_v: w.w_v.select_cols(&cols),
        b_v: w.b_v.select(&cols),
        w_o: w.w_o.select_rows(&cols),
        b_o: w.b_o.clone(),
        ln2_g: w.ln2_g.clone(),
        ln2_b: w.ln2_b.clone(),
        w_1: w.w_1.select_cols(neurons),
        b_1: w.b_1.select(neurons),
        w_2: w.w_2.select_rows(neurons),
        b_2: w.b_2.clone(),
    }
}

/// Returns a new model with the listed modules physically removed: a head's
/// slices of `W_q/W_k/W_v` (columns) and `W_o` (rows), a neuron group's
/// columns of `W_1` and rows of `W_2`, or a whole block. All ids refer to
/// the input model's architecture. Plans that would leave a layer without
/// heads or neurons, or a tower without layers, are refused.
pub fn structural_prune<S: Scalar>(model: &DualEncoder<S>, ids: &[ModuleId]) -> Result<DualEncoder<S>> {
    if ids.is_empty() {
        return Ok(model.clone());
    }
    let mut out = model.clone();
    for enc in Encoder::BOTH {
        let tower = model.tower(enc);
        let mut dropped_layers = BTreeSet::new();
        let mut cuts: BTreeMap<usize, LayerCut> = BTreeMap::new();
        for id in ids.iter().filter(|id| id.encoder() == enc) {
            let l = id.layer();
            let Some(layer) = tower.arch.layers.get(l) else {
                return Err(Error::Id(format!("{id}: layer out of range")));
            };
            match *id {
                ModuleId::Layer { .. } => {
                    dropped_layers.insert(l);
                }
                ModuleId::Head { head, .. } => {
                    if head >= layer.heads.len() {
                        return Err(Error::Id(format!("{id}: head out of range")));
                    }
                    cuts.entry(l).or_default().heads.insert(head);
                }
                ModuleId::NeuronGroup { group, groups, .. } => {
                    if groups == 0 || groups > layer.neurons || group >= groups {
                        return Err(Error::Id(format!("{id}: invalid group")));
                    }
                    cuts.entry(l)
                        .or_default()
                        .neurons
                        .extend(group_range(layer.neurons, groups, group));
                }
            }
        }
        if let Some(l) = cuts.keys().find(|l| dropped_layers.contains(l)) {
            return Err(Error::Usage(format!(
                "{enc} layer {l} is removed but also has heads or groups listed"
            )));
        }
        if dropped_layers.len() >= tower.arch.n_layers() {
            return Err(Error::Refusal(format!("plan removes every {enc} layer")));
        }
        for (&l, cut) in &cuts {
            let layer = &tower.arch.layers[l];
            if cut.heads.len() >= layer.heads.len() {
                return Err(Error::Refusal(format!("plan removes every head of {enc} layer {l}")));
            }
            if cut.neurons.len() >= layer.neurons {
                return Err(Error::Refusal(format!(
                    "plan removes every FFN neuron of {enc} layer {l}"
                )));
            }
        }

        let d_head = model.config.d_head();
        let mut layers = Vec::new();
        let mut arch = Vec::new();
        for (l, (w, a)) in tower.weights.layers.iter().zip(&tower.arch.layers).enumerate() {
            if dropped_layers.contains(&l) {
                continue;
            }
            match cuts.get(&l) {
                None => {
                    layers.push(w.clone());
                    arch.push(a.clone());
                }
                Some(cut) => {
                    let heads: Vec<usize> = (0..a.heads.len()).filter(|h| !cut.heads.contains(h)).collect();
                    let neurons: Vec<usize> = (0..a.neurons).filter(|j| !cut.neurons.contains(j)).collect();
                    layers.push(slice_layer(w, &heads, &neurons, d_head));
                    arch.push(LayerArch {
                        origin: a.origin,
                        heads: heads.iter().map(|&h| a.heads[h]).collect(),
                        neurons: neurons.len(),
                    });
                }
            }
        }
        let dst: &mut Tower<S> = out.tower_mut(enc);
        dst.weights.layers = layers;
        dst.arch.layers = arch;
    }
    Ok(out)
}

/// Reorders a block's FFN neurons: new neuron `i` is old neuron `perm[i]`.
pub fn permute_neurons<S: Scalar>(
    model: &DualEncoder<S>,
    enc: Encoder,
    layer: usize,
    perm: &[usize],
) -> Result<DualEncoder<S>> {
    let n = model
        .tower(enc)
        .arch
        .layers
        .get(layer)
        .ok_or_else(|| Error::Id(format!("{enc} layer {layer} out of range")))?
        .neurons;
    check_permutation(perm, n)?;
    let mut out = model.clone();
    let tower = out.tower_mut(enc);
    let w = &tower.weights.layers[layer];
    let heads: Vec<usize> = (0..tower.arch.layers[layer].heads.len()).collect();
    tower.weights.layers[layer] = slice_layer(w, &heads, perm, model.config.d_head());
    Ok(out)
}

/// Reorders a block's heads: new head `i` is old head `perm[i]`, moving the
/// matching `W_o` rows along.
pub fn permute_heads<S: Scalar>(
    model: &DualEncoder<S>,
    enc: Encoder,
    layer: usize,
    perm: &[usize],
) -> Result<DualEncoder<S>> {
    let a = model
        .tower(enc)
        .arch
        .layers
        .get(layer)
        .ok_or_else(|| Error::Id(format!("{enc} layer {layer} out of range")))?
        .clone();
    check_permutation(perm, a.heads.len())?;
    let mut out = model.clone();
    let tower = out.tower_mut(enc);
    let neurons: Vec<usize> = (0..a.neurons).collect();
    tower.weights.layers[layer] =
        slice_layer(&tower.weights.layers[layer], perm, &neurons, model.config.d_head());
    tower.arch.layers[layer].heads = perm.iter().map(|&h| a.heads[h]).collect();
    Ok(out)
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Input(format!("permutation of length {} for {n} items", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Input("not a permutation".into()));
        }
    }
    Ok(())
}
