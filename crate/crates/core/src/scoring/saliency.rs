use serde::{Deserialize, Serialize};

use crate::distill::itc_loss;
use crate::error::{Error, Result};
use crate::model::{forward_tower, permute_neurons, AblationSet, BoundModel, DualEncoder, Encoder};
use crate::numerics::Graph;
use crate::scalar::Scalar;
use crate::workbench::data::Split;

/// One value per tower.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerTower<T> {
    pub vision: T,
    pub text: T,
}

impl<T> PerTower<T> {
    pub fn get(&self, enc: Encoder) -> &T {
        match enc {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, enc: Encoder) -> &mut T {
        match enc {
            Encoder::Vision => &mut self.vision,
            Encoder::Text => &mut self.text,
        }
    }
}

/// First-order saliency `Σ |a · ∂L_itc/∂a|` accumulated over a split, per
/// layer: one entry per FFN neuron (at the GELU output) and one per head (at
/// the head's slice of the concatenated attention output).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    pub neurons: PerTower<Vec<Vec<f64>>>,
    pub heads: PerTower<Vec<Vec<f64>>>,
}

/// Consecutive index ranges of at most `batch` pairs. A trailing single pair
/// joins the previous batch, since the contrastive loss needs two.
pub fn gradient_batches(n: usize, batch: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n < 2 {
        return Err(Error::Input("gradient scoring needs at least 2 pairs".into()));
    }
    if batch < 2 {
        return Err(Error::Config("gradient batch must be at least 2".into()));
    }
    let mut out: Vec<_> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    Ok(out)
}

pub fn saliency<S: Scalar>(model: &DualEncoder<S>, split: &Split, batch: usize) -> Result<Saliency> {
    let mut out = Saliency::default();
    for enc in Encoder::BOTH {
        let arch = &model.tower(enc).arch;
        *out.neurons.get_mut(enc) = arch.layers.iter().map(|l| vec![0.0; l.neurons]).collect();
        *out.heads.get_mut(enc) = arch.layers.iter().map(|l| vec![0.0; l.heads.len()]).collect();
    }
    let d_head = model.config.d_head();
    let none = AblationSet::new();
    for range in gradient_batches(split.len(), batch)? {
        let idx: Vec<usize> = range.collect();
        let part = split.subset(&idx);
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, model, true);
        let tv = forward_tower(&mut g, model, Encoder::Vision, &bound.vision, &part.vision_tokens(), &none)?;
        let tt = forward_tower(&mut g, model, Encoder::Text, &bound.text, &part.text_tokens(), &none)?;
        let loss = itc_loss(&mut g, tv.features, tt.features, bound.logit_scale)?;
        g.backward(loss)?;
        for (enc, trace) in [(Encoder::Vision, &tv), (Encoder::Text, &tt)] {
            for (l, act) in trace.ffn_acts.iter().enumerate() {
                let Some(a) = *act else { continue };
                accumulate(&mut out.neurons.get_mut(enc)[l], g.value(a).data(), g.grad_or_zeros(a).data(), 1);
            }
            for (l, att) in trace.attn.iter().enumerate() {
                let Some(a) = *att else { continue };
                accumulate(&mut out.heads.get_mut(enc)[l], g.value(a).data(), g.grad_or_zeros(a).data(), d_head);
            }
        }
    }
    Ok(out)
}

/// Adds `|a·g|` of each row into `acc`, folding `width` adjacent columns
/// into one slot.
fn accumulate<S: Scalar>(acc: &mut [f64], a: &[S], g: &[S], width: usize) {
    let cols = acc.len() * width;
    for (ra, rg) in a.chunks(cols).zip(g.chunks(cols)) {
        for (j, (&x, &y)) in ra.iter().zip(rg).enumerate() {
            acc[j / width] += (x * y).as_f64().abs();
        }
    }
}

/// Per-neuron importance `Σ |a_j · ∂L_itc/∂a_j|` over the split, taken at
/// each FFN's GELU output. `batch` fixes how the split is chunked for the
/// contrastive loss.
pub fn neuron_importance<S: Scalar>(
    model: &DualEncoder<S>,
    split: &Split,
    batch: usize,
) -> Result<PerTower<Vec<Vec<f64>>>> {
    Ok(saliency(model, split, batch)?.neurons)
}

/// A model with every FFN's neurons sorted by descending importance.
#[derive(Clone, Debug)]
pub struct Rewired<S> {
    pub model: DualEncoder<S>,
    /// Per layer, `perm[i]` is the old index of new neuron `i`.
    pub permutations: PerTower<Vec<Vec<usize>>>,
    /// Importance in the original neuron order.
    pub importance: PerTower<Vec<Vec<f64>>>,
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    perm
}

/// Reorders FFN neurons so that contiguous groups are importance-ordered.
/// The returned model computes the same function as the input.
pub fn rewire_ffn<S: Scalar>(model: &DualEncoder<S>, split: &Split, batch: usize) -> Result<Rewired<S>> {
    let importance = neuron_importance(model, split, batch)?;
    let mut out = model.clone();
    let mut permutations = PerTower::<Vec<Vec<usize>>>::default();
    for enc in Encoder::BOTH {
        for (l, scores) in importance.get(enc).iter().enumerate() {
            let perm = descending_order(scores);
            if perm.iter().enumerate().any(|(i, &p)| i != p) {
                out = permute_neurons(&out, enc, l, &perm)?;
            }
            permutations.get_mut(enc).push(perm);
        }
    }
    Ok(Rewired {
        model: out,
        permutations,
        importance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_single_pair_joins_previous_batch() {
        assert_eq!(gradient_batches(9, 4).unwrap(), vec![0..4, 4..9]);
        assert_eq!(gradient_batches(8, 4).unwrap(), vec![0..4, 4..8]);
        assert_eq!(gradient_batches(3, 8).unwrap(), vec![0..3]);
        assert!(gradient_batches(1, 8).is_err());
    }

    #[test]
    fn descending_with_index_ties() {
        assert_eq!(descending_order(&[0.1, 0.5, 0.1, 0.9]), vec![3, 1, 0, 2]);
        assert_eq!(descending_order(&[3.0, 2.0, 1.0]), vec![0, 1, 2]);
    }

    #[test]
    fn heads_fold_adjacent_columns() {
        let mut acc = vec![0.0; 2];
        let a = [1.0, -2.0, 3.0, 4.0, 1.0, 1.0, 1.0, 1.0];
        let g = [1.0, 1.0, 1.0, -1.0, 2.0, 0.0, 0.0, 0.5];
        accumulate(&mut acc, &a, &g, 2);
        assert_eq!(acc, vec![1.0 + 2.0 + 2.0, 3.0 + 4.0 + 0.5]);
    }
}
