use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

use super::config::Encoder;
use super::module_id::{group_range, AblationSet, ModuleId};
use super::weights::{DualEncoder, EncoderWeights, LAYER_TENSORS};

/// Graph handles for one block's parameters.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

impl BoundLayer {
    fn from_vars(v: &[Var]) -> Self {
        Self {
            ln1_g: v[0],
            ln1_b: v[1],
            w_q: v[2],
            b_q: v[3],
            w_k: v[4],
            b_k: v[5],
            w_v: v[6],
            b_v: v[7],
            w_o: v[8],
            b_o: v[9],
            ln2_g: v[10],
            ln2_b: v[11],
            w_1: v[12],
            b_1: v[13],
            w_2: v[14],
            b_2: v[15],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub proj: Var,
}

impl BoundEncoder {
    /// Number of graph leaves a tower with `n_layers` blocks binds.
    pub fn leaf_count(n_layers: usize) -> usize {
        2 + n_layers * LAYER_TENSORS + 3
    }

    fn from_vars(n_layers: usize, v: &[Var]) -> Self {
        let layers = (0..n_layers)
            .map(|l| BoundLayer::from_vars(&v[2 + l * LAYER_TENSORS..2 + (l + 1) * LAYER_TENSORS]))
            .collect();
        let tail = 2 + n_layers * LAYER_TENSORS;
        Self {
            tok_emb: v[0],
            pos_emb: v[1],
            layers,
            lnf_g: v[tail],
            lnf_b: v[tail + 1],
            proj: v[tail + 2],
        }
    }

    pub fn bind<S: Scalar>(g: &mut Graph<S>, w: &EncoderWeights<S>, trainable: bool) -> Self {
        let vars: Vec<Var> = w
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self::from_vars(w.layers.len(), &vars)
    }
}

/// Whole model bound onto a graph; `params` is in canonical tensor order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vision: BoundEncoder,
    pub text: BoundEncoder,
    pub logit_scale: Var,
    pub params: Vec<Var>,
}

impl BoundModel {
    pub fn bind<S: Scalar>(g: &mut Graph<S>, model: &DualEncoder<S>, trainable: bool) -> Self {
        let vars: Vec<Var> = model
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self::from_vars(model, vars)
    }

    /// Interprets `vars` (canonical order) as the parameters of `model`'s
    /// architecture.
    pub fn from_vars<S: Scalar>(model: &DualEncoder<S>, vars: Vec<Var>) -> Self {
        let nv = BoundEncoder::leaf_count(model.vision.arch.n_layers());
        let nt = BoundEncoder::leaf_count(model.text.arch.n_layers());
        assert_eq!(vars.len(), nv + nt + 1, "one var per parameter tensor");
        Self {
            vision: BoundEncoder::from_vars(model.vision.arch.n_layers(), &vars[..nv]),
            text: BoundEncoder::from_vars(model.text.arch.n_layers(), &vars[nv..nv + nt]),
            logit_scale: vars[nv + nt],
            params: vars,
        }
    }

    pub fn tower(&self, enc: Encoder) -> &BoundEncoder {
        match enc {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
        }
    }
}

/// Graph nodes produced by one tower's forward pass.
#[derive(Clone, Debug)]
pub struct TowerTrace {
    /// Unit-norm features, `[batch × e]`.
    pub features: Var,
    /// Residual stream after each non-ablated block, `[batch·seq × d]`.
    pub hiddens: Vec<Var>,
    /// Current index of the block behind each entry of `hiddens`.
    pub hidden_layers: Vec<usize>,
    /// GELU output of each block's FFN (before any neuron mask), if computed.
    pub ffn_acts: Vec<Option<Var>>,
    /// Concatenated per-head attention output (before `W_o`), if computed.
    pub attn: Vec<Option<Var>>,
}

struct LayerMask<S> {
    skip: bool,
    heads: Vec<bool>,
    neurons: Option<Vec<S>>,
}

fn layer_masks<S: Scalar>(
    model: &DualEncoder<S>,
    enc: Encoder,
    ablation: &AblationSet,
) -> Result<Vec<LayerMask<S>>> {
    let arch = &model.tower(enc).arch;
    let mut masks: Vec<LayerMask<S>> = arch
        .layers
        .iter()
        .map(|l| LayerMask {
            skip: false,
            heads: vec![true; l.heads.len()],
            neurons: None,
        })
        .collect();
    for id in ablation.iter().filter(|id| id.encoder() == enc) {
        let l = id.layer();
        let Some(layer) = arch.layers.get(l) else {
            return Err(Error::Id(format!("{id}: layer out of range")));
        };
        let mask = &mut masks[l];
        match *id {
            ModuleId::Layer { .. } => mask.skip = true,
            ModuleId::Head { head, .. } => {
                if head >= layer.heads.len() {
                    return Err(Error::Id(format!("{id}: head out of range")));
                }
                mask.heads[head] = false;
            }
            ModuleId::NeuronGroup { group, groups, .. } => {
                if groups == 0 || groups > layer.neurons || group >= groups {
                    return Err(Error::Id(format!(
                        "{id}: invalid group for {} neurons",
                        layer.neurons
                    )));
                }
                let m = mask
                    .neurons
                    .get_or_insert_with(|| vec![S::one(); layer.neurons]);
                for j in group_range(layer.neurons, groups, group) {
                    m[j] = S::zero();
                }
            }
        }
    }
    Ok(masks)
}

/// Checks every id in `ablation` against the model's current architecture.
pub fn validate_ablation<S: Scalar>(model: &DualEncoder<S>, ablation: &AblationSet) -> Result<()> {
    for enc in Encoder::BOTH {
        layer_masks(model, enc, ablation)?;
    }
    Ok(())
}

/// Pre-norm transformer forward pass for one tower. `batch` holds token
/// sequences of exactly the tower's configured length.
pub fn forward_tower<S: Scalar>(
    g: &mut Graph<S>,
    model: &DualEncoder<S>,
    enc: Encoder,
    bound: &BoundEncoder,
    batch: &[Vec<usize>],
    ablation: &AblationSet,
) -> Result<TowerTrace> {
    let cfg = &model.config;
    let seq = cfg.seq(enc);
    let vocab = cfg.vocab(enc);
    let eps = S::of(cfg.ln_eps);
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut ids = Vec::with_capacity(batch.len() * seq);
    for (i, tokens) in batch.iter().enumerate() {
        if tokens.len() != seq {
            return Err(Error::Input(format!(
                "{enc} sequence {i} has {} tokens, expected {seq}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("{enc} token {t} outside vocabulary of {vocab}")));
        }
        ids.extend_from_slice(tokens);
    }
    let masks = layer_masks(model, enc, ablation)?;
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();

    let tok = g.gather(bound.tok_emb, &ids)?;
    let pos = g.gather(bound.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;

    let mut trace = TowerTrace {
        features: x,
        hiddens: Vec::new(),
        hidden_layers: Vec::new(),
        ffn_acts: Vec::new(),
        attn: Vec::new(),
    };
    for (l, (lw, mask)) in bound.layers.iter().zip(&masks).enumerate() {
        if mask.skip {
            trace.ffn_acts.push(None);
            trace.attn.push(None);
            continue;
        }
        let n_heads = mask.heads.len();
        if mask.heads.iter().any(|&a| a) {
            let h = g.layer_norm(x, lw.ln1_g, lw.ln1_b, eps)?;
            let q = g.matmul(h, lw.w_q)?;
            let q = g.add_bias(q, lw.b_q)?;
            let k = g.matmul(h, lw.w_k)?;
            let k = g.add_bias(k, lw.b_k)?;
            let v = g.matmul(h, lw.w_v)?;
            let v = g.add_bias(v, lw.b_v)?;
            let a = g.attention(q, k, v, n_heads, seq, &mask.heads)?;
            let o = g.matmul(a, lw.w_o)?;
            let o = g.add_bias(o, lw.b_o)?;
            x = g.add(x, o)?;
            trace.attn.push(Some(a));
        } else {
            trace.attn.push(None);
        }
        let any_neuron = mask
            .neurons
            .as_ref()
            .map_or(true, |m| m.iter().any(|&v| v != S::zero()));
        if any_neuron {
            let h = g.layer_norm(x, lw.ln2_g, lw.ln2_b, eps)?;
            let u = g.matmul(h, lw.w_1)?;
            let u = g.add_bias(u, lw.b_1)?;
            let act = g.gelu(u);
            trace.ffn_acts.push(Some(act));
            let act = match &mask.neurons {
                Some(m) => g.mask_cols(act, m.clone())?,
                None => act,
            };
            let f = g.matmul(act, lw.w_2)?;
            let f = g.add_bias(f, lw.b_2)?;
            x = g.add(x, f)?;
        } else {
            trace.ffn_acts.push(None);
        }
        trace.hiddens.push(x);
        trace.hidden_layers.push(l);
    }
    let xf = g.layer_norm(x, bound.lnf_g, bound.lnf_b, eps)?;
    let pooled = g.segment_mean(xf, seq)?;
    let projected = g.matmul(pooled, bound.proj)?;
    trace.features = g.l2_normalize_rows(projected);
    Ok(trace)
}

/// Output of encoding a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<S> {
    /// Unit-norm feature of length `e`.
    pub feature: Vec<S>,
    /// `seq × d` residual stream after each non-ablated block.
    pub hiddens: Vec<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEncoding<S> {
    pub features: Tensor<S>,
    pub hiddens: Vec<Tensor<S>>,
}

/// Sequences encoded per graph when featurizing large splits.
pub const ENCODE_CHUNK: usize = 256;

impl<S: Scalar> DualEncoder<S> {
    pub fn encode(&self, enc: Encoder, tokens: &[usize], ablation: &AblationSet) -> Result<Encoding<S>> {
        let out = self.encode_batch(enc, &[tokens.to_vec()], ablation)?;
        Ok(Encoding {
            feature: out.features.data().to_vec(),
            hiddens: out.hiddens,
        })
    }

    pub fn encode_batch(
        &self,
        enc: Encoder,
        batch: &[Vec<usize>],
        ablation: &AblationSet,
    ) -> Result<BatchEncoding<S>> {
        let mut g = Graph::new();
        let bound = BoundEncoder::bind(&mut g, &self.tower(enc).weights, false);
        let trace = forward_tower(&mut g, self, enc, &bound, batch, ablation)?;
        Ok(BatchEncoding {
            features: g.value(trace.features).clone(),
            hiddens: trace.hiddens.iter().map(|&h| g.value(h).clone()).collect(),
        })
    }

    /// Features only, encoded in chunks of [`ENCODE_CHUNK`] sequences.
    pub fn features(&self, enc: Encoder, batch: &[Vec<usize>], ablation: &AblationSet) -> Result<Tensor<S>> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut data = Vec::with_capacity(batch.len() * self.config.e);
        for chunk in batch.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new();
            let bound = BoundEncoder::bind(&mut g, &self.tower(enc).weights, false);
            let trace = forward_tower(&mut g, self, enc, &bound, chunk, ablation)?;
            data.extend_from_slice(g.value(trace.features).data());
        }
        Tensor::new(&[batch.len(), self.config.e], data)
    }
}
