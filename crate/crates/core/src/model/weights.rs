use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::config::{Encoder, ModelConfig};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;

/// Initial value of the learnable log temperature, `ln(1/0.07)`.
pub fn initial_logit_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// One pre-norm transformer block. Matrices are stored input-major so a row
/// vector times the matrix gives the output: `W_q: d × (h·d_head)`,
/// `W_o: (h·d_head) × d`, `W_1: d × f`, `W_2: f × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub w_q: Tensor<S>,
    pub b_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub b_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub b_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub w_1: Tensor<S>,
    pub b_1: Tensor<S>,
    pub w_2: Tensor<S>,
    pub b_2: Tensor<S>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2)
    };
}

pub(crate) const LAYER_TENSORS: usize = 16;

impl<S: Scalar> LayerWeights<S> {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &self.$f)),*] };
        }
        layer_fields!(list)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$(&mut self.$f),*] };
        }
        layer_fields!(list)
    }

    pub(crate) fn from_tensors(mut ts: impl Iterator<Item = Tensor<S>>) -> Self {
        macro_rules! build {
            ($($f:ident),*) => { Self { $($f: ts.next().expect("layer tensor")),* } };
        }
        layer_fields!(build)
    }

    pub fn heads_width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn neurons(&self) -> usize {
        self.w_1.cols()
    }
}

/// Kept-module record for one layer, in terms of the teacher it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerArch {
    /// Teacher layer this block descends from.
    pub origin: usize,
    /// Teacher head indices still present, in storage order.
    pub heads: Vec<usize>,
    pub neurons: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub layers: Vec<LayerArch>,
}

impl EncoderArch {
    pub fn full(n_layers: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|l| LayerArch {
                    origin: l,
                    heads: (0..n_heads).collect(),
                    neurons: d_ff,
                })
                .collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn origins(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.origin).collect()
    }
}

/// Weights of one tower.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<S> {
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub lnf_g: Tensor<S>,
    pub lnf_b: Tensor<S>,
    /// Projection into the shared space, `d × e`.
    pub proj: Tensor<S>,
}

impl<S: Scalar> EncoderWeights<S> {
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{l}.{n}"), t)),
            );
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("proj".into(), &self.proj));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.proj);
        out
    }

    pub(crate) fn from_tensors(n_layers: usize, mut ts: impl Iterator<Item = Tensor<S>>) -> Self {
        let tok_emb = ts.next().expect("tok_emb");
        let pos_emb = ts.next().expect("pos_emb");
        let layers = (0..n_layers)
            .map(|_| LayerWeights::from_tensors(&mut ts))
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ts.next().expect("lnf_g"),
            lnf_b: ts.next().expect("lnf_b"),
            proj: ts.next().expect("proj"),
        }
    }

    pub fn d(&self) -> usize {
        self.tok_emb.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower<S> {
    pub weights: EncoderWeights<S>,
    pub arch: EncoderArch,
}

/// Two transformer towers projecting into one unit-norm embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder<S> {
    pub config: ModelConfig,
    pub vision: Tower<S>,
    pub text: Tower<S>,
    /// Log of the contrastive temperature multiplier, shape `[1]`.
    pub logit_scale: Tensor<S>,
    /// Hashes of the plans and operations that produced this model.
    pub provenance: Vec<String>,
}

fn sample<S: Scalar>(rng: &mut ChaCha8Rng, normal: &Normal<f64>, shape: &[usize]) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(normal.sample(rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn init_encoder<S: Scalar>(
    cfg: &ModelConfig,
    enc: Encoder,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
) -> EncoderWeights<S> {
    let d = cfg.d;
    let f = cfg.d_ff();
    let ones = || Tensor::full(&[d], S::one());
    let tok_emb = sample(rng, normal, &[cfg.vocab(enc), d]);
    let pos_emb = sample(rng, normal, &[cfg.seq(enc), d]);
    let layers = (0..cfg.n_layers(enc))
        .map(|_| LayerWeights {
            ln1_g: ones(),
            ln1_b: Tensor::zeros(&[d]),
            w_q: sample(rng, normal, &[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: sample(rng, normal, &[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: sample(rng, normal, &[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: sample(rng, normal, &[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_g: ones(),
            ln2_b: Tensor::zeros(&[d]),
            w_1: sample(rng, normal, &[d, f]),
            b_1: Tensor::zeros(&[f]),
            w_2: sample(rng, normal, &[f, d]),
            b_2: Tensor::zeros(&[d]),
        })
        .collect();
    EncoderWeights {
        tok_emb,
        pos_emb,
        layers,
        lnf_g: ones(),
        lnf_b: Tensor::zeros(&[d]),
        proj: sample(rng, normal, &[d, cfg.e]),
    }
}

/// Closed-form parameter count of one transformer block with `h` heads of
/// width `d_head` and `f` FFN neurons.
pub fn layer_param_count(d: usize, d_head: usize, h: usize, f: usize) -> usize {
    let hw = h * d_head;
    3 * (d * hw + hw) + hw * d + d + 2 * (2 * d) + d * f + f + f * d + d
}

/// Closed-form parameter count of one tower.
pub fn encoder_param_count(cfg: &ModelConfig, enc: Encoder, arch: &EncoderArch) -> usize {
    let d = cfg.d;
    let embeddings = cfg.vocab(enc) * d + cfg.seq(enc) * d;
    let layers: usize = arch
        .layers
        .iter()
        .map(|l| layer_param_count(d, cfg.d_head(), l.heads.len(), l.neurons))
        .sum();
    embeddings + layers + 2 * d + d * cfg.e
}

/// Name and shape of every parameter of a model with the given
/// architecture, in canonical order.
pub fn tensor_layout(cfg: &ModelConfig, vision: &EncoderArch, text: &EncoderArch) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let dh = cfg.d_head();
    let mut out = Vec::new();
    for (enc, arch) in [(Encoder::Vision, vision), (Encoder::Text, text)] {
        out.push((format!("{enc}.tok_emb"), vec![cfg.vocab(enc), d]));
        out.push((format!("{enc}.pos_emb"), vec![cfg.seq(enc), d]));
        for (l, la) in arch.layers.iter().enumerate() {
            let hw = la.heads.len() * dh;
            let f = la.neurons;
            let shapes: [(&str, Vec<usize>); LAYER_TENSORS] = [
                ("ln1_g", vec![d]),
                ("ln1_b", vec![d]),
                ("w_q", vec![d, hw]),
                ("b_q", vec![hw]),
                ("w_k", vec![d, hw]),
                ("b_k", vec![hw]),
                ("w_v", vec![d, hw]),
                ("b_v", vec![hw]),
                ("w_o", vec![hw, d]),
                ("b_o", vec![d]),
                ("ln2_g", vec![d]),
                ("ln2_b", vec![d]),
                ("w_1", vec![d, f]),
                ("b_1", vec![f]),
                ("w_2", vec![f, d]),
                ("b_2", vec![d]),
            ];
            out.extend(shapes.into_iter().map(|(n, sh)| (format!("{enc}.layers.{l}.{n}"), sh)));
        }
        out.push((format!("{enc}.lnf_g"), vec![d]));
        out.push((format!("{enc}.lnf_b"), vec![d]));
        out.push((format!("{enc}.proj"), vec![d, cfg.e]));
    }
    out.push(("logit_scale".into(), vec![1]));
    out
}

impl<S: Scalar> DualEncoder<S> {
    /// Seeded initialization: normal(0, 0.02) weights, zero biases, unit
    /// layer-norm gains, logit scale `ln(1/0.07)`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let vision = init_encoder(cfg, Encoder::Vision, &mut rng, &normal);
        let text = init_encoder(cfg, Encoder::Text, &mut rng, &normal);
        let arch = |enc| EncoderArch::full(cfg.n_layers(enc), cfg.n_heads, cfg.d_ff());
        Ok(Self {
            config: cfg.clone(),
            vision: Tower {
                weights: vision,
                arch: arch(Encoder::Vision),
            },
            text: Tower {
                weights: text,
                arch: arch(Encoder::Text),
            },
            logit_scale: Tensor::scalar(S::of(initial_logit_scale())),
            provenance: Vec::new(),
        })
    }

    pub fn tower(&self, enc: Encoder) -> &Tower<S> {
        match enc {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, enc: Encoder) -> &mut Tower<S> {
        match enc {
            Encoder::Vision => &mut self.vision,
            Encoder::Text => &mut self.text,
        }
    }

    /// Every parameter tensor with a stable dotted name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for enc in Encoder::BOTH {
            out.extend(
                self.tower(enc)
                    .weights
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("{enc}.{n}"), t)),
            );
        }
        out.push(("logit_scale".into(), &self.logit_scale));
        out
    }

    /// Mutable parameters in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.vision.weights.tensors_mut();
        out.extend(self.text.weights.tensors_mut());
        out.push(&mut self.logit_scale);
        out
    }

    /// Assembles a model from an architecture record and tensors in
    /// canonical order. Tensor shapes must already match
    /// [`tensor_layout`].
    pub fn from_parts(
        config: ModelConfig,
        vision: EncoderArch,
        text: EncoderArch,
        tensors: Vec<Tensor<S>>,
        provenance: Vec<String>,
    ) -> Self {
        let mut it = tensors.into_iter();
        let vw = EncoderWeights::from_tensors(vision.n_layers(), &mut it);
        let tw = EncoderWeights::from_tensors(text.n_layers(), &mut it);
        Self {
            config,
            vision: Tower { weights: vw, arch: vision },
            text: Tower { weights: tw, arch: text },
            logit_scale: it.next().expect("logit_scale"),
            provenance,
        }
    }

    /// Rebuilds a model with this one's architecture from tensors in
    /// canonical order.
    pub fn with_tensors(&self, tensors: Vec<Tensor<S>>) -> Self {
        let mut it = tensors.into_iter();
        let vision = EncoderWeights::from_tensors(self.vision.arch.n_layers(), &mut it);
        let text = EncoderWeights::from_tensors(self.text.arch.n_layers(), &mut it);
        let logit_scale = it.next().expect("logit_scale");
        Self {
            config: self.config.clone(),
            vision: Tower {
                weights: vision,
                arch: self.vision.arch.clone(),
            },
            text: Tower {
                weights: text,
                arch: self.text.arch.clone(),
            },
            logit_scale,
            provenance: self.provenance.clone(),
        }
    }

    /// Number of scalar parameters actually stored.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Closed-form count from the architecture record alone (includes the
    /// single logit-scale scalar).
    pub fn param_count_formula(&self) -> usize {
        encoder_param_count(&self.config, Encoder::Vision, &self.vision.arch)
            + encoder_param_count(&self.config, Encoder::Text, &self.text.arch)
            + 1
    }

    /// Encoder share of the parameter count.
    pub fn encoder_param_count(&self, enc: Encoder) -> usize {
        encoder_param_count(&self.config, enc, &self.tower(enc).arch)
    }

    /// SHA-256 over architecture, provenance and every parameter widened to
    /// little-endian `f64`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.vision.arch).expect("arch serializes"));
        h.update(serde_json::to_vec(&self.text.arch).expect("arch serializes"));
        h.update(serde_json::to_vec(&self.provenance).expect("provenance serializes"));
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &dim in t.shape() {
                h.update((dim as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> DualEncoder<T> {
        let tensors: Vec<Tensor<T>> = self.named_tensors().iter().map(|(_, t)| t.cast()).collect();
        let mut it = tensors.into_iter();
        let vision = EncoderWeights::from_tensors(self.vision.arch.n_layers(), &mut it);
        let text = EncoderWeights::from_tensors(self.text.arch.n_layers(), &mut it);
        DualEncoder {
            config: self.config.clone(),
            vision: Tower {
                weights: vision,
                arch: self.vision.arch.clone(),
            },
            text: Tower {
                weights: text,
                arch: self.text.arch.clone(),
            },
            logit_scale: it.next().expect("logit_scale"),
            provenance: self.provenance.clone(),
        }
    }

    /// Reported width of a tower: `d` scaled by the mean kept-head fraction.
    pub fn reported_width(&self, enc: Encoder) -> f64 {
        let arch = &self.tower(enc).arch;
        let kept: usize = arch.layers.iter().map(|l| l.heads.len()).sum();
        let frac = kept as f64 / (arch.n_layers() * self.config.n_heads) as f64;
        self.config.d as f64 * frac
    }
}
