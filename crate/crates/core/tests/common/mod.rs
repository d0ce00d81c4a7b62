#![allow(dead_code)]

pub mod grad_suite;

use mope::model::{Encoder, ModelConfig};
use mope::workbench::data::{Pair, Split};
use mope::{DualEncoder, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(layers: usize, heads: usize, d: usize, d_ff: usize) -> ModelConfig {
    ModelConfig {
        d,
        n_heads: heads,
        d_ff: Some(d_ff),
        n_layers_v: layers,
        n_layers_t: layers,
        vocab_v: 20,
        vocab_t: 24,
        seq_v: 4,
        seq_t: 3,
        e: 8,
        seed: 42,
        ln_eps: 1e-5,
    }
}

/// Freshly initialized weights are close to symmetric; a perturbation keeps
/// ablations from being no-ops and breaks score ties.
pub fn model(cfg: &ModelConfig, seed: u64) -> DualEncoder {
    let m = DualEncoder::init(&ModelConfig { seed, ..cfg.clone() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let tensors = m
        .named_tensors()
        .into_iter()
        .map(|(_, t)| {
            let data = t.data().iter().map(|&x| x + rng.gen_range(-0.3..0.3)).collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect();
    m.with_tensors(tensors)
}

pub fn random_split(cfg: &ModelConfig, n: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| Pair {
            concepts: Vec::new(),
            vision: (0..cfg.seq(Encoder::Vision)).map(|_| rng.gen_range(0..cfg.vocab_v)).collect(),
            text: (0..cfg.seq(Encoder::Text)).map(|_| rng.gen_range(0..cfg.vocab_t)).collect(),
        })
        .collect();
    Split::new("val", pairs)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}
