use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tower of the dual encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Vision,
    Text,
}

impl Encoder {
    pub const BOTH: [Encoder; 2] = [Encoder::Vision, Encoder::Text];

    pub fn name(self) -> &'static str {
        match self {
            Encoder::Vision => "vision",
            Encoder::Text => "text",
        }
    }
}

impl std::fmt::Display for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_seed() -> u64 {
    42
}

/// Shape of a freshly initialized dual encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Residual width.
    pub d: usize,
    pub n_heads: usize,
    /// FFN intermediate size; `None` means `4·d`.
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub n_layers_v: usize,
    pub n_layers_t: usize,
    pub vocab_v: usize,
    pub vocab_t: usize,
    pub seq_v: usize,
    pub seq_t: usize,
    /// Shared embedding dimension.
    pub e: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d)
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn n_layers(&self, enc: Encoder) -> usize {
        match enc {
            Encoder::Vision => self.n_layers_v,
            Encoder::Text => self.n_layers_t,
        }
    }

    pub fn vocab(&self, enc: Encoder) -> usize {
        match enc {
            Encoder::Vision => self.vocab_v,
            Encoder::Text => self.vocab_t,
        }
    }

    pub fn seq(&self, enc: Encoder) -> usize {
        match enc {
            Encoder::Vision => self.seq_v,
            Encoder::Text => self.seq_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff()),
            ("n_layers_v", self.n_layers_v),
            ("n_layers_t", self.n_layers_t),
            ("vocab_v", self.vocab_v),
            ("vocab_t", self.vocab_t),
            ("seq_v", self.seq_v),
            ("seq_t", self.seq_t),
            ("e", self.e),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Desk-scale teacher: width 64, four heads, four layers per tower.
    pub fn toy_teacher(vocab_v: usize, vocab_t: usize, seq_v: usize, seq_t: usize) -> Self {
        Self {
            d: 64,
            n_heads: 4,
            d_ff: None,
            n_layers_v: 4,
            n_layers_t: 4,
            vocab_v,
            vocab_t,
            seq_v,
            seq_t,
            e: 32,
            seed: 42,
            ln_eps: default_ln_eps(),
        }
    }
}
