use std::ops::Range;

use crate::error::{Error, Result};

/// Architecture of the decoder-only language model.
///
/// Prunable layers are the half-open range `prune_start..prune_end`; an empty
/// range (`prune_start == prune_end`) disables pruning entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub prune_start: usize,
    pub prune_end: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration with every layer prunable.
    pub fn tiny(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq_len: 16,
            prune_start: 0,
            prune_end: n_layers,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.max_seq_len = max_seq_len;
        self
    }

    pub fn with_prune_layers(mut self, layers: Range<usize>) -> Self {
        self.prune_start = layers.start;
        self.prune_end = layers.end;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 {
            return fail("vocab_size, d_model and n_layers must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.prune_start > self.prune_end || self.prune_end > self.n_layers {
            return fail(format!(
                "prune layers {}..{} do not fit in {} layers",
                self.prune_start, self.prune_end, self.n_layers
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn prune_layers(&self) -> Range<usize> {
        self.prune_start..self.prune_end
    }

    pub fn is_prunable(&self, layer: usize) -> bool {
        self.prune_layers().contains(&layer)
    }

    /// Closed-form parameter count of an unpruned model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 4 * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

/// Current width of one transformer layer; shrinks under structured pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub heads: usize,
    pub d_ff: usize,
}

/// Config plus the per-layer widths actually present in a (possibly pruned) model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub config: ModelConfig,
    pub layers: Vec<LayerShape>,
}

impl ModelShape {
    pub fn dense(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            layers: vec![
                LayerShape {
                    heads: config.n_heads,
                    d_ff: config.d_ff,
                };
                config.n_layers
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        let c = &self.config;
        let d = c.d_model;
        let hd = c.head_dim();
        let layers: usize = self
            .layers
            .iter()
            .map(|l| 4 * d * l.heads * hd + 2 * d * l.d_ff + 4 * d)
            .sum();
        c.vocab_size * d + c.max_seq_len * d + layers + 2 * d
    }

    /// Multiply-accumulate operations for one token at the given context length.
    ///
    /// Counts the Q/K/V/O projections, attention scores and weighted values, the
    /// two MLP matrices and the tied output head. Normalisation and softmax are
    /// ignored.
    pub fn macs_per_token(&self, context: usize) -> u64 {
        let c = &self.config;
        let d = c.d_model as u64;
        let hd = c.head_dim() as u64;
        let ctx = context as u64;
        let layers: u64 = self
            .layers
            .iter()
            .map(|l| {
                let inner = l.heads as u64 * hd;
                4 * d * inner + 2 * ctx * inner + 2 * d * l.d_ff as u64
            })
            .sum();
        layers + c.vocab_size as u64 * d
    }
}
