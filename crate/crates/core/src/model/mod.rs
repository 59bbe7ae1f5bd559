//! Decoder-only transformer language model in 64-bit floats.
//!
//! Pre-norm blocks with causal multi-head attention and a GELU MLP, learned
//! positional embeddings, and an output head tied to the token embedding.
//! Gradients are exact reverse-mode derivatives of the mean next-token
//! cross-entropy.

mod checkpoint;
mod config;
mod forward;
mod lowrank;
mod weights;

use ndarray::Array2;

pub use checkpoint::{read_model, write_model};
pub use config::{LayerShape, ModelConfig, ModelShape};
pub use lowrank::{Adapters, LowRank};
pub use weights::{LayerParam, LayerWeights, ParamId, Weights};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLM {
    pub config: ModelConfig,
    pub weights: Weights,
}

/// Gradients of the batch loss and, optionally, of every per-sample loss.
#[derive(Debug, Clone)]
pub struct GradientStore {
    /// `dL/dθ` for `L = (1/N) Σ F(θ, x_i)`.
    pub batch: Weights,
    /// `dF(θ, x_i)/dθ` for each sample, in batch order.
    pub per_sample: Option<Vec<Weights>>,
}

impl GradientStore {
    pub fn samples(&self) -> Result<&[Weights]> {
        self.per_sample
            .as_deref()
            .ok_or(Error::MissingPerSampleGradients)
    }
}

impl TransformerLM {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights })
    }

    /// Builds a model from explicit weights, checking every tensor shape
    /// against the config and the per-layer widths implied by `weights`.
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let shape = ModelShape {
            layers: weights.layer_shapes(config.head_dim()),
            config: config.clone(),
        };
        if weights.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                config.n_layers,
                weights.layers.len()
            )));
        }
        let expected = Weights::zeros(&shape);
        for ((id, got), (_, want)) in weights.tensors().iter().zip(expected.tensors()) {
            if got.len() != want.len() {
                return Err(Error::Config(format!(
                    "tensor {id} has {} elements, expected {}",
                    got.len(),
                    want.len()
                )));
            }
        }
        for (l, lw) in weights.layers.iter().enumerate() {
            let inner = lw.inner_dim();
            if inner % config.head_dim() != 0
                || lw.wk.nrows() != inner
                || lw.wv.nrows() != inner
                || lw.wo.ncols() != inner
                || lw.w_down.nrows() != lw.d_ff()
            {
                return Err(Error::Config(format!("layer {l} has inconsistent widths")));
            }
            if lw.wq.ncols() != config.d_model || lw.w_up.nrows() != config.d_model {
                return Err(Error::Config(format!("layer {l} does not match d_model")));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            config: self.config.clone(),
            layers: self.weights.layer_shapes(self.config.head_dim()),
        }
    }

    pub fn check_sequence(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() < 2 || tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_batch<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        batch.iter().try_for_each(|s| self.check_sequence(s.as_ref()))
    }

    /// `[T, vocab]` next-token logits for one sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.logits_with(None, tokens)
    }

    pub fn logits_with(&self, adapters: Option<&Adapters>, tokens: &[u32]) -> Result<Array2<f64>> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(forward::forward(&self.weights, self.config.head_dim(), adapters, tokens).0)
    }

    /// `F(θ, x)`: mean next-token cross-entropy of one sequence.
    pub fn sequence_loss(&self, tokens: &[u32]) -> Result<f64> {
        self.sequence_loss_with(None, tokens)
    }

    pub fn sequence_loss_with(&self, adapters: Option<&Adapters>, tokens: &[u32]) -> Result<f64> {
        self.check_sequence(tokens)?;
        let (logits, _) = forward::forward(&self.weights, self.config.head_dim(), adapters, tokens);
        Ok(forward::next_token_loss(&logits, tokens, false).0)
    }

    /// `L(θ, D) = (1/N) Σ F(θ, x_i)`.
    pub fn loss<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<f64> {
        self.loss_with(None, batch)
    }

    pub fn loss_with<S: AsRef<[u32]>>(&self, adapters: Option<&Adapters>, batch: &[S]) -> Result<f64> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for s in batch {
            total += self.sequence_loss_with(adapters, s.as_ref())?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Exact gradients of [`TransformerLM::loss`]. With `per_sample`, also keeps
    /// each sample's gradient; the batch gradient is their arithmetic mean.
    pub fn gradients<S: AsRef<[u32]>>(&self, batch: &[S], per_sample: bool) -> Result<GradientStore> {
        self.check_batch(batch)?;
        let hd = self.config.head_dim();
        let mut total = self.weights.zeros_like();
        let mut samples = per_sample.then(|| Vec::with_capacity(batch.len()));
        for s in batch {
            let tokens = s.as_ref();
            let (logits, cache) = forward::forward(&self.weights, hd, None, tokens);
            let (_, dlogits) = forward::next_token_loss(&logits, tokens, true);
            let dlogits = dlogits.expect("gradient requested");
            match samples.as_mut() {
                Some(list) => {
                    let mut g = self.weights.zeros_like();
                    forward::backward(&self.weights, hd, None, &cache, &dlogits, Some(&mut g), None);
                    total.add_scaled(1.0, &g);
                    list.push(g);
                }
                None => {
                    forward::backward(&self.weights, hd, None, &cache, &dlogits, Some(&mut total), None);
                }
            }
        }
        total.scale(1.0 / batch.len() as f64);
        Ok(GradientStore {
            batch: total,
            per_sample: samples,
        })
    }

    /// Loss and gradients with adapters attached. Base-weight gradients are
    /// only accumulated when `base_grads` is given.
    pub fn gradients_with_adapters<S: AsRef<[u32]>>(
        &self,
        adapters: &Adapters,
        batch: &[S],
        base_grads: Option<&mut Weights>,
    ) -> Result<(f64, Adapters)> {
        self.check_batch(batch)?;
        let hd = self.config.head_dim();
        let mut agrad = adapters.zeros_like();
        let mut base_grads = base_grads;
        let mut loss = 0.0;
        let norm = 1.0 / batch.len() as f64;
        for s in batch {
            let tokens = s.as_ref();
            let (logits, cache) = forward::forward(&self.weights, hd, Some(adapters), tokens);
            let (l, dlogits) = forward::next_token_loss(&logits, tokens, true);
            loss += l * norm;
            let dlogits = dlogits.expect("gradient requested") * norm;
            forward::backward(
                &self.weights,
                hd,
                Some(adapters),
                &cache,
                &dlogits,
                base_grads.as_deref_mut(),
                Some(&mut agrad),
            );
        }
        Ok((loss, agrad))
    }

    /// Scalar parameter count. With `prunable_only`, counts only the attention
    /// and MLP matrices of layers inside the prunable range.
    pub fn count_params(&self, prunable_only: bool) -> usize {
        if !prunable_only {
            return self.weights.param_count();
        }
        self.weights
            .layers
            .iter()
            .enumerate()
            .filter(|(l, _)| self.config.is_prunable(*l))
            .map(|(_, lw)| {
                lw.wq.len() + lw.wk.len() + lw.wv.len() + lw.wo.len() + lw.w_up.len() + lw.w_down.len()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerLM {
        TransformerLM::new(ModelConfig::tiny(32, 16, 2, 2, 32).with_seed(7)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny(64, 32, 2, 4, 64).with_seed(3);
        let a = TransformerLM::new(cfg.clone()).unwrap();
        let b = TransformerLM::new(cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_count_matches_hand_tally() {
        // vocab=64, d=32, 2 layers, d_ff=64, max_seq_len=16:
        //   tok 64*32=2048, pos 16*32=512,
        //   per layer: 4*32*32=4096 attention + 2*32*64=4096 MLP + 4*32=128 norms,
        //   final norm 64.
        let m = TransformerLM::new(ModelConfig::tiny(64, 32, 2, 4, 64)).unwrap();
        assert_eq!(m.count_params(false), 2048 + 512 + 2 * (4096 + 4096 + 128) + 64);
        assert_eq!(m.count_params(false), 19264);
        assert_eq!(m.count_params(true), 2 * (4096 + 4096));
    }

    #[test]
    fn empty_prune_range_counts_nothing() {
        let cfg = ModelConfig::tiny(64, 32, 2, 4, 64).with_prune_layers(1..1);
        let m = TransformerLM::new(cfg).unwrap();
        assert_eq!(m.count_params(true), 0);
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let mut m = small();
        m.weights.tok_emb.fill(0.0);
        let loss = m.loss(&[vec![1u32, 5, 9, 3]]).unwrap();
        assert!((loss - (32f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_sample_keeps_loss() {
        let m = small();
        let x = vec![1u32, 2, 3, 4, 5];
        let one = m.loss(std::slice::from_ref(&x)).unwrap();
        let two = m.loss(&[x.clone(), x]).unwrap();
        assert!((one - two).abs() <= 1e-14 * one.abs());
    }

    #[test]
    fn rejects_bad_batches() {
        let m = small();
        assert!(matches!(m.loss::<Vec<u32>>(&[]), Err(Error::EmptyBatch)));
        assert!(matches!(
            m.loss(&[vec![1u32, 40]]),
            Err(Error::TokenOutOfRange { id: 40, .. })
        ));
        assert!(matches!(m.loss(&[vec![1u32]]), Err(Error::SequenceLength { .. })));
        assert!(matches!(m.loss(&[vec![1u32; 17]]), Err(Error::SequenceLength { .. })));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let m = small();
        let g = m.gradients(&[vec![1u32, 2, 3, 4]], false).unwrap();
        // Position rows past the sequence never take part in the forward pass.
        // The final position predicts nothing and is attended by no one.
        for t in 3..m.config.max_seq_len {
            assert!(g.batch.pos_emb.row(t).iter().all(|v| *v == 0.0));
        }
        assert!(g.batch.pos_emb.row(2).iter().any(|v| *v != 0.0));
        // Absent tokens still receive the tied output-head gradient through the
        // softmax normaliser, so their rows are non-zero.
        assert!(g.batch.tok_emb.row(20).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let m = small();
        let batch = vec![vec![1u32, 2, 3, 4, 5], vec![7u32, 7, 1, 0], vec![31u32, 2, 9]];
        let g = m.gradients(&batch, true).unwrap();
        let samples = g.samples().unwrap();
        let mut mean = m.weights.zeros_like();
        for s in samples {
            mean.add_scaled(1.0, s);
        }
        mean.scale(1.0 / 3.0);
        for ((_, a), (_, b)) in g.batch.tensors().iter().zip(mean.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1e-300));
            }
        }
    }
}
