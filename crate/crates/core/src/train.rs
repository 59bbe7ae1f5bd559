//! Full-parameter language-model training for the base model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Loss at the start and after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains every parameter with Adam on shuffled mini-batches.
pub fn train_lm(model: &mut TransformerLM, sequences: &[Vec<u32>], opts: &TrainOptions) -> Result<TrainLog> {
    if sequences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let initial_loss = model.loss(sequences)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| sequences[i].as_slice()).collect();
            let grads = model.gradients(&batch, false)?;
            let g = grads.batch.tensors();
            let params = model.weights.tensors_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(params, g.into_iter().map(|(_, t)| t).collect());
        }
        let loss = model.loss(sequences)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        log::info!("epoch {epoch}: loss {loss:.4}");
        epoch_losses.push(loss);
    }
    Ok(TrainLog {
        initial_loss,
        epoch_losses,
    })
}
