//! Low-rank adapter fine-tuning of a pruned model, and merging back.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, Kind};
use crate::error::{Error, Result};
use crate::model::{Adapters, LayerParam, LowRank, TransformerLM};
use crate::optim::Adam;

/// Which linear maps get an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Targets {
    Attention,
    Mlp,
    #[default]
    All,
}

impl Targets {
    pub fn params(self) -> &'static [LayerParam] {
        use LayerParam::*;
        match self {
            Targets::Attention => &[Query, Key, Value, Output],
            Targets::Mlp => &[Up, Down],
            Targets::All => &[Query, Key, Value, Output, Up, Down],
        }
    }
}

impl fmt::Display for Targets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Targets::Attention => "attention",
            Targets::Mlp => "mlp",
            Targets::All => "all",
        })
    }
}

impl FromStr for Targets {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Targets::Attention),
            "mlp" => Ok(Targets::Mlp),
            "all" => Ok(Targets::All),
            _ => Err(Error::Config(format!("unknown adapter targets {s:?}, expected attention, mlp or all"))),
        }
    }
}

/// `(in, out)` widths of a layer's linear map.
fn io_dims(model: &TransformerLM, layer: usize, p: LayerParam) -> (usize, usize) {
    let w = model.weights.layer_matrix(layer, p).expect("matrix parameter");
    match p {
        // Stored `[in, out]`.
        LayerParam::Up | LayerParam::Down => (w.nrows(), w.ncols()),
        _ => (w.ncols(), w.nrows()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOptions {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub targets: Targets,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self { rank: 4, epochs: 2, lr: 1e-4, batch_size: 4, seed: 0, targets: Targets::All }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLog {
    pub initial_loss: f64,
    /// Mean loss over the data after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// A frozen base model with trainable low-rank adapters.
#[derive(Debug, Clone)]
pub struct LoraModel {
    pub base: TransformerLM,
    pub adapters: Adapters,
    pub rank: usize,
    pub targets: Targets,
    consumed: bool,
}

/// Attaches rank-`rank` adapters with `scale = 1/rank`. `A` starts as small
/// seeded noise and `B` at zero, so outputs are unchanged until training.
/// Matrices pruned down to zero width get no adapter.
pub fn attach(base: TransformerLM, rank: usize, targets: Targets, seed: u64) -> Result<LoraModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / rank as f64;
    let mut layers = Vec::with_capacity(base.config.n_layers);
    for l in 0..base.config.n_layers {
        let mut map = BTreeMap::new();
        for &p in targets.params() {
            let (din, dout) = io_dims(&base, l, p);
            if din == 0 || dout == 0 {
                continue;
            }
            if rank == 0 || rank > din.min(dout) {
                return Err(Error::InvalidRank { rank, target: format!("layers.{l}.{}", p.name()), rows: dout, cols: din });
            }
            let bound = 1.0 / (din as f64).sqrt();
            let a = Array2::from_shape_simple_fn((rank, din), || rng.gen_range(-bound..bound));
            map.insert(p, LowRank { a, b: Array2::zeros((dout, rank)), scale });
        }
        layers.push(map);
    }
    Ok(LoraModel { base, adapters: Adapters { layers }, rank, targets, consumed: false })
}

impl LoraModel {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.base.logits_with(Some(&self.adapters), tokens)
    }

    pub fn loss<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<f64> {
        self.base.loss_with(Some(&self.adapters), batch)
    }

    /// Adam on the adapter matrices only; the base weights never change.
    /// Aborts when the loss exceeds ten times its starting value.
    pub fn finetune(&mut self, data: &[Vec<u32>], opts: &RecoveryOptions) -> Result<FinetuneLog> {
        if self.consumed {
            return Err(Error::AdapterConsumed);
        }
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let initial_loss = self.loss(data)?;
        if !initial_loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = Adam::new(opts.lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch_size) {
                let batch: Vec<&[u32]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
                let (loss, grads) = self.base.gradients_with_adapters(&self.adapters, &batch, None)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss);
                }
                if loss > 10.0 * initial_loss {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}: batch loss {loss:.4} exceeds ten times the initial {initial_loss:.4}"
                    )));
                }
                opt.step(self.adapters.buffers_mut(), grads.buffers());
            }
            let loss = self.loss(data)?;
            log::info!("recovery epoch {epoch}: loss {loss:.4}");
            epoch_losses.push(loss);
        }
        Ok(FinetuneLog { initial_loss, epoch_losses })
    }

    /// Folds `scale * B A` into the base weights. The adapter can be merged once.
    pub fn merge(&mut self) -> Result<TransformerLM> {
        if self.consumed {
            return Err(Error::AdapterConsumed);
        }
        let mut merged = self.base.clone();
        for (l, map) in self.adapters.layers.iter().enumerate() {
            for (&p, lr) in map {
                let delta = lr.delta();
                let w = merged.weights.layer_matrix_mut(l, p).expect("matrix parameter");
                match p {
                    LayerParam::Up | LayerParam::Down => *w += &delta.t(),
                    _ => *w += &delta,
                }
            }
        }
        self.consumed = true;
        Ok(merged)
    }

    /// Adapter checkpoint: rank, scale, base fingerprint and one manifest entry
    /// per adapted matrix, followed by every `A` then `B` in manifest order.
    pub fn to_container(&self) -> Container {
        let mut header = vec![
            ("rank".to_string(), self.rank.to_string()),
            ("scale".into(), format!("{:e}", 1.0 / self.rank as f64)),
            ("targets".into(), self.targets.to_string()),
            ("base".into(), self.base.fingerprint()),
        ];
        let mut manifest = Vec::new();
        let mut values = Vec::new();
        for (l, map) in self.adapters.layers.iter().enumerate() {
            for (p, lr) in map {
                manifest.push(format!("layers.{l}.{}:{}x{}", p.name(), lr.b.nrows(), lr.a.ncols()));
                values.extend(lr.a.iter());
                values.extend(lr.b.iter());
            }
        }
        header.push(("manifest".into(), manifest.join(",")));
        Container { kind: Kind::Adapter, header, values }
    }

    /// Rebuilds adapters for `base`, which must be the model they were trained on.
    pub fn from_container(base: TransformerLM, c: &Container) -> Result<Self> {
        if c.kind != Kind::Adapter {
            return Err(Error::format("adapter", "not an adapter checkpoint"));
        }
        let fp = c.get("base")?;
        if fp != base.fingerprint() {
            return Err(Error::PlanMismatch(format!("adapter trained on model {fp}, got {}", base.fingerprint())));
        }
        let rank: usize = c.parse("rank")?;
        let targets: Targets = c.parse("targets").map_err(|_| Error::format("adapter", "bad targets"))?;
        let mut lora = attach(base, rank, targets, 0)?;
        let manifest: Vec<String> = lora
            .adapters
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, map)| map.iter().map(move |(p, lr)| format!("layers.{l}.{}:{}x{}", p.name(), lr.b.nrows(), lr.a.ncols())))
            .collect();
        if c.get("manifest")? != manifest.join(",") {
            return Err(Error::format("adapter", "manifest does not match the base model"));
        }
        if c.values.len() != lora.adapters.param_count() {
            return Err(Error::format("adapter", format!("expected {} values, found {}", lora.adapters.param_count(), c.values.len())));
        }
        let mut offset = 0;
        for buf in lora.adapters.buffers_mut() {
            buf.copy_from_slice(&c.values[offset..offset + buf.len()]);
            offset += buf.len();
        }
        Ok(lora)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(base: TransformerLM, path: &Path) -> Result<Self> {
        Self::from_container(base, &Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> TransformerLM {
        TransformerLM::new(ModelConfig::tiny(32, 16, 2, 2, 32).with_seed(3)).unwrap()
    }

    fn data() -> Vec<Vec<u32>> {
        (0..6).map(|s| (0..12).map(|i| ((i * 5 + s * 3) % 32) as u32).collect()).collect()
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let m = small();
        let lora = attach(m.clone(), 4, Targets::All, 1).unwrap();
        let t = &data()[0];
        assert_eq!(lora.logits(t).unwrap(), m.logits(t).unwrap());
    }

    #[test]
    fn rank_is_bounded_by_target_dims() {
        assert!(matches!(attach(small(), 17, Targets::Attention, 0), Err(Error::InvalidRank { rank: 17, .. })));
        assert!(attach(small(), 0, Targets::All, 0).is_err());
        // The narrowest map is 16 wide.
        attach(small(), 16, Targets::All, 0).unwrap();
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut lora = attach(small(), 2, Targets::All, 1).unwrap();
        let before = lora.adapters.clone();
        let log = lora.finetune(&data(), &RecoveryOptions { lr: 0.0, epochs: 2, ..Default::default() }).unwrap();
        assert_eq!(lora.adapters, before);
        assert!(log.epoch_losses.iter().all(|&l| l == log.initial_loss));
    }

    #[test]
    fn finetune_lowers_loss_and_freezes_base() {
        let m = small();
        let mut lora = attach(m.clone(), 4, Targets::All, 1).unwrap();
        let log = lora.finetune(&data(), &RecoveryOptions { lr: 1e-2, epochs: 5, ..Default::default() }).unwrap();
        assert!(*log.epoch_losses.last().unwrap() < log.initial_loss);
        assert_eq!(lora.base.weights, m.weights);
    }

    #[test]
    fn merge_matches_adapted_forward_once() {
        let mut lora = attach(small(), 4, Targets::All, 1).unwrap();
        lora.finetune(&data(), &RecoveryOptions { lr: 1e-2, epochs: 3, ..Default::default() }).unwrap();
        let t = &data()[1];
        let adapted = lora.logits(t).unwrap();
        let merged = lora.merge().unwrap().logits(t).unwrap();
        for (a, b) in adapted.iter().zip(&merged) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
        assert!(matches!(lora.merge(), Err(Error::AdapterConsumed)));
        assert!(lora.is_consumed());
    }

    #[test]
    fn adapter_checkpoint_round_trips() {
        let mut lora = attach(small(), 2, Targets::Mlp, 5).unwrap();
        lora.finetune(&data(), &RecoveryOptions { lr: 1e-2, epochs: 1, ..Default::default() }).unwrap();
        let back = LoraModel::from_container(small(), &lora.to_container()).unwrap();
        assert_eq!(back.adapters, lora.adapters);
        let other = TransformerLM::new(ModelConfig::tiny(32, 16, 2, 2, 32).with_seed(4)).unwrap();
        assert!(LoraModel::from_container(other, &lora.to_container()).is_err());
    }
}
