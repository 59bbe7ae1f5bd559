use std::path::Path;

use crate::container::{Container, Kind};
use crate::error::{Error, Result};

use super::config::{LayerShape, ModelConfig, ModelShape};
use super::weights::Weights;
use super::TransformerLM;

impl TransformerLM {
    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut header = vec![
            ("vocab_size".to_string(), c.vocab_size.to_string()),
            ("d_model".into(), c.d_model.to_string()),
            ("n_layers".into(), c.n_layers.to_string()),
            ("n_heads".into(), c.n_heads.to_string()),
            ("d_ff".into(), c.d_ff.to_string()),
            ("max_seq_len".into(), c.max_seq_len.to_string()),
            ("prune_start".into(), c.prune_start.to_string()),
            ("prune_end".into(), c.prune_end.to_string()),
            ("seed".into(), c.seed.to_string()),
        ];
        for (l, s) in self.shape().layers.iter().enumerate() {
            header.push((format!("layer.{l}.heads"), s.heads.to_string()));
            header.push((format!("layer.{l}.d_ff"), s.d_ff.to_string()));
        }
        let values = self
            .weights
            .tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect();
        Container {
            kind: Kind::Model,
            header,
            values,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != Kind::Model {
            return Err(Error::format("checkpoint", "not a model checkpoint"));
        }
        let config = ModelConfig {
            vocab_size: c.parse("vocab_size")?,
            d_model: c.parse("d_model")?,
            n_layers: c.parse("n_layers")?,
            n_heads: c.parse("n_heads")?,
            d_ff: c.parse("d_ff")?,
            max_seq_len: c.parse("max_seq_len")?,
            prune_start: c.parse("prune_start")?,
            prune_end: c.parse("prune_end")?,
            seed: c.parse("seed")?,
        };
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|l| {
                Ok(LayerShape {
                    heads: c.parse(&format!("layer.{l}.heads"))?,
                    d_ff: c.parse(&format!("layer.{l}.d_ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if layers
            .iter()
            .any(|s| s.heads > config.n_heads || s.d_ff > config.d_ff)
        {
            return Err(Error::format("checkpoint", "layer wider than the config allows"));
        }
        let shape = ModelShape {
            config: config.clone(),
            layers,
        };
        let mut weights = Weights::zeros(&shape);
        let expected = weights.param_count();
        if c.values.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!("header implies {expected} values, file has {}", c.values.len()),
            ));
        }
        let mut src = c.values.iter();
        for (_, t) in weights.tensors_mut() {
            for v in t.iter_mut() {
                *v = *src.next().expect("length checked");
            }
        }
        TransformerLM::from_weights(config, weights)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint::fingerprint(&self.to_bytes())
    }
}

pub fn write_model(model: &TransformerLM, path: &Path) -> Result<()> {
    model.to_container().write(path)
}

pub fn read_model(path: &Path) -> Result<TransformerLM> {
    TransformerLM::from_container(&Container::read(path)?)
}
