use std::collections::BTreeMap;

use ndarray::Array2;

use super::weights::LayerParam;

/// Additive low-rank update `scale * B A` for one weight matrix.
///
/// `a` is `[rank, in]` and `b` is `[out, rank]`, where `in`/`out` are the
/// input and output widths of the linear map regardless of how the base matrix
/// is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
            scale: self.scale,
        }
    }

    /// Dense `[out, in]` update this adapter represents.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }
}

/// Low-rank adapters keyed by layer and target matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adapters {
    pub layers: Vec<BTreeMap<LayerParam, LowRank>>,
}

impl Adapters {
    pub fn get(&self, layer: usize, p: LayerParam) -> Option<&LowRank> {
        self.layers.get(layer).and_then(|m| m.get(&p))
    }

    pub fn get_mut(&mut self, layer: usize, p: LayerParam) -> Option<&mut LowRank> {
        self.layers.get_mut(layer).and_then(|m| m.get_mut(&p))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|m| m.iter().map(|(k, v)| (*k, v.zeros_like())).collect())
                .collect(),
        }
    }

    /// Flat views of every `A` and `B`, in layer then target order.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for m in &self.layers {
            for lr in m.values() {
                out.push(lr.a.as_slice().expect("contiguous"));
                out.push(lr.b.as_slice().expect("contiguous"));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for m in &mut self.layers {
            for lr in m.values_mut() {
                out.push(lr.a.as_slice_mut().expect("contiguous"));
                out.push(lr.b.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }
}
