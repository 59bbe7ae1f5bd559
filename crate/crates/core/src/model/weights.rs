use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerShape, ModelConfig, ModelShape};

/// Tensors owned by one transformer layer.
///
/// Attention projections use the `[out, in]` layout (`q = x Wqᵀ`), so a head
/// owns a block of rows in `wq`/`wk`/`wv` and the matching block of columns in
/// `wo`. MLP matrices use `[in, out]` (`u = x W_up`), so a channel owns one
/// column of `w_up` and one row of `w_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    Query,
    Key,
    Value,
    Output,
    Ln2Gain,
    Ln2Bias,
    Up,
    Down,
}

impl LayerParam {
    pub const ALL: [LayerParam; 10] = [
        LayerParam::Ln1Gain,
        LayerParam::Ln1Bias,
        LayerParam::Query,
        LayerParam::Key,
        LayerParam::Value,
        LayerParam::Output,
        LayerParam::Ln2Gain,
        LayerParam::Ln2Bias,
        LayerParam::Up,
        LayerParam::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerParam::Ln1Gain => "ln1_g",
            LayerParam::Ln1Bias => "ln1_b",
            LayerParam::Query => "wq",
            LayerParam::Key => "wk",
            LayerParam::Value => "wv",
            LayerParam::Output => "wo",
            LayerParam::Ln2Gain => "ln2_g",
            LayerParam::Ln2Bias => "ln2_b",
            LayerParam::Up => "w_up",
            LayerParam::Down => "w_down",
        }
    }

    /// Attention or MLP matrix, as opposed to a normalisation vector.
    pub fn is_matrix(self) -> bool {
        matches!(
            self,
            LayerParam::Query
                | LayerParam::Key
                | LayerParam::Value
                | LayerParam::Output
                | LayerParam::Up
                | LayerParam::Down
        )
    }
}

/// Name of a parameter tensor, in checkpoint declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize, LayerParam),
    FinalGain,
    FinalBias,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::TokenEmbedding => f.write_str("tok_emb"),
            ParamId::PositionEmbedding => f.write_str("pos_emb"),
            ParamId::Layer(l, p) => write!(f, "layers.{l}.{}", p.name()),
            ParamId::FinalGain => f.write_str("lnf_g"),
            ParamId::FinalBias => f.write_str("lnf_b"),
        }
    }
}

/// Full parameter set of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
}

impl LayerWeights {
    fn zeros(d: usize, inner: usize, d_ff: usize) -> Self {
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((inner, d)),
            wk: Array2::zeros((inner, d)),
            wv: Array2::zeros((inner, d)),
            wo: Array2::zeros((d, inner)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_up: Array2::zeros((d, d_ff)),
            w_down: Array2::zeros((d_ff, d)),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_up.ncols()
    }

    pub fn vector(&self, p: LayerParam) -> Option<&Array1<f64>> {
        match p {
            LayerParam::Ln1Gain => Some(&self.ln1_g),
            LayerParam::Ln1Bias => Some(&self.ln1_b),
            LayerParam::Ln2Gain => Some(&self.ln2_g),
            LayerParam::Ln2Bias => Some(&self.ln2_b),
            _ => None,
        }
    }

    pub fn matrix(&self, p: LayerParam) -> Option<&Array2<f64>> {
        match p {
            LayerParam::Query => Some(&self.wq),
            LayerParam::Key => Some(&self.wk),
            LayerParam::Value => Some(&self.wv),
            LayerParam::Output => Some(&self.wo),
            LayerParam::Up => Some(&self.w_up),
            LayerParam::Down => Some(&self.w_down),
            _ => None,
        }
    }

    pub fn matrix_mut(&mut self, p: LayerParam) -> Option<&mut Array2<f64>> {
        match p {
            LayerParam::Query => Some(&mut self.wq),
            LayerParam::Key => Some(&mut self.wk),
            LayerParam::Value => Some(&mut self.wv),
            LayerParam::Output => Some(&mut self.wo),
            LayerParam::Up => Some(&mut self.w_up),
            LayerParam::Down => Some(&mut self.w_down),
            _ => None,
        }
    }
}

impl Weights {
    /// All-zero tensors with the given shape.
    pub fn zeros(shape: &ModelShape) -> Self {
        let c = &shape.config;
        let d = c.d_model;
        let hd = c.head_dim();
        Self {
            tok_emb: Array2::zeros((c.vocab_size, d)),
            pos_emb: Array2::zeros((c.max_seq_len, d)),
            layers: shape
                .layers
                .iter()
                .map(|l| LayerWeights::zeros(d, l.heads * hd, l.d_ff))
                .collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
        }
    }

    /// Seeded initialisation: matrices and embeddings uniform in
    /// `±1/sqrt(d_model)`, normalisation gains one and biases zero.
    pub fn init(config: &ModelConfig) -> Self {
        let mut w = Self::zeros(&ModelShape::dense(config));
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (id, data) in w.tensors_mut() {
            let is_gain = matches!(
                id,
                ParamId::FinalGain
                    | ParamId::Layer(_, LayerParam::Ln1Gain)
                    | ParamId::Layer(_, LayerParam::Ln2Gain)
            );
            let is_bias = matches!(
                id,
                ParamId::FinalBias
                    | ParamId::Layer(_, LayerParam::Ln1Bias)
                    | ParamId::Layer(_, LayerParam::Ln2Bias)
            );
            for v in data.iter_mut() {
                *v = if is_gain {
                    1.0
                } else if is_bias {
                    0.0
                } else {
                    rng.gen_range(-scale..scale)
                };
            }
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn layer_shapes(&self, head_dim: usize) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                heads: l.inner_dim() / head_dim,
                d_ff: l.d_ff(),
            })
            .collect()
    }

    /// Every tensor as a flat slice, in declaration order.
    pub fn tensors(&self) -> Vec<(ParamId, &[f64])> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameter tensors are contiguous")
        }
        let mut out = vec![
            (ParamId::TokenEmbedding, flat(&self.tok_emb)),
            (ParamId::PositionEmbedding, flat(&self.pos_emb)),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for p in LayerParam::ALL {
                let data = match layer.vector(p) {
                    Some(v) => flat(v),
                    None => flat(layer.matrix(p).expect("matrix param")),
                };
                out.push((ParamId::Layer(l, p), data));
            }
        }
        out.push((ParamId::FinalGain, flat(&self.lnf_g)));
        out.push((ParamId::FinalBias, flat(&self.lnf_b)));
        out
    }

    /// Mutable counterpart of [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamId, &mut [f64])> {
        fn flat<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameter tensors are contiguous")
        }
        let mut out = vec![
            (ParamId::TokenEmbedding, flat(&mut self.tok_emb)),
            (ParamId::PositionEmbedding, flat(&mut self.pos_emb)),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w_up,
                w_down,
            } = layer;
            out.push((ParamId::Layer(l, LayerParam::Ln1Gain), flat(ln1_g)));
            out.push((ParamId::Layer(l, LayerParam::Ln1Bias), flat(ln1_b)));
            out.push((ParamId::Layer(l, LayerParam::Query), flat(wq)));
            out.push((ParamId::Layer(l, LayerParam::Key), flat(wk)));
            out.push((ParamId::Layer(l, LayerParam::Value), flat(wv)));
            out.push((ParamId::Layer(l, LayerParam::Output), flat(wo)));
            out.push((ParamId::Layer(l, LayerParam::Ln2Gain), flat(ln2_g)));
            out.push((ParamId::Layer(l, LayerParam::Ln2Bias), flat(ln2_b)));
            out.push((ParamId::Layer(l, LayerParam::Up), flat(w_up)));
            out.push((ParamId::Layer(l, LayerParam::Down), flat(w_down)));
        }
        out.push((ParamId::FinalGain, flat(&mut self.lnf_g)));
        out.push((ParamId::FinalBias, flat(&mut self.lnf_b)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().filter(|v| **v != 0.0).count())
            .sum()
    }

    /// `self += alpha * other`; shapes must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &Weights) {
        let src = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(src) {
            assert_eq!(dst.len(), src.len(), "weight shapes differ");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn layer_matrix(&self, layer: usize, p: LayerParam) -> Option<&Array2<f64>> {
        self.layers.get(layer).and_then(|l| l.matrix(p))
    }

    pub fn layer_matrix_mut(&mut self, layer: usize, p: LayerParam) -> Option<&mut Array2<f64>> {
        self.layers.get_mut(layer).and_then(|l| l.matrix_mut(p))
    }
}
