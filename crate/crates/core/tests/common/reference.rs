//! Straight-line scalar re-implementation of the model's forward pass.
//!
//! Shares no code with the library's ndarray path. Heads can be masked out of
//! the attention sum and MLP branches skipped, which makes it the oracle for
//! masking and structural-pruning checks.

use samprune::model::TransformerLM;

pub struct Masks {
    /// `heads[layer][h] == false` drops head `h` from the output sum.
    pub heads: Vec<Vec<bool>>,
    /// Skip the whole MLP branch of a layer.
    pub skip_mlp: Vec<bool>,
}

impl Masks {
    pub fn none(model: &TransformerLM) -> Self {
        let hd = model.config.head_dim();
        Self {
            heads: model
                .weights
                .layers
                .iter()
                .map(|l| vec![true; l.wq.nrows() / hd])
                .collect(),
            skip_mlp: vec![false; model.weights.layers.len()],
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn logits(model: &TransformerLM, tokens: &[u32], masks: &Masks) -> Vec<Vec<f64>> {
    let w = &model.weights;
    let d = model.config.d_model;
    let hd = model.config.head_dim();
    let t_len = tokens.len();
    let mut x: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..d).map(|i| w.tok_emb[[tokens[t] as usize, i]] + w.pos_emb[[t, i]]).collect())
        .collect();

    for (l, lw) in w.layers.iter().enumerate() {
        let g1 = lw.ln1_g.to_vec();
        let b1 = lw.ln1_b.to_vec();
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &g1, &b1)).collect();
        let heads = lw.wq.nrows() / hd;
        let mut attn_out = vec![vec![0.0; d]; t_len];
        for head in 0..heads {
            if !masks.heads[l][head] {
                continue;
            }
            let proj = |m: &ndarray::Array2<f64>, t: usize| -> Vec<f64> {
                (0..hd)
                    .map(|r| (0..d).map(|c| m[[head * hd + r, c]] * h[t][c]).sum())
                    .collect()
            };
            let q: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&lw.wq, t)).collect();
            let k: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&lw.wk, t)).collect();
            let v: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&lw.wv, t)).collect();
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| (0..hd).map(|i| q[t][i] * k[s][i]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let o: Vec<f64> = (0..hd)
                    .map(|i| (0..=t).map(|s| e[s] / z * v[s][i]).sum())
                    .collect();
                for r in 0..d {
                    attn_out[t][r] += (0..hd).map(|i| lw.wo[[r, head * hd + i]] * o[i]).sum::<f64>();
                }
            }
        }
        for t in 0..t_len {
            for r in 0..d {
                x[t][r] += attn_out[t][r];
            }
        }
        if !masks.skip_mlp[l] {
            let g2 = lw.ln2_g.to_vec();
            let b2 = lw.ln2_b.to_vec();
            let ff = lw.w_up.ncols();
            for row in x.iter_mut() {
                let h2 = layer_norm(row, &g2, &b2);
                let a: Vec<f64> = (0..ff)
                    .map(|j| gelu((0..d).map(|i| h2[i] * lw.w_up[[i, j]]).sum()))
                    .collect();
                for r in 0..d {
                    row[r] += (0..ff).map(|j| a[j] * lw.w_down[[j, r]]).sum::<f64>();
                }
            }
        }
    }
    let gf = w.lnf_g.to_vec();
    let bf = w.lnf_b.to_vec();
    x.iter()
        .map(|r| {
            let h = layer_norm(r, &gf, &bf);
            (0..model.config.vocab_size)
                .map(|v| (0..d).map(|i| h[i] * w.tok_emb[[v, i]]).sum())
                .collect()
        })
        .collect()
}

/// Mean next-token cross-entropy from [`logits`].
pub fn loss(model: &TransformerLM, tokens: &[u32], masks: &Masks) -> f64 {
    let lg = logits(model, tokens, masks);
    let mut total = 0.0;
    for t in 0..tokens.len() - 1 {
        let m = lg[t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lg[t].iter().map(|v| (v - m).exp()).sum();
        total += m + z.ln() - lg[t][tokens[t + 1] as usize];
    }
    total / (tokens.len() - 1) as f64
}
