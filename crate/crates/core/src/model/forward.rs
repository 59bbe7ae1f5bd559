//! Forward pass, next-token loss and reverse-mode gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::lowrank::{Adapters, LowRank};
use super::weights::{LayerParam, LayerWeights, Weights};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy)]
enum Layout {
    /// Stored `[out, in]`: `y = x Wᵀ`.
    OutIn,
    /// Stored `[in, out]`: `y = x W`.
    InOut,
}

fn layout(p: LayerParam) -> Layout {
    match p {
        LayerParam::Up | LayerParam::Down => Layout::InOut,
        _ => Layout::OutIn,
    }
}

fn linear(x: ArrayView2<f64>, w: &Array2<f64>, p: LayerParam, ad: Option<&LowRank>) -> Array2<f64> {
    let mut y = match layout(p) {
        Layout::OutIn => x.dot(&w.t()),
        Layout::InOut => x.dot(w),
    };
    if let Some(lr) = ad {
        let u = x.dot(&lr.a.t());
        y.scaled_add(lr.scale, &u.dot(&lr.b.t()));
    }
    y
}

/// Accumulates parameter gradients and returns `dL/dx`.
fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    p: LayerParam,
    ad: Option<&LowRank>,
    dy: &Array2<f64>,
    gw: Option<&mut Array2<f64>>,
    gad: Option<&mut LowRank>,
) -> Array2<f64> {
    let mut dx = match layout(p) {
        Layout::OutIn => {
            if let Some(gw) = gw {
                gw.scaled_add(1.0, &dy.t().dot(&x));
            }
            dy.dot(w)
        }
        Layout::InOut => {
            if let Some(gw) = gw {
                gw.scaled_add(1.0, &x.t().dot(dy));
            }
            dy.dot(&w.t())
        }
    };
    if let Some(lr) = ad {
        let u = x.dot(&lr.a.t());
        let du = dy.dot(&lr.b) * lr.scale;
        if let Some(g) = gad {
            g.b.scaled_add(lr.scale, &dy.t().dot(&u));
            g.a.scaled_add(1.0, &du.t().dot(&x));
        }
        dx.scaled_add(1.0, &du.dot(&lr.a));
    }
    dx
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &NormCache,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((gg, gb)) = grads {
        *gg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *gb += &dy.sum_axis(Axis(0));
    }
    let n = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let dh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_dh = dh.sum() / n;
        let mean_dhx = dh.dot(&xh) / n;
        let s = cache.inv_std[t];
        Zip::from(dx.row_mut(t))
            .and(&dh)
            .and(&xh)
            .for_each(|o, &d, &x| *o = s * (d - mean_dh - x * mean_dhx));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct LayerCache {
    ln1: NormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Causal attention probabilities per head, `[T, T]` with zeros above the diagonal.
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: NormCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

pub(crate) struct Cache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    hf: Array2<f64>,
}

/// Forward pass over one sequence. Returns `[T, vocab]` logits and the
/// activations needed by [`backward`].
pub(crate) fn forward(
    w: &Weights,
    head_dim: usize,
    adapters: Option<&Adapters>,
    tokens: &[u32],
) -> (Array2<f64>, Cache) {
    let t_len = tokens.len();
    let d = w.tok_emb.ncols();
    let mut x = Array2::zeros((t_len, d));
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t);
        row += &w.tok_emb.row(tok as usize);
        row += &w.pos_emb.row(t);
    }

    let mut layers = Vec::with_capacity(w.layers.len());
    for (l, lw) in w.layers.iter().enumerate() {
        let ad = |p| adapters.and_then(|a| a.get(l, p));
        let (h1, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = linear(h1.view(), &lw.wq, LayerParam::Query, ad(LayerParam::Query));
        let k = linear(h1.view(), &lw.wk, LayerParam::Key, ad(LayerParam::Key));
        let v = linear(h1.view(), &lw.wv, LayerParam::Value, ad(LayerParam::Value));
        let heads = lw.inner_dim() / head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut o = Array2::zeros((t_len, lw.inner_dim()));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let mut p = Array2::zeros((t_len, t_len));
            for t in 0..t_len {
                let mut row: Vec<f64> = scores.slice(s![t, ..=t]).to_vec();
                softmax_in_place(&mut row);
                p.slice_mut(s![t, ..=t]).assign(&ArrayView1::from(&row[..]));
            }
            o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        if heads > 0 {
            x += &linear(o.view(), &lw.wo, LayerParam::Output, ad(LayerParam::Output));
        }

        let (h2, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let (u, a) = if lw.d_ff() > 0 {
            let u = linear(h2.view(), &lw.w_up, LayerParam::Up, ad(LayerParam::Up));
            let a = u.mapv(gelu);
            x += &linear(a.view(), &lw.w_down, LayerParam::Down, ad(LayerParam::Down));
            (u, a)
        } else {
            (Array2::zeros((t_len, 0)), Array2::zeros((t_len, 0)))
        };
        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            h2,
            u,
            a,
        });
    }

    let (hf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    let logits = hf.dot(&w.tok_emb.t());
    (
        logits,
        Cache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            hf,
        },
    )
}

/// Mean next-token cross-entropy over positions `0..T-1` and, optionally, its
/// gradient with respect to the logits.
pub(crate) fn next_token_loss(logits: &Array2<f64>, tokens: &[u32], want_grad: bool) -> (f64, Option<Array2<f64>>) {
    let predicted = tokens.len() - 1;
    let norm = 1.0 / predicted as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array2::zeros(logits.raw_dim()));
    for t in 0..predicted {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let target = tokens[t + 1] as usize;
        total += log_z - row[target];
        if let Some(g) = grad.as_mut() {
            let mut gr = g.row_mut(t);
            Zip::from(&mut gr).and(&row).for_each(|o, &v| *o = (v - log_z).exp() * norm);
            gr[target] -= norm;
        }
    }
    (total * norm, grad)
}

/// Reverse pass. Adds `dL/dθ` into `wgrad` and `dL/d(A, B)` into `agrad` for
/// whichever of the two is provided.
pub(crate) fn backward(
    w: &Weights,
    head_dim: usize,
    adapters: Option<&Adapters>,
    cache: &Cache,
    dlogits: &Array2<f64>,
    mut wgrad: Option<&mut Weights>,
    mut agrad: Option<&mut Adapters>,
) {
    // logits = hf Eᵀ
    if let Some(g) = wgrad.as_deref_mut() {
        g.tok_emb.scaled_add(1.0, &dlogits.t().dot(&cache.hf));
    }
    let dhf = dlogits.dot(&w.tok_emb);
    let mut dx = layer_norm_backward(
        &dhf,
        &w.lnf_g,
        &cache.lnf,
        wgrad.as_deref_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
    );

    for l in (0..w.layers.len()).rev() {
        let lw: &LayerWeights = &w.layers[l];
        let lc = &cache.layers[l];
        let ad = |p| adapters.and_then(|a| a.get(l, p));

        // MLP branch: x_out = x_mid + GELU(h2 W_up) W_down
        if lw.d_ff() > 0 {
            let da = linear_backward(
                lc.a.view(),
                &lw.w_down,
                LayerParam::Down,
                ad(LayerParam::Down),
                &dx,
                wgrad.as_deref_mut().map(|g| &mut g.layers[l].w_down),
                agrad.as_deref_mut().and_then(|g| g.get_mut(l, LayerParam::Down)),
            );
            let mut du = da;
            Zip::from(&mut du).and(&lc.u).for_each(|d, &u| *d *= gelu_grad(u));
            let dh2 = linear_backward(
                lc.h2.view(),
                &lw.w_up,
                LayerParam::Up,
                ad(LayerParam::Up),
                &du,
                wgrad.as_deref_mut().map(|g| &mut g.layers[l].w_up),
                agrad.as_deref_mut().and_then(|g| g.get_mut(l, LayerParam::Up)),
            );
            let dmid = layer_norm_backward(
                &dh2,
                &lw.ln2_g,
                &lc.ln2,
                wgrad.as_deref_mut().map(|g| {
                    let lg = &mut g.layers[l];
                    (&mut lg.ln2_g, &mut lg.ln2_b)
                }),
            );
            dx += &dmid;
        }

        // Attention branch: x_mid = x_in + concat_h(P_h V_h) Woᵀ
        let heads = lw.inner_dim() / head_dim;
        if heads > 0 {
            let d_o = linear_backward(
                lc.o.view(),
                &lw.wo,
                LayerParam::Output,
                ad(LayerParam::Output),
                &dx,
                wgrad.as_deref_mut().map(|g| &mut g.layers[l].wo),
                agrad.as_deref_mut().and_then(|g| g.get_mut(l, LayerParam::Output)),
            );
            let scale = 1.0 / (head_dim as f64).sqrt();
            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for h in 0..heads {
                let cols = s![.., h * head_dim..(h + 1) * head_dim];
                let p = &lc.probs[h];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                // softmax backward, row-wise: dS = P ⊙ (dP − Σ_j dP_j P_j)
                let mut ds = &dp * p;
                for t in 0..ds.nrows() {
                    let dot: f64 = ds.row(t).sum();
                    let mut row = ds.row_mut(t);
                    Zip::from(&mut row).and(&p.row(t)).for_each(|o, &pv| *o -= pv * dot);
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let mut dh1 = linear_backward(
                lc.h1.view(),
                &lw.wq,
                LayerParam::Query,
                ad(LayerParam::Query),
                &dq,
                wgrad.as_deref_mut().map(|g| &mut g.layers[l].wq),
                agrad.as_deref_mut().and_then(|g| g.get_mut(l, LayerParam::Query)),
            );
            dh1 += &linear_backward(
                lc.h1.view(),
                &lw.wk,
                LayerParam::Key,
                ad(LayerParam::Key),
                &dk,
                wgrad.as_deref_mut().map(|g| &mut g.layers[l].wk),
                agrad.as_deref_mut().and_then(|g| g.get_mut(l, LayerParam::Key)),
            );
            dh1 += &linear_backward(
                lc.h1.view(),
                &lw.wv,
                LayerParam::Value,
                ad(LayerParam::Value),
                &dv,
                wgrad.as_deref_mut().map(|g| &mut g.layers[l].wv),
                agrad.as_deref_mut().and_then(|g| g.get_mut(l, LayerParam::Value)),
            );
            let din = layer_norm_backward(
                &dh1,
                &lw.ln1_g,
                &lc.ln1,
                wgrad.as_deref_mut().map(|g| {
                    let lg = &mut g.layers[l];
                    (&mut lg.ln1_g, &mut lg.ln1_b)
                }),
            );
            dx += &din;
        }
    }

    if let Some(g) = wgrad {
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = dx.row(t);
            let mut e = g.tok_emb.row_mut(tok as usize);
            e += &row;
            let mut pe = g.pos_emb.row_mut(t);
            pe += &row;
        }
    }
}
