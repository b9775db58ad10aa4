//! Pre-norm decoder-only transformer with a hand-written backward pass.
//!
//! Each sequence of a batch runs at its own length; causal attention means the
//! logits at position `t` only ever see tokens `0..=t`. Rows of the padded
//! `[B × L × V]` logits tensor past a sequence's length are zero and receive no
//! gradient.
//!
//! The query/key/value projection carries no bias: a key bias shifts every
//! attention score of a row by the same amount, so its gradient is identically
//! zero and it could never be trained.

use super::params::{idx, Gradients, ParameterSet};
use crate::error::{Error, Result};
use crate::numerics::ops::{
    gelu_grad_scalar, gelu_scalar, gemm, gemm_a_bt, gemm_at_b, layer_norm_rows, layer_norm_rows_backward,
    LayerNormCache,
};
use crate::numerics::Tensor;

pub type TokenId = u32;

#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Vec<f64>,
    ln1: LayerNormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LayerNormCache,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations of one sequence kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SeqCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    xf: Vec<f64>,
}

/// Logits of a batch plus whatever backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[B × L_max × V]`, zero past each sequence's length.
    pub logits: Tensor,
    pub lengths: Vec<usize>,
    caches: Vec<SeqCache>,
}

fn add_bias(rows: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in rows.chunks_exact_mut(n) {
        for (r, b) in row.iter_mut().zip(bias) {
            *r += b;
        }
    }
}

fn sum_rows_into(rows: &[f64], out: &mut [f64]) {
    let n = out.len();
    for row in rows.chunks_exact(n) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r;
        }
    }
}

pub(crate) fn validate_ids(params: &ParameterSet, ids: &[TokenId]) -> Result<()> {
    let cfg = params.config();
    if ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if ids.len() > cfg.context_len {
        return Err(Error::Length {
            len: ids.len(),
            context_len: cfg.context_len,
        });
    }
    if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {id} at position {pos} is outside the vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Runs one sequence; returns row-major `[L × V]` logits and, optionally, the cache.
pub(crate) fn forward_sequence(
    params: &ParameterSet,
    ids: &[TokenId],
    keep_cache: bool,
) -> Result<(Vec<f64>, Option<SeqCache>)> {
    validate_ids(params, ids)?;
    let cfg = params.config();
    let t = params.tensors();
    let (l, d, v) = (ids.len(), cfg.d_model, cfg.vocab_size);
    let (nh, hd, f) = (cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();

    let tok = t[idx::TOK_EMB].data();
    let pos = t[idx::POS_EMB].data();
    let mut x = vec![0.0; l * d];
    for (p, &id) in ids.iter().enumerate() {
        for c in 0..d {
            x[p * d + c] = tok[id * d + c] + pos[p * d + c];
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut layers = Vec::with_capacity(if keep_cache { cfg.n_layers } else { 0 });
    for layer in 0..cfg.n_layers {
        let w = |which| t[idx::layer(layer, which)].data();
        let mut a = vec![0.0; l * d];
        let ln1 = layer_norm_rows(&x, w(idx::LN1_G), w(idx::LN1_B), d, &mut a);
        let mut qkv = vec![0.0; l * 3 * d];
        gemm(&a, w(idx::W_QKV), l, d, 3 * d, &mut qkv, false);

        let mut probs = vec![0.0; nh * l * l];
        let mut att = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..nh {
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            for i in 0..l {
                let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[c] * k[c];
                    }
                    s *= scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let prow = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                for j in 0..=i {
                    prow[j] = scores[j] / sum;
                }
                let out = &mut att[i * d + h * hd..i * d + h * hd + hd];
                for j in 0..=i {
                    let p = prow[j];
                    let vv = &qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    for c in 0..hd {
                        out[c] += p * vv[c];
                    }
                }
            }
        }
        let mut x1 = x.clone();
        gemm(&att, w(idx::W_ATT_OUT), l, d, d, &mut x1, true);
        add_bias(&mut x1, w(idx::B_ATT_OUT));

        let mut m = vec![0.0; l * d];
        let ln2 = layer_norm_rows(&x1, w(idx::LN2_G), w(idx::LN2_B), d, &mut m);
        let mut u = vec![0.0; l * f];
        gemm(&m, w(idx::W_IN), l, d, f, &mut u, false);
        add_bias(&mut u, w(idx::B_IN));
        let g: Vec<f64> = u.iter().map(|&z| gelu_scalar(z)).collect();
        let mut x2 = x1.clone();
        gemm(&g, w(idx::W_MLP_OUT), l, f, d, &mut x2, true);
        add_bias(&mut x2, w(idx::B_MLP_OUT));

        if keep_cache {
            layers.push(LayerCache {
                x_in: std::mem::take(&mut x),
                ln1,
                a,
                qkv,
                probs,
                att,
                ln2,
                m,
                u,
                g,
            });
        }
        x = x2;
    }

    let fb = idx::final_base(cfg.n_layers);
    let mut xf = vec![0.0; l * d];
    let lnf = layer_norm_rows(&x, t[fb].data(), t[fb + 1].data(), d, &mut xf);
    let mut logits = vec![0.0; l * v];
    gemm(&xf, t[fb + 2].data(), l, d, v, &mut logits, false);
    add_bias(&mut logits, t[fb + 3].data());
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("forward produced non-finite logits".into()));
    }
    let cache = keep_cache.then_some(SeqCache { ids, layers, lnf, xf });
    Ok((logits, cache))
}

/// Accumulates parameter gradients of one sequence given `dlogits [L × V]`.
fn backward_sequence(params: &ParameterSet, cache: &SeqCache, dlogits: &[f64], grads: &mut Gradients) {
    let cfg = params.config();
    let t = params.tensors();
    let g = grads.tensors_mut();
    let l = cache.ids.len();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let (nh, hd, f) = (cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let fb = idx::final_base(cfg.n_layers);
    gemm_at_b(&cache.xf, dlogits, l, d, v, g[fb + 2].data_mut());
    sum_rows_into(dlogits, g[fb + 3].data_mut());
    let mut dxf = vec![0.0; l * d];
    gemm_a_bt(dlogits, t[fb + 2].data(), l, d, v, &mut dxf, false);
    let mut dx = vec![0.0; l * d];
    {
        let (gg, gb) = split_two(g, fb, fb + 1);
        layer_norm_rows_backward(&cache.lnf, t[fb].data(), &dxf, d, &mut dx, gg, gb);
    }

    for layer in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[layer];
        let wi = |which| idx::layer(layer, which);

        // MLP branch: x2 = x1 + gelu(m·W_in + b_in)·W_out + b_out.
        gemm_at_b(&lc.g, &dx, l, f, d, g[wi(idx::W_MLP_OUT)].data_mut());
        sum_rows_into(&dx, g[wi(idx::B_MLP_OUT)].data_mut());
        let mut du = vec![0.0; l * f];
        gemm_a_bt(&dx, t[wi(idx::W_MLP_OUT)].data(), l, f, d, &mut du, false);
        for (dz, &z) in du.iter_mut().zip(&lc.u) {
            *dz *= gelu_grad_scalar(z);
        }
        gemm_at_b(&lc.m, &du, l, d, f, g[wi(idx::W_IN)].data_mut());
        sum_rows_into(&du, g[wi(idx::B_IN)].data_mut());
        let mut dm = vec![0.0; l * d];
        gemm_a_bt(&du, t[wi(idx::W_IN)].data(), l, d, f, &mut dm, false);
        let mut dx1 = dx.clone();
        {
            let (gg, gb) = split_two(g, wi(idx::LN2_G), wi(idx::LN2_B));
            layer_norm_rows_backward(&lc.ln2, t[wi(idx::LN2_G)].data(), &dm, d, &mut dx1, gg, gb);
        }

        // Attention branch: x1 = x + attn(ln1(x))·W_o + b_o.
        gemm_at_b(&lc.att, &dx1, l, d, d, g[wi(idx::W_ATT_OUT)].data_mut());
        sum_rows_into(&dx1, g[wi(idx::B_ATT_OUT)].data_mut());
        let mut datt = vec![0.0; l * d];
        gemm_a_bt(&dx1, t[wi(idx::W_ATT_OUT)].data(), l, d, d, &mut datt, false);

        let mut dqkv = vec![0.0; l * 3 * d];
        let mut dp = vec![0.0; l];
        for h in 0..nh {
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            for i in 0..l {
                let prow = &lc.probs[(h * l + i) * l..(h * l + i + 1) * l];
                let da = &datt[i * d + h * hd..i * d + h * hd + hd];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vv = &lc.qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += da[c] * vv[c];
                    }
                    dp[j] = s;
                    weighted += prow[j] * s;
                    let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    for c in 0..hd {
                        dv[c] += prow[j] * da[c];
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        let kc = lc.qkv[j * 3 * d + ko + c];
                        let qc = lc.qkv[i * 3 * d + qo + c];
                        dqkv[i * 3 * d + qo + c] += ds * kc;
                        dqkv[j * 3 * d + ko + c] += ds * qc;
                    }
                }
            }
        }
        gemm_at_b(&lc.a, &dqkv, l, d, 3 * d, g[wi(idx::W_QKV)].data_mut());
        let mut da = vec![0.0; l * d];
        gemm_a_bt(&dqkv, t[wi(idx::W_QKV)].data(), l, d, 3 * d, &mut da, false);
        let mut dx0 = dx1;
        {
            let (gg, gb) = split_two(g, wi(idx::LN1_G), wi(idx::LN1_B));
            layer_norm_rows_backward(&lc.ln1, t[wi(idx::LN1_G)].data(), &da, d, &mut dx0, gg, gb);
        }
        debug_assert_eq!(lc.x_in.len(), dx0.len());
        dx = dx0;
    }

    for (p, &id) in cache.ids.iter().enumerate() {
        let row = &dx[p * d..(p + 1) * d];
        let tok = &mut g[idx::TOK_EMB].data_mut()[id * d..(id + 1) * d];
        for (a, b) in tok.iter_mut().zip(row) {
            *a += b;
        }
        let pos = &mut g[idx::POS_EMB].data_mut()[p * d..(p + 1) * d];
        for (a, b) in pos.iter_mut().zip(row) {
            *a += b;
        }
    }
}

fn split_two(g: &mut [Tensor], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (lo[a].data_mut(), hi[0].data_mut())
}

/// Batched forward pass keeping activations for [`backward`].
pub fn forward(params: &ParameterSet, batch: &[Vec<TokenId>]) -> Result<ForwardPass> {
    run_batch(params, batch, true)
}

/// Batched logits without keeping activations.
pub fn logits(params: &ParameterSet, batch: &[Vec<TokenId>]) -> Result<Tensor> {
    Ok(run_batch(params, batch, false)?.logits)
}

fn run_batch(params: &ParameterSet, batch: &[Vec<TokenId>], keep: bool) -> Result<ForwardPass> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let v = params.config().vocab_size;
    let max_len = batch.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut data = vec![0.0; batch.len() * max_len * v];
    let mut caches = Vec::with_capacity(if keep { batch.len() } else { 0 });
    let mut lengths = Vec::with_capacity(batch.len());
    for (b, ids) in batch.iter().enumerate() {
        let (lg, cache) = forward_sequence(params, ids, keep)?;
        let start = b * max_len * v;
        data[start..start + lg.len()].copy_from_slice(&lg);
        lengths.push(ids.len());
        if let Some(c) = cache {
            caches.push(c);
        }
    }
    Ok(ForwardPass {
        logits: Tensor::from_parts(vec![batch.len(), max_len, v], data),
        lengths,
        caches,
    })
}

/// Parameter gradients given the gradient of a scalar loss with respect to the logits.
pub fn backward(params: &ParameterSet, pass: &ForwardPass, dlogits: &Tensor) -> Result<Gradients> {
    if dlogits.shape() != pass.logits.shape() {
        return Err(Error::Dimension(format!(
            "logit gradient shape {:?} differs from logits {:?}",
            dlogits.shape(),
            pass.logits.shape()
        )));
    }
    if pass.caches.len() != pass.lengths.len() {
        return Err(Error::Input("forward pass was run without activation cache".into()));
    }
    dlogits.check_finite("logit gradient")?;
    let shape = pass.logits.shape();
    let (max_len, v) = (shape[1], shape[2]);
    let mut grads = Gradients::zeros_like(params);
    for (b, cache) in pass.caches.iter().enumerate() {
        let len = pass.lengths[b];
        let start = b * max_len * v;
        backward_sequence(params, cache, &dlogits.data()[start..start + len * v], &mut grads);
    }
    Ok(grads)
}

/// Logits of the final position only, used by autoregressive sampling.
pub fn next_token_logits(params: &ParameterSet, ids: &[TokenId]) -> Result<Vec<f64>> {
    let v = params.config().vocab_size;
    let (lg, _) = forward_sequence(params, ids, false)?;
    Ok(lg[lg.len() - v..].to_vec())
}

/// Incremental decoder: feeds one token at a time and keeps per-layer keys and
/// values, so generating `n` tokens costs `O(n)` row passes instead of
/// re-running the whole prefix. Every kernel is row-wise with the same
/// accumulation order as [`forward`], so the logits are bit-identical.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    params: &'a ParameterSet,
    /// Per layer, the `[len × 3d]` query/key/value rows seen so far.
    qkv: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ParameterSet) -> Self {
        Self {
            params,
            qkv: vec![Vec::new(); params.config().n_layers],
            len: 0,
        }
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds a prompt and returns the logits after its last token.
    pub fn prefill(&mut self, ids: &[TokenId]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut out = Vec::new();
        for &id in ids {
            out = self.push(id)?;
        }
        Ok(out)
    }

    /// Appends `id` and returns the next-token logits at its position.
    pub fn push(&mut self, id: TokenId) -> Result<Vec<f64>> {
        let params = self.params;
        let cfg = params.config();
        if self.len >= cfg.context_len {
            return Err(Error::Length {
                len: self.len + 1,
                context_len: cfg.context_len,
            });
        }
        if id as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {id} is outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let t = params.tensors();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let (nh, hd, f) = (cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
        let p = self.len;
        let tok = &t[idx::TOK_EMB].data()[id as usize * d..(id as usize + 1) * d];
        let pos = &t[idx::POS_EMB].data()[p * d..(p + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = vec![0.0; p + 1];
        for layer in 0..cfg.n_layers {
            let w = |which| t[idx::layer(layer, which)].data();
            let mut a = vec![0.0; d];
            layer_norm_rows(&x, w(idx::LN1_G), w(idx::LN1_B), d, &mut a);
            let cache = &mut self.qkv[layer];
            let start = cache.len();
            cache.resize(start + 3 * d, 0.0);
            gemm(&a, w(idx::W_QKV), 1, d, 3 * d, &mut cache[start..], false);
            let mut att = vec![0.0; d];
            for h in 0..nh {
                let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                let q = &cache[p * 3 * d + qo..p * 3 * d + qo + hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=p {
                    let k = &cache[j * 3 * d + ko..j * 3 * d + ko + hd];
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[c] * k[c];
                    }
                    s *= scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[h * hd..(h + 1) * hd];
                for j in 0..=p {
                    let pr = scores[j] / sum;
                    let vv = &cache[j * 3 * d + vo..j * 3 * d + vo + hd];
                    for c in 0..hd {
                        out[c] += pr * vv[c];
                    }
                }
            }
            let mut x1 = x;
            gemm(&att, w(idx::W_ATT_OUT), 1, d, d, &mut x1, true);
            add_bias(&mut x1, w(idx::B_ATT_OUT));
            let mut m = vec![0.0; d];
            layer_norm_rows(&x1, w(idx::LN2_G), w(idx::LN2_B), d, &mut m);
            let mut u = vec![0.0; f];
            gemm(&m, w(idx::W_IN), 1, d, f, &mut u, false);
            add_bias(&mut u, w(idx::B_IN));
            let g: Vec<f64> = u.iter().map(|&z| gelu_scalar(z)).collect();
            let mut x2 = x1;
            gemm(&g, w(idx::W_MLP_OUT), 1, f, d, &mut x2, true);
            add_bias(&mut x2, w(idx::B_MLP_OUT));
            x = x2;
        }
        let fb = idx::final_base(cfg.n_layers);
        let mut xf = vec![0.0; d];
        layer_norm_rows(&x, t[fb].data(), t[fb + 1].data(), d, &mut xf);
        let mut logits = vec![0.0; v];
        gemm(&xf, t[fb + 2].data(), 1, d, v, &mut logits, false);
        add_bias(&mut logits, t[fb + 3].data());
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("decoder produced non-finite logits".into()));
        }
        self.len += 1;
        Ok(logits)
    }
}
