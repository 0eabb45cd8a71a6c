//! Small pre-norm transformer encoder with a per-token sigmoid score head.
//!
//! Forward pass for a sequence of `L` token ids:
//!
//! ```text
//! x   = tok_emb[ids] + pos_emb[0..L]
//! for each layer:
//!     x = x + attn(LN1(x)) · Wo          // pad keys masked out
//!     x = x + GELU(LN2(x) · W1 + b1) · W2 + b2
//! score_t = sigmoid(x_t · w_head + b_head)
//! ```
//!
//! Gradients are exact and hand-derived; see [`backward`].

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Matrix};
use crate::textprep::{TargetSpan, TokenId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("token id {id} at position {pos} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: TokenId,
        pos: usize,
        vocab_size: usize,
    },
    #[error("sequence length {len} is outside [1, {max_len}]")]
    BadLength { len: usize, max_len: usize },
    #[error("attention mask length {mask} differs from id length {ids}")]
    MaskMismatch { ids: usize, mask: usize },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("span {0:?} is empty or outside the sequence")]
    BadSpan(Range<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            embed_dim: 64,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 128,
            max_len: 400,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(EncoderError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Matrix,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Matrix,
    pub norm1_gain: Matrix,
    pub norm1_bias: Matrix,
    pub norm2_gain: Matrix,
    pub norm2_bias: Matrix,
}

/// Broad role of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// All learnable tensors. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

impl EncoderParams {
    /// Zero tensors shaped for `config`.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let (d, f) = (config.embed_dim, config.ffn_dim);
        let layer = LayerParams {
            query: Matrix::zeros(d, d),
            key: Matrix::zeros(d, d),
            value: Matrix::zeros(d, d),
            output: Matrix::zeros(d, d),
            ffn_in: Matrix::zeros(d, f),
            ffn_in_bias: Matrix::zeros(1, f),
            ffn_out: Matrix::zeros(f, d),
            ffn_out_bias: Matrix::zeros(1, d),
            norm1_gain: Matrix::zeros(1, d),
            norm1_bias: Matrix::zeros(1, d),
            norm2_gain: Matrix::zeros(1, d),
            norm2_bias: Matrix::zeros(1, d),
        };
        EncoderParams {
            config: config.clone(),
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.max_len, d),
            layers: vec![layer; config.num_layers],
            head_weight: Matrix::zeros(d, 1),
            head_bias: Matrix::zeros(1, 1),
        }
    }

    /// Seeded initialization: weights uniform in `±1/sqrt(embed_dim)`,
    /// biases zero, layer-norm gains one.
    pub fn init(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.embed_dim as f64).sqrt();
        for (_, kind, m) in params.tensors_mut() {
            if kind == ParamKind::Weight {
                m.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-scale..scale));
            }
        }
        for l in &mut params.layers {
            l.norm1_gain = Matrix::filled(1, config.embed_dim, 1.0);
            l.norm2_gain = Matrix::filled(1, config.embed_dim, 1.0);
        }
        Ok(params)
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Matrix)> {
        let mut out: Vec<(String, ParamKind, &Matrix)> = Vec::new();
        out.push((
            "token_embedding".into(),
            ParamKind::Weight,
            &self.token_embedding,
        ));
        out.push((
            "position_embedding".into(),
            ParamKind::Weight,
            &self.position_embedding,
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let name = |s: &str| format!("layers.{i}.{s}");
            out.push((name("query"), ParamKind::Weight, &l.query));
            out.push((name("key"), ParamKind::Weight, &l.key));
            out.push((name("value"), ParamKind::Weight, &l.value));
            out.push((name("output"), ParamKind::Weight, &l.output));
            out.push((name("ffn_in"), ParamKind::Weight, &l.ffn_in));
            out.push((name("ffn_in_bias"), ParamKind::Bias, &l.ffn_in_bias));
            out.push((name("ffn_out"), ParamKind::Weight, &l.ffn_out));
            out.push((name("ffn_out_bias"), ParamKind::Bias, &l.ffn_out_bias));
            out.push((name("norm1_gain"), ParamKind::Norm, &l.norm1_gain));
            out.push((name("norm1_bias"), ParamKind::Norm, &l.norm1_bias));
            out.push((name("norm2_gain"), ParamKind::Norm, &l.norm2_gain));
            out.push((name("norm2_bias"), ParamKind::Norm, &l.norm2_bias));
        }
        out.push(("head_weight".into(), ParamKind::Weight, &self.head_weight));
        out.push(("head_bias".into(), ParamKind::Bias, &self.head_bias));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Matrix)> {
        let mut out: Vec<(String, ParamKind, &mut Matrix)> = Vec::new();
        out.push((
            "token_embedding".into(),
            ParamKind::Weight,
            &mut self.token_embedding,
        ));
        out.push((
            "position_embedding".into(),
            ParamKind::Weight,
            &mut self.position_embedding,
        ));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = |s: &str| format!("layers.{i}.{s}");
            out.push((name("query"), ParamKind::Weight, &mut l.query));
            out.push((name("key"), ParamKind::Weight, &mut l.key));
            out.push((name("value"), ParamKind::Weight, &mut l.value));
            out.push((name("output"), ParamKind::Weight, &mut l.output));
            out.push((name("ffn_in"), ParamKind::Weight, &mut l.ffn_in));
            out.push((name("ffn_in_bias"), ParamKind::Bias, &mut l.ffn_in_bias));
            out.push((name("ffn_out"), ParamKind::Weight, &mut l.ffn_out));
            out.push((name("ffn_out_bias"), ParamKind::Bias, &mut l.ffn_out_bias));
            out.push((name("norm1_gain"), ParamKind::Norm, &mut l.norm1_gain));
            out.push((name("norm1_bias"), ParamKind::Norm, &mut l.norm1_bias));
            out.push((name("norm2_gain"), ParamKind::Norm, &mut l.norm2_gain));
            out.push((name("norm2_bias"), ParamKind::Norm, &mut l.norm2_bias));
        }
        out.push((
            "head_weight".into(),
            ParamKind::Weight,
            &mut self.head_weight,
        ));
        out.push(("head_bias".into(), ParamKind::Bias, &mut self.head_bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, _, m)| m.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, _, m) in self.tensors_mut() {
            m.scale(k);
        }
    }
}

/// Per-position sigmoid scores, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores(pub Vec<f64>);

impl TokenScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

/// Row-wise layer norm; returns output plus what backward needs.
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, NormCache) {
    let (rows, d) = x.shape();
    let mut normalized = Matrix::zeros(rows, d);
    let mut out = Matrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let n = (row[c] - mean) * is;
            normalized.set(r, c, n);
            out.set(r, c, n * gain.get(0, c) + bias.get(0, c));
        }
    }
    (
        out,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    gain: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    for r in 0..rows {
        let xh = cache.normalized.row(r);
        let g = dy.row(r);
        let mut dxhat = vec![0.0; d];
        for c in 0..d {
            dgain.as_mut_slice()[c] += g[c] * xh[c];
            dbias.as_mut_slice()[c] += g[c];
            dxhat[c] = g[c] * gain.get(0, c);
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xh = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx.set(r, c, is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xh));
        }
    }
    dx
}

struct LayerCache {
    input: Matrix,
    norm1: NormCache,
    attn_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention weights per head, each L×L.
    probs: Vec<Matrix>,
    context: Matrix,
    attn_drop: Option<Vec<f64>>,
    norm2: NormCache,
    ffn_in: Matrix,
    pre_act: Matrix,
    hidden: Matrix,
    ffn_drop: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    ids: Vec<TokenId>,
    mask: Vec<u8>,
    embed_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_hidden: Matrix,
}

/// Output of a training-capable forward pass.
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub scores: TokenScores,
    pub cache: ForwardCache,
}

/// Dropout source for training mode.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout_mask<R: Rng>(drop: &mut Option<Dropout<'_, R>>, n: usize) -> Option<Vec<f64>> {
    let d = drop.as_mut()?;
    if d.rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - d.rate);
    Some(
        (0..n)
            .map(|_| {
                if d.rng.gen::<f64>() < d.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect(),
    )
}

fn apply_mask(m: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        m.as_mut_slice()
            .iter_mut()
            .zip(mask)
            .for_each(|(v, k)| *v *= k);
    }
}

fn check_inputs(params: &EncoderParams, ids: &[TokenId], mask: &[u8]) -> Result<(), EncoderError> {
    let cfg = &params.config;
    if ids.is_empty() || ids.len() > cfg.max_len {
        return Err(EncoderError::BadLength {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    if ids.len() != mask.len() {
        return Err(EncoderError::MaskMismatch {
            ids: ids.len(),
            mask: mask.len(),
        });
    }
    if let Some((pos, &id)) = ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_size)
    {
        return Err(EncoderError::TokenOutOfRange {
            id,
            pos,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Evaluation-mode forward pass. Pad positions (`mask == 0`) are never
/// attended to, so their content cannot change any other position's score.
pub fn forward(
    params: &EncoderParams,
    ids: &[TokenId],
    attention_mask: &[u8],
) -> Result<TokenScores, EncoderError> {
    forward_train::<ChaCha8Rng>(params, ids, attention_mask, None).map(|f| f.scores)
}

/// Forward pass that keeps activations for [`backward`]. Dropout is applied
/// only when `dropout` is given.
pub fn forward_train<R: Rng>(
    params: &EncoderParams,
    ids: &[TokenId],
    attention_mask: &[u8],
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<ForwardPass, EncoderError> {
    check_inputs(params, ids, attention_mask)?;
    let cfg = &params.config;
    let (len, d) = (ids.len(), cfg.embed_dim);

    let mut x = Matrix::zeros(len, d);
    for (t, &id) in ids.iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(params.token_embedding.row(id as usize));
        row.iter_mut()
            .zip(params.position_embedding.row(t))
            .for_each(|(a, p)| *a += p);
    }
    let embed_drop = dropout_mask(&mut dropout, len * d);
    apply_mask(&mut x, &embed_drop);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let (attn_in, norm1) = layer_norm(&x, &lp.norm1_gain, &lp.norm1_bias);
        let q = attn_in.matmul(&lp.query);
        let k = attn_in.matmul(&lp.key);
        let v = attn_in.matmul(&lp.value);
        let (context, probs) = attention(&q, &k, &v, attention_mask, cfg.num_heads);
        let mut attn_out = context.matmul(&lp.output);
        let attn_drop = dropout_mask(&mut dropout, len * d);
        apply_mask(&mut attn_out, &attn_drop);
        let mut mid = x.clone();
        mid.add_assign(&attn_out);

        let (ffn_in, norm2) = layer_norm(&mid, &lp.norm2_gain, &lp.norm2_bias);
        let mut pre_act = ffn_in.matmul(&lp.ffn_in);
        pre_act.add_row(&lp.ffn_in_bias);
        let mut hidden = pre_act.clone();
        hidden.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
        let mut ffn_out = hidden.matmul(&lp.ffn_out);
        ffn_out.add_row(&lp.ffn_out_bias);
        let ffn_drop = dropout_mask(&mut dropout, len * d);
        apply_mask(&mut ffn_out, &ffn_drop);
        let mut out = mid.clone();
        out.add_assign(&ffn_out);
        if !out.is_finite() {
            return Err(EncoderError::NonFinite { layer: li });
        }

        layers.push(LayerCache {
            input: std::mem::replace(&mut x, out),
            norm1,
            attn_in,
            q,
            k,
            v,
            probs,
            context,
            attn_drop,
            norm2,
            ffn_in,
            pre_act,
            hidden,
            ffn_drop,
        });
    }

    let bias = params.head_bias.get(0, 0);
    let logits: Vec<f64> = (0..len)
        .map(|t| dot(x.row(t), params.head_weight.as_slice()) + bias)
        .collect();
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(EncoderError::NonFinite {
            layer: cfg.num_layers,
        });
    }
    let scores = TokenScores(logits.iter().map(|&z| sigmoid(z)).collect());
    Ok(ForwardPass {
        logits,
        scores,
        cache: ForwardCache {
            ids: ids.to_vec(),
            mask: attention_mask.to_vec(),
            embed_drop,
            layers,
            final_hidden: x,
        },
    })
}

/// Masked multi-head scaled dot-product attention. Returns the concatenated
/// head outputs and per-head attention weights.
fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &[u8],
    heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let (len, d) = q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut context = Matrix::zeros(len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(len, len);
        for i in 0..len {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            let mut logits = vec![f64::NEG_INFINITY; len];
            for j in (0..len).filter(|&j| mask[j] != 0) {
                let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                logits[j] = s;
                max = max.max(s);
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..len {
                if mask[j] != 0 {
                    let e = (logits[j] - max).exp();
                    p.set(i, j, e);
                    total += e;
                }
            }
            let row = p.row_mut(i);
            row.iter_mut().for_each(|e| *e /= total);
            let out = &mut context.row_mut(i)[cols.clone()];
            for (j, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    out.iter_mut()
                        .zip(&v.row(j)[cols.clone()])
                        .for_each(|(o, vv)| *o += a * vv);
                }
            }
        }
        probs.push(p);
    }
    (context, probs)
}

/// Exact gradients of `Σ_t dlogits[t] · logit_t` with respect to every
/// parameter, accumulated into `grads`.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut EncoderParams,
) {
    let cfg = &params.config;
    let len = cache.ids.len();
    let d = cfg.embed_dim;
    assert_eq!(dlogits.len(), len);

    // Score head.
    let mut dx = Matrix::zeros(len, d);
    for t in 0..len {
        let g = dlogits[t];
        if g == 0.0 {
            continue;
        }
        grads.head_bias.as_mut_slice()[0] += g;
        let h = cache.final_hidden.row(t);
        grads
            .head_weight
            .as_mut_slice()
            .iter_mut()
            .zip(h)
            .for_each(|(w, x)| *w += g * x);
        dx.row_mut(t)
            .iter_mut()
            .zip(params.head_weight.as_slice())
            .for_each(|(o, w)| *o = g * w);
    }

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grads.layers[li];

        // Feed-forward residual branch.
        let mut dffn = dx.clone();
        apply_mask(&mut dffn, &lc.ffn_drop);
        lg.ffn_out_bias.add_assign(&dffn.sum_rows());
        lg.ffn_out.add_assign(&lc.hidden.t_matmul(&dffn));
        let mut dpre = dffn.matmul_t(&lp.ffn_out);
        dpre.as_mut_slice()
            .iter_mut()
            .zip(lc.pre_act.as_slice())
            .for_each(|(g, &u)| *g *= gelu_grad(u));
        lg.ffn_in_bias.add_assign(&dpre.sum_rows());
        lg.ffn_in.add_assign(&lc.ffn_in.t_matmul(&dpre));
        let dnorm2 = dpre.matmul_t(&lp.ffn_in);
        let dmid_branch = layer_norm_backward(
            &dnorm2,
            &lc.norm2,
            &lp.norm2_gain,
            &mut lg.norm2_gain,
            &mut lg.norm2_bias,
        );
        let mut dmid = dx;
        dmid.add_assign(&dmid_branch);

        // Attention residual branch.
        let mut dattn = dmid.clone();
        apply_mask(&mut dattn, &lc.attn_drop);
        lg.output.add_assign(&lc.context.t_matmul(&dattn));
        let dcontext = dattn.matmul_t(&lp.output);
        let (dq, dk, dv) = attention_backward(lc, &dcontext, &cache.mask, cfg.num_heads);
        lg.query.add_assign(&lc.attn_in.t_matmul(&dq));
        lg.key.add_assign(&lc.attn_in.t_matmul(&dk));
        lg.value.add_assign(&lc.attn_in.t_matmul(&dv));
        let mut dnorm1 = dq.matmul_t(&lp.query);
        dnorm1.add_assign(&dk.matmul_t(&lp.key));
        dnorm1.add_assign(&dv.matmul_t(&lp.value));
        let dinput_branch = layer_norm_backward(
            &dnorm1,
            &lc.norm1,
            &lp.norm1_gain,
            &mut lg.norm1_gain,
            &mut lg.norm1_bias,
        );
        dmid.add_assign(&dinput_branch);
        dx = dmid;
        debug_assert_eq!(lc.input.shape(), dx.shape());
    }

    apply_mask(&mut dx, &cache.embed_drop);
    for (t, &id) in cache.ids.iter().enumerate() {
        let g = dx.row(t);
        grads
            .token_embedding
            .row_mut(id as usize)
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b);
        grads
            .position_embedding
            .row_mut(t)
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b);
    }
}

fn attention_backward(
    lc: &LayerCache,
    dcontext: &Matrix,
    mask: &[u8],
    heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let (len, d) = lc.q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(len, d);
    let mut dk = Matrix::zeros(len, d);
    let mut dv = Matrix::zeros(len, d);
    for (h, p) in lc.probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..len {
            let dci = &dcontext.row(i)[cols.clone()];
            if dci.iter().all(|&g| g == 0.0) {
                continue;
            }
            let pi = p.row(i);
            // dP_ij = dC_i · V_j
            let mut dp = vec![0.0; len];
            for j in (0..len).filter(|&j| mask[j] != 0) {
                dp[j] = dot(dci, &lc.v.row(j)[cols.clone()]);
                let a = pi[j];
                dv.row_mut(j)[cols.clone()]
                    .iter_mut()
                    .zip(dci)
                    .for_each(|(o, g)| *o += a * g);
            }
            let weighted: f64 = pi.iter().zip(&dp).map(|(a, g)| a * g).sum();
            let qi: Vec<f64> = lc.q.row(i)[cols.clone()].to_vec();
            for j in (0..len).filter(|&j| mask[j] != 0) {
                let ds = pi[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &lc.k.row(j)[cols.clone()];
                dq.row_mut(i)[cols.clone()]
                    .iter_mut()
                    .zip(kj)
                    .for_each(|(o, kk)| *o += ds * kk);
                dk.row_mut(j)[cols.clone()]
                    .iter_mut()
                    .zip(&qi)
                    .for_each(|(o, qq)| *o += ds * qq);
            }
        }
    }
    (dq, dk, dv)
}

/// Score at the `[CLS]` position (index 0).
pub fn pooled_score(scores: &TokenScores) -> Option<f64> {
    scores.0.first().copied()
}

/// Mean token score over each span, keyed by target index.
pub fn aggregate_spans(
    scores: &TokenScores,
    spans: &[TargetSpan],
) -> Result<Vec<(usize, f64)>, EncoderError> {
    spans
        .iter()
        .map(|s| {
            if s.range.is_empty() || s.range.end > scores.len() {
                return Err(EncoderError::BadSpan(s.range.clone()));
            }
            let slice = &scores.0[s.range.clone()];
            Ok((s.target, slice.iter().sum::<f64>() / slice.len() as f64))
        })
        .collect()
}

const CHECKPOINT_MAGIC: &str = "phrasesim-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus free-form string metadata, stored as versioned text:
///
/// ```text
/// phrasesim-checkpoint 1
/// config {"vocab_size":...}
/// meta <key> <value>
/// tensor <name> <rows> <cols>
/// <row-major values separated by spaces>
/// end
/// ```
///
/// Floats are written in shortest round-trip form, so identical parameters
/// give identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: EncoderParams) -> Self {
        Checkpoint {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EncoderError> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        let cfg = serde_json::to_string(&self.params.config)
            .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
        writeln!(w, "config {cfg}")?;
        for (k, v) in &self.metadata {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, _, m) in self.params.tensors() {
            writeln!(w, "tensor {name} {} {}", m.rows(), m.cols())?;
            let line: Vec<String> = m.as_slice().iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, EncoderError> {
        let bad = |m: String| EncoderError::Checkpoint(m);
        let mut lines = r.lines();
        let mut next = || -> Result<String, EncoderError> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(EncoderError::from)
        };
        let header = next()?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let cfg_line = next()?;
        let cfg: EncoderConfig = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad("missing config line".into()))
            .and_then(|j| serde_json::from_str(j).map_err(|e| bad(e.to_string())))?;
        cfg.validate()?;
        let mut params = EncoderParams::zeros(&cfg);
        let mut metadata = BTreeMap::new();
        let mut loaded = BTreeMap::new();
        loop {
            let line = next()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                metadata.insert(k.to_string(), v.to_string());
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(bad(format!("unexpected line {line:?}")));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| bad(format!("bad rows in {line:?}")))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| bad(format!("bad cols in {line:?}")))?;
            let values = next()?
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("bad value {s:?} in {}", parts[1])))
                })
                .collect::<Result<Vec<_>, _>>()?;
            loaded.insert(parts[1].to_string(), (rows, cols, values));
        }
        for (name, _, m) in params.tensors_mut() {
            let (rows, cols, values) = loaded
                .remove(&name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if (rows, cols) != m.shape() || values.len() != m.len() {
                return Err(bad(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {:?}",
                    m.shape()
                )));
            }
            m.as_mut_slice().copy_from_slice(&values);
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(bad(format!("unknown tensor {extra}")));
        }
        Ok(Checkpoint { params, metadata })
    }
}
