//! Building blocks of the feed-forward transformer backbone.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, Graph, NodeId, Tensor};

/// Additive bias applied to padded attention keys before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

/// Sinusoidal table, `PE(p, 2i) = sin(p / 10000^{2i/d})` and
/// `PE(p, 2i+1) = cos(p / 10000^{2i/d})`.
pub fn positional_encoding<S: Scalar>(length: usize, d_model: usize) -> Result<Tensor<S>> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(length * d_model);
    for p in 0..length {
        for i in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(S::lit(angle.sin()));
            data.push(S::lit(angle.cos()));
        }
    }
    Tensor::new([length, d_model], data)
}

/// Validity of each sequence position; `None` means no padding.
#[derive(Clone, Copy, Debug)]
pub struct SeqMask<'a>(pub Option<&'a [bool]>);

impl<'a> SeqMask<'a> {
    pub fn none() -> Self {
        SeqMask(None)
    }

    fn has_padding(&self) -> bool {
        self.0.is_some_and(|m| m.iter().any(|v| !v))
    }

    /// `[T, 1]` column of 0/1, or `None` when nothing is padded.
    fn row_keep<S: Scalar>(&self, g: &mut Graph<S>) -> Option<NodeId> {
        if !self.has_padding() {
            return None;
        }
        let m = self.0.unwrap();
        let data = m.iter().map(|&v| if v { S::one() } else { S::zero() }).collect();
        Some(g.constant(Tensor::new([m.len(), 1], data).unwrap()))
    }

    /// `[1, T]` row of 0 or [`MASKED_SCORE`] for the attention logits.
    fn key_bias<S: Scalar>(&self, g: &mut Graph<S>) -> Option<NodeId> {
        if !self.has_padding() {
            return None;
        }
        let m = self.0.unwrap();
        let data = m
            .iter()
            .map(|&v| if v { S::zero() } else { S::lit(MASKED_SCORE) })
            .collect();
        Some(g.constant(Tensor::new([1, m.len()], data).unwrap()))
    }

    /// Zeroes padded rows of `x`.
    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        match self.row_keep(g) {
            Some(keep) => g.mul(x, keep),
            None => Ok(x),
        }
    }
}

/// `x W + b` with `W: [in, out]`, `b: [1, out]`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w")))?;
    g.add(y, p.get(&format!("{prefix}.b")))
}

pub fn conv<S: Scalar>(g: &mut Graph<S>, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = g.conv1d(x, p.get(&format!("{prefix}.k")))?;
    g.add(y, p.get(&format!("{prefix}.b")))
}

pub fn norm<S: Scalar>(g: &mut Graph<S>, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    g.layer_norm(x, p.get(&format!("{prefix}.gain")), p.get(&format!("{prefix}.bias")))
}

/// Result of multi-head self-attention with the per-head weight matrices.
pub struct Attention {
    pub output: NodeId,
    pub weights: Vec<NodeId>,
}

pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    x: NodeId,
    mask: SeqMask,
    n_heads: usize,
) -> Result<Attention> {
    let d = g.shape(x)[1];
    let dh = d / n_heads;
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let key_bias = mask.key_bias(g);
    let scale = S::one() / S::from_usize(dh).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(bias) = key_bias {
            scores = g.add(scores, bias)?;
        }
        let attn = g.softmax(scores);
        weights.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let joined = if n_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let output = linear(g, p, &format!("{prefix}.o"), joined)?;
    Ok(Attention { output, weights })
}

/// Settings shared by every feed-forward transformer block of a stack.
#[derive(Clone, Copy, Debug)]
pub struct BlockSettings {
    pub n_heads: usize,
    pub dropout: f64,
    pub seed: u64,
}

/// Self-attention and a two-layer convolutional feed-forward sublayer, each
/// followed by a residual connection and layer norm. Padded rows are zeroed
/// after each sublayer so they cannot leak through the convolutions.
pub fn fft_block<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    x: NodeId,
    mask: SeqMask,
    settings: BlockSettings,
) -> Result<(NodeId, Vec<NodeId>)> {
    let attn = multi_head_attention(g, p, &format!("{prefix}.attn"), x, mask, settings.n_heads)?;
    let a = g.dropout(attn.output, settings.dropout, settings.seed);
    let res = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ln1"), res)?;
    let h = mask.apply(g, h)?;

    let f = conv(g, p, &format!("{prefix}.ffn.conv1"), h)?;
    let f = g.relu(f);
    let f = mask.apply(g, f)?;
    let f = conv(g, p, &format!("{prefix}.ffn.conv2"), f)?;
    let f = g.dropout(f, settings.dropout, settings.seed.wrapping_add(1));
    let res = g.add(h, f)?;
    let out = norm(g, p, &format!("{prefix}.ln2"), res)?;
    Ok((mask.apply(g, out)?, attn.weights))
}

/// conv -> relu -> norm -> conv -> relu -> norm -> linear to one value per row.
pub fn variance_predictor<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    h: NodeId,
    mask: SeqMask,
) -> Result<NodeId> {
    let x = conv(g, p, &format!("{prefix}.conv1"), h)?;
    let x = g.relu(x);
    let x = norm(g, p, &format!("{prefix}.ln1"), x)?;
    let x = mask.apply(g, x)?;
    let x = conv(g, p, &format!("{prefix}.conv2"), x)?;
    let x = g.relu(x);
    let x = norm(g, p, &format!("{prefix}.ln2"), x)?;
    let x = mask.apply(g, x)?;
    let y = linear(g, p, &format!("{prefix}.out"), x)?;
    let y = mask.apply(g, y)?;
    let t = g.shape(y)[0];
    g.reshape(y, [t])
}
