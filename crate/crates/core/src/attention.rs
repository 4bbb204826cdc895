//! Attention variants used for multi-identity customization.
//!
//! All functions operate on one head at a time on `(tokens × dim)` arrays;
//! [`multi_head_attention`] splits and merges heads around them. Token `q` of
//! an image-side input corresponds to row-major grid cell `q` of any mask
//! gating it.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::backend::LayerId;
use crate::error::{Error, Result};
use crate::mask::SpatialMask;

/// Stand-in for `log 0` in attention biases. Finite so that it never produces
/// NaN in downstream products; `exp` of it underflows to exactly zero.
pub const NEG_LARGE: f64 = -1e9;

/// Maps a binary gate value to its log-domain bias.
pub fn log_gate(value: f64) -> f64 {
    if value > 0.0 {
        libm::log(value)
    } else {
        NEG_LARGE
    }
}

/// Query, key and value projections sharing one input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: RealArray,
    pub w_k: RealArray,
    pub w_v: RealArray,
    pub heads: usize,
}

impl ProjectionSet {
    pub fn new(w_q: RealArray, w_k: RealArray, w_v: RealArray, heads: usize) -> Result<Self> {
        for w in [&w_q, &w_k, &w_v] {
            if w.ndim() != 2 {
                return Err(Error::shape("projection", w.shape(), &[0, 0]));
            }
        }
        if w_k.rows() != w_q.rows() {
            return Err(Error::shape("projection input dim", w_q.shape(), w_k.shape()));
        }
        if w_v.rows() != w_q.rows() {
            return Err(Error::shape("projection input dim", w_q.shape(), w_v.shape()));
        }
        if w_k.cols() != w_q.cols() {
            return Err(Error::shape("query/key width", w_q.shape(), w_k.shape()));
        }
        if heads == 0 || !w_q.cols().is_multiple_of(heads) || !w_v.cols().is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide projection widths {} / {}",
                w_q.cols(),
                w_v.cols()
            )));
        }
        Ok(Self { w_q, w_k, w_v, heads })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w_q: RealArray::identity(dim),
            w_k: RealArray::identity(dim),
            w_v: RealArray::identity(dim),
            heads: 1,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }
}

pub fn project_qkv(x: &RealArray, p: &ProjectionSet) -> Result<(RealArray, RealArray, RealArray)> {
    if x.ndim() != 2 || x.cols() != p.model_dim() {
        return Err(Error::shape("project_qkv", x.shape(), p.w_q.shape()));
    }
    Ok((x.matmul(&p.w_q)?, x.matmul(&p.w_k)?, x.matmul(&p.w_v)?))
}

/// `softmax(q·kᵀ/√d + bias)·v` for a single head.
///
/// Entries of `bias` at or below [`NEG_LARGE`] count as excluded keys; a query
/// whose keys are all excluded is an error rather than a NaN row.
pub fn biased_softmax_attention(
    q: &RealArray,
    k: &RealArray,
    v: &RealArray,
    bias: &RealArray,
) -> Result<RealArray> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::shape("attention operands", q.shape(), k.shape()));
    }
    let (tq, d) = (q.rows(), q.cols());
    let tk = k.rows();
    if k.cols() != d {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if v.rows() != tk {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    if bias.shape() != [tq, tk] {
        return Err(Error::shape("attention bias", bias.shape(), &[tq, tk]));
    }
    let dv = v.cols();
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut out = vec![0.0; tq * dv];
    let mut scores = vec![0.0; tk];
    for i in 0..tq {
        let b_row = bias.row(i);
        if b_row.iter().all(|&b| b <= NEG_LARGE) {
            return Err(Error::FullyMasked { query: i });
        }
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let dot: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            *s = dot * scale + b_row[j];
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = libm::exp(*s - max);
            total += *s;
        }
        let o = &mut out[i * dv..(i + 1) * dv];
        for (j, &w) in scores.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = w / total;
            for (oc, &vc) in o.iter_mut().zip(v.row(j)) {
                *oc += w * vc;
            }
        }
    }
    Ok(RealArray::from_parts(vec![tq, dv], out))
}

/// Splits projected `q`, `k`, `v` into `heads` column groups, attends each with
/// the shared `bias`, and concatenates the per-head outputs.
pub fn multi_head_attention(
    q: &RealArray,
    k: &RealArray,
    v: &RealArray,
    bias: &RealArray,
    heads: usize,
) -> Result<RealArray> {
    if heads == 1 {
        return biased_softmax_attention(q, k, v, bias);
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(Error::config(format!("cannot split into {heads} heads")));
    }
    let (hq, hv) = (q.cols() / heads, v.cols() / heads);
    let outs = (0..heads)
        .map(|h| {
            biased_softmax_attention(
                &q.col_slice(h * hq, (h + 1) * hq)?,
                &k.col_slice(h * hq, (h + 1) * hq)?,
                &v.col_slice(h * hv, (h + 1) * hv)?,
                bias,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    RealArray::hstack(&outs)
}

/// Which positions a token block may influence.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    AllOnes,
    Mask(SpatialMask),
}

impl Gate {
    fn bias_at(&self, q: usize) -> f64 {
        match self {
            Gate::AllOnes => 0.0,
            Gate::Mask(m) => log_gate(m.values().data()[q]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockLabel {
    Global,
    /// Tokens of the identity with this index.
    Local(usize),
}

/// A labeled group of key/value token embeddings plus its spatial gate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub tokens: RealArray,
    pub gate: Gate,
    pub label: BlockLabel,
}

impl EmbeddingBlock {
    pub fn global(tokens: RealArray) -> Self {
        Self {
            tokens,
            gate: Gate::AllOnes,
            label: BlockLabel::Global,
        }
    }

    pub fn local(identity: usize, tokens: RealArray, mask: SpatialMask) -> Self {
        Self {
            tokens,
            gate: Gate::Mask(mask),
            label: BlockLabel::Local(identity),
        }
    }
}

/// Ordered blocks `[P^g ⊕ P^l_1 ⊕ … ⊕ P^l_N]` with their gates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockSet {
    pub blocks: Vec<EmbeddingBlock>,
}

impl BlockSet {
    pub fn new(blocks: Vec<EmbeddingBlock>) -> Self {
        Self { blocks }
    }

    /// Exactly one global block, and it is ungated.
    pub fn validate(&self) -> Result<()> {
        let globals: Vec<&EmbeddingBlock> = self
            .blocks
            .iter()
            .filter(|b| b.label == BlockLabel::Global)
            .collect();
        match globals.as_slice() {
            [] => Err(Error::config("block set has no GLOBAL block")),
            [g] if g.gate != Gate::AllOnes => {
                Err(Error::config("GLOBAL block must have an all-ones gate"))
            }
            [_] => Ok(()),
            _ => Err(Error::config("block set has more than one GLOBAL block")),
        }
    }

    /// All tokens stacked in block order.
    pub fn concatenated(&self) -> Result<RealArray> {
        let parts: Vec<&RealArray> = self.blocks.iter().map(|b| &b.tokens).collect();
        RealArray::vstack(&parts)
    }

    pub fn token_count(&self) -> usize {
        self.blocks.iter().map(|b| b.tokens.rows()).sum()
    }
}

/// Cross-attention from image tokens `x` to the concatenation of all blocks,
/// where block `i`'s keys are visible at query `q` only if its gate is 1
/// there.
pub fn masked_cross_attention(x: &RealArray, blocks: &BlockSet, p: &ProjectionSet) -> Result<RealArray> {
    blocks.validate()?;
    let tq = x.rows();
    for b in &blocks.blocks {
        if let Gate::Mask(m) = &b.gate {
            if m.len() != tq {
                return Err(Error::shape("gate vs latent tokens", m.values().shape(), x.shape()));
            }
        }
    }
    let tokens = blocks.concatenated()?;
    let q = x.matmul_checked(&p.w_q, "cross-attention query")?;
    let k = tokens.matmul_checked(&p.w_k, "cross-attention key")?;
    let v = tokens.matmul_checked(&p.w_v, "cross-attention value")?;
    let tk = tokens.rows();
    let mut bias = vec![0.0; tq * tk];
    for qi in 0..tq {
        let row = &mut bias[qi * tk..(qi + 1) * tk];
        let mut offset = 0;
        for b in &blocks.blocks {
            let n = b.tokens.rows();
            let value = b.gate.bias_at(qi);
            row[offset..offset + n].iter_mut().for_each(|e| *e = value);
            offset += n;
        }
    }
    let bias = RealArray::from_parts(vec![tq, tk], bias);
    multi_head_attention(&q, &k, &v, &bias, p.heads)
}

/// Self-attention input features captured while replaying an inverted
/// reference latent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCacheEntry {
    pub layer_id: LayerId,
    pub timestep_index: usize,
    pub features: RealArray,
    pub owner_id: usize,
}

/// Self-attention whose keys and values come from `[x ⊕ X_1 ⊕ … ⊕ X_N]`.
/// The `x` block is always visible; cached block `i` is visible at query `q`
/// iff `masks[i]` is active there.
pub fn extended_self_attention(
    x: &RealArray,
    caches: &[FeatureCacheEntry],
    masks: &[SpatialMask],
    p: &ProjectionSet,
) -> Result<RealArray> {
    if caches.len() != masks.len() {
        return Err(Error::config(format!(
            "{} cached feature blocks but {} masks",
            caches.len(),
            masks.len()
        )));
    }
    let mut owners = BTreeSet::new();
    for c in caches {
        if !owners.insert(c.owner_id) {
            return Err(Error::config(format!(
                "identity {} appears twice among cached features",
                c.owner_id
            )));
        }
    }
    let tq = x.rows();
    for (c, m) in caches.iter().zip(masks) {
        if m.len() != tq {
            return Err(Error::shape("mask vs latent tokens", m.values().shape(), x.shape()));
        }
        if c.features.ndim() != 2 || c.features.cols() != x.cols() {
            return Err(Error::shape("cached features", c.features.shape(), x.shape()));
        }
    }
    let mut parts: Vec<&RealArray> = vec![x];
    parts.extend(caches.iter().map(|c| &c.features));
    let source = RealArray::vstack(&parts)?;
    let q = x.matmul_checked(&p.w_q, "self-attention query")?;
    let k = source.matmul_checked(&p.w_k, "self-attention key")?;
    let v = source.matmul_checked(&p.w_v, "self-attention value")?;
    let tk = source.rows();
    let mut bias = vec![0.0; tq * tk];
    for qi in 0..tq {
        let row = &mut bias[qi * tk..(qi + 1) * tk];
        let mut offset = tq;
        for (c, m) in caches.iter().zip(masks) {
            let n = c.features.rows();
            let value = log_gate(m.values().data()[qi]);
            row[offset..offset + n].iter_mut().for_each(|e| *e = value);
            offset += n;
        }
    }
    let bias = RealArray::from_parts(vec![tq, tk], bias);
    multi_head_attention(&q, &k, &v, &bias, p.heads)
}

/// Unmasked attention of `x` over `source` tokens.
pub fn plain_attention(x: &RealArray, source: &RealArray, p: &ProjectionSet) -> Result<RealArray> {
    let q = x.matmul_checked(&p.w_q, "attention query")?;
    let k = source.matmul_checked(&p.w_k, "attention key")?;
    let v = source.matmul_checked(&p.w_v, "attention value")?;
    let bias = RealArray::zeros(&[x.rows(), source.rows()]);
    multi_head_attention(&q, &k, &v, &bias, p.heads)
}

/// Combines a local prompt's text tokens with an identity embedding.
///
/// With placeholder positions, those rows are replaced (one per identity
/// embedding row, in order); without, identity rows are appended after the
/// text tokens.
pub fn fuse_id_embedding(
    text_tokens: &RealArray,
    id_embedding: &RealArray,
    placeholder_positions: &[usize],
) -> Result<RealArray> {
    if text_tokens.ndim() != 2 || id_embedding.ndim() != 2 || text_tokens.cols() != id_embedding.cols() {
        return Err(Error::shape("fuse_id_embedding", text_tokens.shape(), id_embedding.shape()));
    }
    if placeholder_positions.is_empty() {
        return RealArray::vstack(&[text_tokens, id_embedding]);
    }
    if placeholder_positions.len() != id_embedding.rows() {
        return Err(Error::config(format!(
            "{} placeholder positions for {} identity embedding rows",
            placeholder_positions.len(),
            id_embedding.rows()
        )));
    }
    let mut seen = BTreeSet::new();
    let cols = text_tokens.cols();
    let mut data = text_tokens.data().to_vec();
    for (row, &pos) in placeholder_positions.iter().enumerate() {
        if pos >= text_tokens.rows() {
            return Err(Error::OutOfRange {
                what: "placeholder position",
                index: pos,
                bound: text_tokens.rows(),
            });
        }
        if !seen.insert(pos) {
            return Err(Error::config(format!("placeholder position {pos} repeated")));
        }
        data[pos * cols..(pos + 1) * cols].copy_from_slice(id_embedding.row(row));
    }
    Ok(RealArray::from_parts(text_tokens.shape().to_vec(), data))
}

impl RealArray {
    fn matmul_checked(&self, w: &RealArray, context: &'static str) -> Result<RealArray> {
        if self.ndim() != 2 || w.ndim() != 2 || self.cols() != w.rows() {
            return Err(Error::shape(context, self.shape(), w.shape()));
        }
        self.matmul(w)
    }
}
