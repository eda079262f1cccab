//! Attention building blocks shared by the backbone and both decoders.
//!
//! Sequences from several samples are stacked row-wise into one
//! `[rows × d]` tensor; [`SeqLayout`] records where each sample's rows live
//! so attention never mixes samples.

use std::sync::Arc;

use easyfirst_tensor::{AttnSegment, Element, Tensor, Var};
use rand::Rng;

use crate::params::{ParamId, ParamStore, Session};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visibility matrix `[queries × keys]`; `true` means visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    visible: Arc<[bool]>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != queries * keys {
            return Err(Error::config(format!(
                "mask of {} entries cannot be {queries}×{keys}",
                visible.len()
            )));
        }
        if let Some(row) =
            (0..queries).find(|&r| !visible[r * keys..(r + 1) * keys].iter().any(|&b| b))
        {
            return Err(Error::config(format!("mask row {row} has no visible key")));
        }
        Ok(AttentionMask {
            queries,
            keys,
            visible: visible.into(),
        })
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        AttentionMask {
            queries,
            keys,
            visible: vec![true; queries * keys].into(),
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.keys + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.visible[query * self.keys..(query + 1) * self.keys]
    }

    pub fn segment(&self, q_start: usize, k_start: usize) -> AttnSegment {
        AttnSegment {
            q_start,
            q_len: self.queries,
            k_start,
            k_len: self.keys,
            visible: Some(Arc::clone(&self.visible)),
        }
    }
}

/// Bidirectional mask that hides MASK keys. Each position always sees
/// itself so the all-MASK first iteration stays well defined. Keys past
/// `eos_cut` are hidden as well.
pub fn build_parallel_mask(
    tokens: &[usize],
    mask_token: usize,
    eos_cut: Option<usize>,
) -> Result<AttentionMask> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::config("parallel mask needs a nonempty sequence"));
    }
    let key_ok: Vec<bool> = tokens
        .iter()
        .enumerate()
        .map(|(j, &t)| t != mask_token && eos_cut.is_none_or(|cut| j <= cut))
        .collect();
    let mut visible = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            visible[q * n + k] = q == k || key_ok[k];
        }
    }
    AttentionMask::new(n, n, visible)
}

/// Lower-triangular mask: query `t` sees keys `0..=t`.
pub fn build_future_mask(len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(Error::config("future mask needs length ≥ 1"));
    }
    let visible = (0..len * len).map(|i| i % len <= i / len).collect();
    AttentionMask::new(len, len, visible)
}

/// Sinusoidal encodings `[len × dim]`: even columns `sin`, odd `cos`.
pub fn positional_encoding<T: Element>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 || len == 0 {
        return Err(Error::config(format!(
            "1D positional encoding needs even dim, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Ok(Tensor::from_vec(vec![len, dim], data)?)
}

/// Row-major `[h·w × dim]` grid encoding: first half encodes the row,
/// second half the column.
pub fn positional_encoding_2d<T: Element>(h: usize, w: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "2D positional encoding needs dim divisible by 4, got {dim}"
        )));
    }
    let rows = positional_encoding::<T>(h, dim / 2)?;
    let cols = positional_encoding::<T>(w, dim / 2)?;
    let mut data = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            data.extend_from_slice(rows.row(r));
            data.extend_from_slice(cols.row(c));
        }
    }
    Ok(Tensor::from_vec(vec![h * w, dim], data)?)
}

/// Row ranges of each sample inside a stacked batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn from_lens(lens: Vec<usize>) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            starts.push(acc);
            acc += l;
        }
        SeqLayout { starts, lens }
    }

    pub fn uniform(batch: usize, len: usize) -> Self {
        Self::from_lens(vec![len; batch])
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Position of every row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add_xavier(
                format!("{name}.weight"),
                vec![fan_in, fan_out],
                fan_in,
                fan_out,
                rng,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.tape.matmul(x, w)?;
        Ok(s.tape.add_row(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        Ok(s.tape.layer_norm(x, g, b, T::from_f64(LAYER_NORM_EPS))?)
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections. Residual and normalization belong to the enclosing unit.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Key/value projections of a fixed memory, reusable across queries.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedMemory {
    pub keys: Var,
    pub values: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "model width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        })
    }

    pub fn project_memory<T: Element>(
        &self,
        s: &mut Session<T>,
        memory: Var,
    ) -> Result<ProjectedMemory> {
        Ok(ProjectedMemory {
            keys: self.key.forward(s, memory)?,
            values: self.value.forward(s, memory)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        s: &mut Session<T>,
        x: Var,
        memory: Var,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let mem = self.project_memory(s, memory)?;
        self.forward_projected(s, x, mem, segments)
    }

    pub fn forward_projected<T: Element>(
        &self,
        s: &mut Session<T>,
        x: Var,
        memory: ProjectedMemory,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let q = self.query.forward(s, x)?;
        let attended = s
            .tape
            .attention(q, memory.keys, memory.values, self.heads, segments)?;
        self.output.forward(s, attended)
    }
}

/// `LayerNorm(x + W₂·relu(W₁·x + b₁) + b₂)`. The returned rows are the
/// sublayer's "FFN output".
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = self.outer.forward(s, h)?;
        let r = s.tape.add(x, h)?;
        self.norm.forward(s, r)
    }
}

/// Self-attention + FFN, post-norm.
#[derive(Debug, Clone)]
pub struct EncoderUnit {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderUnit {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderUnit {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        })
    }

    pub fn forward<T: Element>(
        &self,
        s: &mut Session<T>,
        x: Var,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let a = self.attention.forward(s, x, x, segments)?;
        let r = s.tape.add(x, a)?;
        let h = self.norm.forward(s, r)?;
        self.ffn.forward(s, h)
    }
}

/// Masked self-attention, cross-attention over the feature grid, FFN.
#[derive(Debug, Clone)]
pub struct DecoderUnit {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderUnit {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderUnit {
            self_attention: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                dim,
                heads,
                rng,
            )?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            cross_attention: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                dim,
                heads,
                rng,
            )?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        })
    }

    pub fn forward<T: Element>(
        &self,
        s: &mut Session<T>,
        x: Var,
        self_segments: &[AttnSegment],
        memory: ProjectedMemory,
        cross_segments: &[AttnSegment],
    ) -> Result<Var> {
        let a = self.self_attention.forward(s, x, x, self_segments)?;
        let r = s.tape.add(x, a)?;
        let h = self.self_norm.forward(s, r)?;
        let c = self
            .cross_attention
            .forward_projected(s, h, memory, cross_segments)?;
        let r = s.tape.add(h, c)?;
        let h = self.cross_norm.forward(s, r)?;
        self.ffn.forward(s, h)
    }
}
