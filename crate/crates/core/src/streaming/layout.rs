use std::ops::Range;

use crate::model::{ModelConfig, Role, TokenLayout};
use crate::substrate::AttentionMask;

use super::StreamError;

/// A span of the interleaved layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Span {
    Ref,
    Cond(usize),
    Tgt(usize),
}

/// `[ref | cond_0 | tgt_0 | ⋯ | cond_M | tgt_M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperChunkLayout {
    /// Number of chunks, `M + 1`.
    pub chunks: usize,
    pub ref_len: usize,
    pub cond_len: usize,
    pub tgt_len: usize,
    pub tokens: TokenLayout,
}

fn build(
    m: usize,
    ref_len: usize,
    cond_len: usize,
    tgt_len: usize,
    pos: impl Fn(Span, usize) -> (usize, usize),
) -> Result<SuperChunkLayout, StreamError> {
    if ref_len == 0 || cond_len == 0 || tgt_len == 0 {
        return Err(StreamError::InvalidLength(format!(
            "ref {}, cond {}, tgt {}",
            ref_len, cond_len, tgt_len
        )));
    }
    let mut tokens = TokenLayout::default();
    let mut push = |role: Role, span: Span, len: usize, chunk: usize| {
        for k in 0..len {
            let (f, s) = pos(span, k);
            tokens.push(role, f, s, chunk);
        }
    };
    push(Role::Ref, Span::Ref, ref_len, 0);
    for i in 0..=m {
        push(Role::Cond, Span::Cond(i), cond_len, i);
        push(Role::Den, Span::Tgt(i), tgt_len, i);
    }
    Ok(SuperChunkLayout {
        chunks: m + 1,
        ref_len,
        cond_len,
        tgt_len,
        tokens,
    })
}

/// Layout with `M + 1` chunks. Frame and patch positions are per-span indices.
pub fn build_superchunk_layout(
    m: usize,
    ref_len: usize,
    cond_len: usize,
    tgt_len: usize,
) -> Result<SuperChunkLayout, StreamError> {
    build(m, ref_len, cond_len, tgt_len, |span, k| match span {
        Span::Ref => (0, k),
        Span::Cond(i) | Span::Tgt(i) => (i, k),
    })
}

impl SuperChunkLayout {
    /// Layout over `cfg`'s chunking: one reference frame, then `chunks` chunks of
    /// `chunk_frames` frames each, with true frame and patch positions.
    pub fn for_model(cfg: &ModelConfig, chunks: usize) -> Result<Self, StreamError> {
        if chunks == 0 || chunks > cfg.chunks() {
            return Err(StreamError::InvalidLength(format!(
                "{} chunks for a {}-chunk model",
                chunks,
                cfg.chunks()
            )));
        }
        let tpf = cfg.tokens_per_frame();
        let span = cfg.chunk_frames * tpf;
        build(chunks - 1, tpf, span, span, |s, k| match s {
            Span::Ref => (0, k),
            Span::Cond(i) | Span::Tgt(i) => (i * cfg.chunk_frames + k / tpf, k % tpf),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span(&self, span: Span) -> Range<usize> {
        let chunk = self.cond_len + self.tgt_len;
        match span {
            Span::Ref => 0..self.ref_len,
            Span::Cond(i) => {
                let s = self.ref_len + i * chunk;
                s..s + self.cond_len
            }
            Span::Tgt(i) => {
                let s = self.ref_len + i * chunk + self.cond_len;
                s..s + self.tgt_len
            }
        }
    }

    /// The first `chunks` chunks.
    pub fn prefix(&self, chunks: usize) -> Self {
        let end = self.span(Span::Tgt(chunks - 1)).end;
        Self {
            chunks,
            ref_len: self.ref_len,
            cond_len: self.cond_len,
            tgt_len: self.tgt_len,
            tokens: self.tokens.slice(0..end),
        }
    }

    pub fn role(&self, i: usize) -> Role {
        self.tokens.roles[i]
    }

    pub fn chunk(&self, i: usize) -> usize {
        self.tokens.chunk[i]
    }
}

/// Whether token `q` may read token `k` under block-causal attention.
///
/// ref reads ref; cond_i reads cond_j for j ≤ i; tgt_i reads ref, cond_j and tgt_j for j ≤ i.
pub fn causal_visible(layout: &SuperChunkLayout, q: usize, k: usize) -> bool {
    let (cq, ck) = (layout.chunk(q), layout.chunk(k));
    match (layout.role(q), layout.role(k)) {
        (Role::Ref, Role::Ref) => true,
        (Role::Ref, _) => false,
        (Role::Cond, Role::Cond) => ck <= cq,
        (Role::Cond, _) => false,
        (Role::Den, Role::Ref) => true,
        (Role::Den, _) => ck <= cq,
        _ => false,
    }
}

pub fn build_block_causal_mask(layout: &SuperChunkLayout) -> AttentionMask {
    let n = layout.len();
    AttentionMask::from_fn(n, n, |q, k| causal_visible(layout, q, k))
}

/// Rows `rows` of the block-causal mask against every key up to `rows.end`.
pub fn causal_rows(layout: &SuperChunkLayout, rows: Range<usize>) -> AttentionMask {
    let start = rows.start;
    AttentionMask::from_fn(rows.len(), rows.end, |r, k| causal_visible(layout, start + r, k))
}
