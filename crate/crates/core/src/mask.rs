//! Chunked streaming attention masks and receptive-field queries.
//!
//! Frames are numbered from 1 in doc comments and public range queries
//! (matching the usual f1..fT pictures); storage is 0-based. The conversion
//! never leaves this module.

use crate::error::{Error, Result};

/// Chunk geometry of a streaming encoder: chunk size `U`, number of left
/// chunks `L` visible per layer, and the encoder depth.
///
/// The algorithmic latency of the encoder is `U` frames: a frame may see the
/// rest of its own chunk but nothing in later chunks. An offline encoder is
/// expressed by choosing `U >= T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMaskSpec {
    pub chunk_size: usize,
    pub left_chunks: usize,
    pub num_layers: usize,
}

impl ChunkMaskSpec {
    pub fn new(chunk_size: usize, left_chunks: usize, num_layers: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Contract("chunk_size must be >= 1".into()));
        }
        if num_layers == 0 {
            return Err(Error::Contract("num_layers must be >= 1".into()));
        }
        Ok(ChunkMaskSpec {
            chunk_size,
            left_chunks,
            num_layers,
        })
    }

    /// Chunk index of a 0-based frame.
    pub fn chunk_of(&self, frame: usize) -> usize {
        frame / self.chunk_size
    }

    /// Frames consumed once the chunk containing 0-based `frame` has fully
    /// arrived: `min(ceil((frame+1)/U)*U, total)`. This is the emission-delay
    /// accounting for a token produced at `frame`.
    pub fn frames_consumed_at(&self, frame: usize, total: usize) -> usize {
        ((self.chunk_of(frame) + 1) * self.chunk_size).min(total)
    }

    /// Algorithmic latency in frames.
    pub fn latency_frames(&self) -> usize {
        self.chunk_size
    }
}

/// Boolean attention pattern: entry (q, k) says whether query frame q may
/// attend to key frame k. Square for whole-utterance masks; rectangular
/// all-true patterns are used by the incremental encoder, whose key window
/// already is the visible set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    data: Vec<bool>,
}

impl AttnMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        AttnMask {
            queries,
            keys,
            data: vec![true; queries * keys],
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    /// 0-based entry lookup.
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.data[q * self.keys + k]
    }

    fn set(&mut self, q: usize, k: usize, v: bool) {
        self.data[q * self.keys + k] = v;
    }

    /// Number of true entries (used by monotonicity checks).
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-layer chunk mask: (q, k) is true iff chunk(q) - L <= chunk(k) <= chunk(q).
/// Within a chunk every pair sees each other; future chunks are never visible.
pub fn build_chunk_mask(t: usize, spec: &ChunkMaskSpec) -> AttnMask {
    let mut mask = AttnMask {
        queries: t,
        keys: t,
        data: vec![false; t * t],
    };
    for q in 0..t {
        let cq = spec.chunk_of(q);
        let lo = cq.saturating_sub(spec.left_chunks);
        for k in 0..t {
            let ck = spec.chunk_of(k);
            mask.set(q, k, ck >= lo && ck <= cq);
        }
    }
    mask
}

/// Receptive field of 1-based frame `t` after `layer` stacked masked-attention
/// layers, as an inclusive 1-based frame range.
///
/// The left edge recedes by `L` chunks per layer; the right edge stays pinned
/// to the end of the frame's own chunk, so lookahead never exceeds `U`.
pub fn receptive_field(t: usize, layer: usize, total: usize, spec: &ChunkMaskSpec) -> (usize, usize) {
    assert!(t >= 1 && t <= total, "frame {t} out of range 1..={total}");
    assert!(
        layer >= 1 && layer <= spec.num_layers,
        "layer {layer} out of range 1..={}",
        spec.num_layers
    );
    let c = spec.chunk_of(t - 1);
    let lo_chunk = c.saturating_sub(layer * spec.left_chunks);
    let left = lo_chunk * spec.chunk_size + 1;
    let right = ((c + 1) * spec.chunk_size).min(total);
    (left, right)
}

/// Reachability after `hops` applications of a mask: boolean matrix power.
/// Brute-force oracle for [`receptive_field`].
pub fn compose_mask_hops(mask: &AttnMask, hops: usize) -> AttnMask {
    assert_eq!(mask.queries, mask.keys, "composition needs a square mask");
    let t = mask.queries;
    let mut reach = mask.clone();
    for _ in 1..hops {
        let mut next = AttnMask {
            queries: t,
            keys: t,
            data: vec![false; t * t],
        };
        for q in 0..t {
            for m in 0..t {
                if reach.allowed(q, m) {
                    for k in 0..t {
                        if mask.allowed(m, k) {
                            next.set(q, k, true);
                        }
                    }
                }
            }
        }
        reach = next;
    }
    reach
}
