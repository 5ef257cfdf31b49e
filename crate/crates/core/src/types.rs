//! Shared domain types: tokens, blocks, instances, requests.
//!
//! Everything here is the vocabulary the other modules speak. Token and block
//! arithmetic lives here so that allocation, indexing, transfer planning and
//! the cost model all agree on how many blocks a span of tokens occupies.

use serde::{Deserialize, Serialize};

/// A vocabulary token id. Requests are pre-tokenized; values are opaque.
pub type TokenId = u32;

/// Simulated time in seconds.
pub type SimTime = f64;

/// Dense index of an instance in the cluster roster (stable for a run).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId(pub u32);

impl InstanceId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for InstanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// Dense per-run request index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u32);

impl RequestId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Memory tier a block lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    Hbm,
    Dram,
}

impl std::fmt::Display for Medium {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Medium::Hbm => write!(f, "HBM"),
            Medium::Dram => write!(f, "DRAM"),
        }
    }
}

/// What work an instance runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Prefill,
    Decode,
    Colocated,
}

impl std::fmt::Display for InstanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InstanceKind::Prefill => write!(f, "prefill"),
            InstanceKind::Decode => write!(f, "decode"),
            InstanceKind::Colocated => write!(f, "colocated"),
        }
    }
}

/// Tensor/pipeline parallel degrees of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parallelism {
    pub tp: u32,
    pub pp: u32,
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism { tp: 1, pp: 1 }
    }
}

/// Location of one block of KV cache. The address encodes the owning
/// instance and tier, so any instance can name any other instance's memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockAddr {
    pub instance: InstanceId,
    pub medium: Medium,
    pub index: u32,
}

impl std::fmt::Display for BlockAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = match self.medium {
            Medium::Hbm => 'H',
            Medium::Dram => 'D',
        };
        write!(f, "{}:{}{}", self.instance, m, self.index)
    }
}

/// Tag identifying block content: a running hash over the token prefix up to
/// and including the block, so equal prefixes give equal tags wherever the
/// copy lives. Used by integrity checks across transfers and swaps.
pub type ContentTag = u64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over arbitrary bytes; deterministic across platforms and builds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Extend a content-tag chain with one block's tokens.
pub fn chain_tag(prev: ContentTag, block_tokens: &[TokenId]) -> ContentTag {
    let mut h = prev ^ FNV_OFFSET;
    for &t in block_tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Content tags for every full-or-partial block of a token sequence.
pub fn block_tags(tokens: &[TokenId], block_size: usize) -> Vec<ContentTag> {
    let mut tags = Vec::with_capacity(tokens.len().div_ceil(block_size.max(1)));
    let mut prev = 0u64;
    for chunk in tokens.chunks(block_size) {
        prev = chain_tag(prev, chunk);
        tags.push(prev);
    }
    tags
}

/// Number of blocks needed to hold `n_tokens`; a trailing partial block
/// occupies a whole block.
pub fn tokens_to_blocks(n_tokens: usize, block_size: usize) -> usize {
    assert!(block_size > 0, "block_size must be positive");
    n_tokens.div_ceil(block_size)
}

/// Largest multiple of the block size not exceeding `n_tokens`: the portion
/// of a sequence the index can store or match.
pub fn truncate_to_blocks(n_tokens: usize, block_size: usize) -> usize {
    assert!(block_size > 0, "block_size must be positive");
    n_tokens / block_size * block_size
}

/// Phase of a request's lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestPhase {
    Queued,
    Prefilling,
    Transferring,
    Decoding,
    Done,
    Failed,
}

impl std::fmt::Display for RequestPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RequestPhase::Queued => "queued",
            RequestPhase::Prefilling => "prefilling",
            RequestPhase::Transferring => "transferring",
            RequestPhase::Decoding => "decoding",
            RequestPhase::Done => "done",
            RequestPhase::Failed => "failed",
        };
        write!(f, "{s}")
    }
}

/// One inference request as produced by the workload generator or a trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    /// Session this request belongs to (multi-turn causality group).
    pub session: u64,
    /// 1-based turn within the session.
    pub turn: u32,
    /// Full pre-tokenized prompt (conversation so far plus new user text).
    pub prompt: Vec<TokenId>,
    /// Number of tokens to generate (>= 1; the first is emitted by prefill).
    pub gen_len: usize,
    /// Token values the response will consist of; pre-sampled so that the
    /// next turn's prompt and index contents are reproducible.
    pub response: Vec<TokenId>,
    /// Client think time between this response and the next turn's arrival.
    pub think_time: SimTime,
}
