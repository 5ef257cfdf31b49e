//! Instance-local execution model: batch admission, compute timing, and the
//! cost-model decision of whether reusing cached KV beats recomputing it.
//!
//! The actual request lifecycle (prefill/transfer/decode state machines)
//! lives in the event loop; this module is the arithmetic it leans on, kept
//! pure so decisions can be checked against independent oracles.
//!
//! Timing model:
//!
//! * prefill of `n_new` tokens attending over `n_context` cached tokens
//!   costs `base·n_new + ctx_factor·n_new·n_context` seconds;
//! * one decode step over a batch of `r` requests costs
//!   `step_base + per_request·r`;
//! * moving a block between HBM and DRAM costs `swap_cost_per_block`.
//!
//! The reuse decision compares two ends-to-end paths for one request inside
//! its admitted batch: *reuse* pays the move cost of the matched blocks
//! (zero for local HBM, swap for local DRAM, network transfer for remote)
//! plus prefill over the uncached remainder with the matched prefix as
//! context; *recompute* pays prefill over the whole prompt with no context.
//! Batchmates' tokens ride along in both paths' `n_new`, so batch pressure
//! shifts the threshold exactly as the cost model prescribes.

use std::collections::VecDeque;

use crate::config::{ModelConfig, NetworkConfig, TimingConfig, TransferMode};
use crate::types::{RequestId, SimTime};

/// Pure timing arithmetic shared by the event loop and the tests.
#[derive(Debug, Clone)]
pub struct TimingModel {
    cfg: TimingConfig,
}

impl TimingModel {
    pub fn new(cfg: TimingConfig) -> Self {
        TimingModel { cfg }
    }

    /// Seconds to prefill `n_new` tokens attending over `n_context` cached
    /// tokens. Zero when there is nothing new to compute.
    pub fn prefill_cost(&self, n_new: usize, n_context: usize) -> f64 {
        self.cfg.prefill_base_per_token * n_new as f64
            + self.cfg.prefill_context_factor * n_new as f64 * n_context as f64
    }

    /// Seconds for one decode step over `batch_size` concurrent requests.
    pub fn decode_step_cost(&self, batch_size: usize) -> f64 {
        self.cfg.decode_step_base + self.cfg.decode_step_per_request * batch_size as f64
    }

    /// Seconds to move `blocks` between HBM and DRAM (either direction).
    pub fn swap_cost(&self, blocks: usize) -> f64 {
        self.cfg.swap_cost_per_block * blocks as f64
    }

    /// Per-layer compute completion times for a prefill pass spanning
    /// `[start, start + total]`, assuming uniform per-layer cost. The last
    /// entry equals `start + total` exactly.
    pub fn layer_finish_times(&self, start: SimTime, total: f64, layers: usize) -> Vec<SimTime> {
        (0..layers)
            .map(|l| start + total * (l + 1) as f64 / layers as f64)
            .collect()
    }
}

/// One queued prefill candidate: the request and the new tokens it brings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub id: RequestId,
    pub tokens: usize,
}

/// FIFO batch admission under token and count caps. A request larger than
/// `max_batch_tokens` is admitted alone when it reaches the queue head so
/// it can never starve.
pub fn admit_batch(
    queue: &mut VecDeque<BatchItem>,
    max_batch_tokens: usize,
    max_batch_size: usize,
) -> Vec<BatchItem> {
    let mut batch = Vec::new();
    let mut tokens = 0usize;
    while let Some(head) = queue.front() {
        if batch.len() >= max_batch_size {
            break;
        }
        if !batch.is_empty() && tokens + head.tokens > max_batch_tokens {
            break;
        }
        tokens += head.tokens;
        batch.push(queue.pop_front().unwrap());
        if tokens >= max_batch_tokens {
            break;
        }
    }
    batch
}

/// Where a request's matched prefix currently lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CachedPrefix {
    /// Matched tokens (block-aligned).
    pub tokens: usize,
    /// Matched on a different instance (blocks must cross the network).
    pub remote: bool,
    pub hbm_blocks: usize,
    pub dram_blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReuseDecision {
    Reuse,
    Recompute,
}

impl std::fmt::Display for ReuseDecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReuseDecision::Reuse => write!(f, "reuse"),
            ReuseDecision::Recompute => write!(f, "recompute"),
        }
    }
}

/// Both sides of the reuse comparison, for logs and oracle checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReuseEstimate {
    pub decision: ReuseDecision,
    /// Move cost of the matched blocks to local HBM.
    pub move_cost: f64,
    /// move_cost + prefill over the uncached remainder (context = prefix).
    pub reuse_path: f64,
    /// Prefill over the full prompt, nothing cached.
    pub recompute_path: f64,
}

/// Estimated seconds to stage the matched blocks into local HBM.
pub fn move_cost(
    timing: &TimingModel,
    net: &NetworkConfig,
    model: &ModelConfig,
    block_size: usize,
    mode: TransferMode,
    prefix: &CachedPrefix,
) -> f64 {
    if prefix.tokens == 0 {
        return 0.0;
    }
    let blocks = prefix.hbm_blocks + prefix.dram_blocks;
    if !prefix.remote {
        return timing.swap_cost(prefix.dram_blocks);
    }
    // Remote fetch: an allocation round trip, then one call per storage
    // block over the link class the slowest involved medium dictates.
    let calls = match mode {
        TransferMode::ByRequestAgg => blocks as u64,
        TransferMode::ByRequest | TransferMode::ByLayer => {
            blocks as u64 * 2 * model.num_layers as u64
        }
    };
    let bw = if prefix.dram_blocks > 0 { net.dram_bandwidth } else { net.hbm_bandwidth };
    let bytes = blocks as u64 * model.kv_bytes_for_tokens(block_size);
    2.0 * net.per_call_overhead + calls as f64 * net.per_call_overhead + bytes as f64 / bw
}

/// Decide reuse-vs-recompute for one request of a batch.
///
/// `other_new_tokens` is the sum of the batchmates' prompt tokens; it rides
/// in both paths, so a bigger batch stretches both and shifts the balance
/// through the context term only.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_reuse(
    timing: &TimingModel,
    net: &NetworkConfig,
    model: &ModelConfig,
    block_size: usize,
    mode: TransferMode,
    prompt_tokens: usize,
    other_new_tokens: usize,
    prefix: &CachedPrefix,
) -> ReuseEstimate {
    let matched = prefix.tokens.min(prompt_tokens);
    let mv = move_cost(timing, net, model, block_size, mode, prefix);
    let reuse_path =
        mv + timing.prefill_cost(other_new_tokens + prompt_tokens - matched, matched);
    let recompute_path = timing.prefill_cost(other_new_tokens + prompt_tokens, 0);
    let decision = if matched > 0 && reuse_path < recompute_path {
        ReuseDecision::Reuse
    } else {
        ReuseDecision::Recompute
    };
    ReuseEstimate { decision, move_cost: mv, reuse_path, recompute_path }
}
