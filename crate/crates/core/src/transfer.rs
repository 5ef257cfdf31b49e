//! Transfer planning, parallelism repartitioning and network timing.
//!
//! This module is pure arithmetic: it turns "move this many tokens' KV from
//! instance A to instance B" into a [`TransferPlan`] (one chunk per network
//! API call, each gated on when its data exists) and folds plans through
//! per-pair FIFO communicators to produce completion times. The event loop
//! owns all state exchange between instances; nothing here touches a pool.
//!
//! Call-count accounting follows the storage layout exactly: a discrete
//! layout keeps every (layer, K/V) slice of a token block as its own
//! storage block, so one token block costs `2·L` calls; the aggregated
//! layout packs a token block into one contiguous region, one call. The
//! by-layer mode issues the same discrete calls but releases each layer's
//! slice as soon as that layer's prefill compute finishes, overlapping
//! communication with compute.

use crate::config::{Layout, ModelConfig, NetworkConfig, TransferMode};
use crate::types::{tokens_to_blocks, Parallelism, SimTime};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransferError {
    #[error("transfer mode {mode} requires the {required} layout")]
    ModeLayoutMismatch { mode: TransferMode, required: Layout },
    #[error("by-layer planning needs one finish time per layer: expected {expected}, got {got}")]
    LayerTimesMismatch { expected: usize, got: usize },
}

/// One network API call: `bytes` may not move before `earliest`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chunk {
    pub bytes: f64,
    pub earliest: SimTime,
}

/// A planned transfer: `n_calls` logical API calls over the wire.
///
/// `chunks` lists the physical sub-transfers in issue order. With matching
/// source and destination parallelism there is exactly one chunk per call;
/// asymmetric parallelism splits each call into one sub-call per shard
/// piece (see [`repartition`]), which raises overhead without changing the
/// logical call count.
#[derive(Debug, Clone)]
pub struct TransferPlan {
    pub mode: TransferMode,
    pub n_calls: u64,
    pub bytes_total: u64,
    pub chunks: Vec<Chunk>,
}

/// Plan the movement of `n_tokens` worth of KV data.
///
/// `ready` is the prefill-completion time gating by-request modes;
/// `layer_finish` gives per-layer compute completion for by-layer mode
/// (length must equal the layer count). Both may be supplied; the unused
/// one is ignored.
pub fn plan_transfer(
    n_tokens: usize,
    mode: TransferMode,
    layout: Layout,
    src_par: Parallelism,
    dst_par: Parallelism,
    model: &ModelConfig,
    block_size: usize,
    ready: SimTime,
    layer_finish: Option<&[SimTime]>,
) -> Result<TransferPlan, TransferError> {
    let layers = model.num_layers as usize;
    match (mode, layout) {
        (TransferMode::ByRequestAgg, Layout::Aggregated) => {}
        (TransferMode::ByRequestAgg, _) => {
            return Err(TransferError::ModeLayoutMismatch {
                mode,
                required: Layout::Aggregated,
            })
        }
        (_, Layout::Discrete) => {}
        (_, _) => {
            return Err(TransferError::ModeLayoutMismatch { mode, required: Layout::Discrete })
        }
    }

    let n_blocks = tokens_to_blocks(n_tokens, block_size) as u64;
    let block_bytes = model.kv_bytes_for_tokens(block_size);
    let bytes_total = n_blocks * block_bytes;
    let shards = repartition(src_par, dst_par);

    let mut calls: Vec<Chunk> = Vec::new();
    match mode {
        TransferMode::ByRequest => {
            // One call per (token block, layer, K/V slice), all gated on
            // prefill completion.
            let per_call = block_bytes as f64 / (2 * layers) as f64;
            let n = n_blocks * 2 * layers as u64;
            for _ in 0..n {
                calls.push(Chunk { bytes: per_call, earliest: ready });
            }
        }
        TransferMode::ByRequestAgg => {
            let per_call = block_bytes as f64;
            for _ in 0..n_blocks {
                calls.push(Chunk { bytes: per_call, earliest: ready });
            }
        }
        TransferMode::ByLayer => {
            let finish = layer_finish.ok_or(TransferError::LayerTimesMismatch {
                expected: layers,
                got: 0,
            })?;
            if finish.len() != layers {
                return Err(TransferError::LayerTimesMismatch {
                    expected: layers,
                    got: finish.len(),
                });
            }
            // Layer-major: a layer's K and V slices for every block go out
            // as soon as that layer's compute is done.
            let per_call = block_bytes as f64 / (2 * layers) as f64;
            for &t in finish {
                for _ in 0..n_blocks * 2 {
                    calls.push(Chunk { bytes: per_call, earliest: t });
                }
            }
        }
    }
    let n_calls = calls.len() as u64;

    // Asymmetric parallelism: each call splits into one sub-call per
    // repartition piece.
    let chunks = if shards.len() == 1 {
        calls
    } else {
        let mut out = Vec::with_capacity(calls.len() * shards.len());
        for c in calls {
            for s in &shards {
                out.push(Chunk {
                    bytes: c.bytes * s.num as f64 / s.den as f64,
                    earliest: c.earliest,
                });
            }
        }
        out
    };

    Ok(TransferPlan { mode, n_calls, bytes_total, chunks })
}

/// One piece of the source/destination shard refinement: the fraction
/// `num/den` of the payload moving from source rank `(src_tp, src_pp)` to
/// destination rank `(dst_tp, dst_pp)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shard {
    pub src_tp: u32,
    pub dst_tp: u32,
    pub src_pp: u32,
    pub dst_pp: u32,
    pub num: u64,
    pub den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Refine two even 1-D partitions into their common intervals:
/// `(src cell, dst cell, length numerator)` over denominator `lcm(a, b)`.
fn refine(a: u64, b: u64) -> (Vec<(u32, u32, u64)>, u64) {
    let l = a / gcd(a, b) * b;
    let (sa, sb) = (l / a, l / b); // cell widths in 1/l units
    let mut out = Vec::new();
    let mut lo = 0u64;
    while lo < l {
        let next = ((lo / sa + 1) * sa).min((lo / sb + 1) * sb);
        out.push(((lo / sa) as u32, (lo / sb) as u32, next - lo));
        lo = next;
    }
    (out, l)
}

/// Common refinement of the source and destination shardings: the KV head
/// dimension splits evenly by TP degree, layers split contiguously by PP
/// degree, and each refined rectangle moves between exactly one (src, dst)
/// rank pair. The pieces partition the payload with no gap or overlap.
pub fn repartition(src: Parallelism, dst: Parallelism) -> Vec<Shard> {
    let (tp, tden) = refine(src.tp as u64, dst.tp as u64);
    let (pp, pden) = refine(src.pp as u64, dst.pp as u64);
    let mut out = Vec::with_capacity(tp.len() * pp.len());
    for &(sp, dp, pnum) in &pp {
        for &(st, dt, tnum) in &tp {
            out.push(Shard {
                src_tp: st,
                dst_tp: dt,
                src_pp: sp,
                dst_pp: dp,
                num: tnum * pnum,
                den: tden * pden,
            });
        }
    }
    out
}

/// FIFO communicators for one ordered instance pair.
///
/// Each communicator serves one sub-chunk at a time: a chunk begins at
/// `max(its earliest, communicator free time)` and occupies the channel for
/// `per_call_overhead + bytes/bandwidth`. Chunks round-robin across the
/// pair's communicators in issue order; the cursor persists across
/// transfers so interleaved traffic stays balanced.
#[derive(Debug, Clone)]
pub struct CommSet {
    free: Vec<SimTime>,
    cursor: usize,
}

/// Timing of one executed transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Executed {
    /// When the first chunk began service.
    pub start: SimTime,
    /// When the last chunk finished.
    pub end: SimTime,
}

impl CommSet {
    pub fn new(n_comms: u32) -> Self {
        assert!(n_comms > 0, "at least one communicator per pair");
        CommSet { free: vec![0.0; n_comms as usize], cursor: 0 }
    }

    /// Fold a plan through the communicators, claiming channel time.
    /// `dram_involved` selects the slow path when either endpoint of any
    /// moved block lives in DRAM.
    pub fn execute(
        &mut self,
        plan: &TransferPlan,
        net: &NetworkConfig,
        dram_involved: bool,
    ) -> Executed {
        let bw = if dram_involved { net.dram_bandwidth } else { net.hbm_bandwidth };
        let mut first_start = f64::INFINITY;
        let mut end: SimTime = plan
            .chunks
            .first()
            .map(|c| c.earliest)
            .unwrap_or(0.0);
        for c in &plan.chunks {
            let comm = self.cursor;
            self.cursor = (self.cursor + 1) % self.free.len();
            let start = c.earliest.max(self.free[comm]);
            let done = start + net.per_call_overhead + c.bytes / bw;
            self.free[comm] = done;
            first_start = first_start.min(start);
            end = end.max(done);
        }
        if !first_start.is_finite() {
            first_start = end;
        }
        Executed { start: first_start, end }
    }

    /// Earliest time any communicator is idle (diagnostics).
    pub fn next_free(&self) -> SimTime {
        self.free.iter().copied().fold(f64::INFINITY, f64::min)
    }
}
