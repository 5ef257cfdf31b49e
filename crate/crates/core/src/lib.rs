//! Deterministic simulation library for disaggregated LLM serving with a
//! distributed KV-cache memory pool.
//!
//! The crate models prefill/decode disaggregation, block-granular KV-cache
//! pooling over HBM and DRAM, cache-aware transfer planning, cost-gated
//! cache reuse, prefix-tree-aware global scheduling, and failure handling —
//! all on a single discrete-event timeline so experiments are exactly
//! reproducible from a seed.
//!
//! Layering, bottom up:
//!
//! * [`types`] / [`config`] — identifiers, unit helpers, TOML configuration;
//! * [`radix`] — block-granular token radix tree (index + scheduler trees);
//! * [`mempool`] — per-instance pooled KV memory with content indexing;
//! * [`transfer`] — network model, transfer planning and call accounting;
//! * [`engine`] — per-instance batching, timing costs and reuse decisions;
//! * [`scheduler`] — global prompt trees and routing policies;
//! * [`cluster`] — roster, heartbeats and failure cleanup;
//! * [`sim`] — the event loop, workload generation, metrics and CSV output.

pub mod cluster;
pub mod config;
pub mod engine;
pub mod mempool;
pub mod radix;
pub mod scheduler;
pub mod sim;
pub mod transfer;
pub mod types;
