//! Global scheduler: routing policies over advisory prompt trees.
//!
//! The scheduler keeps one token radix tree per (instance kind, instance),
//! recording which prompt prefixes each instance reported holding and when.
//! Entries expire after a TTL and are purged wholesale when an instance
//! fails. The trees are advisory only: a stale entry can route a request to
//! an instance whose cache has since shrunk, and the engine simply matches
//! less — correctness never depends on tree freshness.
//!
//! Three policies:
//!
//! * least-load — fewest queued + in-flight tokens;
//! * session-id — stable hash of the session over the live roster, keeping
//!   a session's turns together without inspecting content;
//! * prompt-tree — longest fresh matched prefix, ties broken by least
//!   load then lowest instance id.
//!
//! Under the prompt-tree policy the decision also lists *extra holders*:
//! instances (of any kind) whose trees extend beyond the chosen instance's
//! match, as disjoint token ranges in ascending order. The engine may fetch
//! those ranges over the network when the cost model approves.

use std::collections::BTreeMap;

use crate::config::SchedulerPolicy;
use crate::radix::{OnConflict, TokenRadix};
use crate::types::{fnv1a, InstanceId, InstanceKind, SimTime, TokenId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchedulerError {
    #[error("no live {0:?} instance")]
    NoLiveInstance(InstanceKind),
}

/// Load view of one live instance at routing time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSnapshot {
    pub id: InstanceId,
    pub kind: InstanceKind,
    /// Queued plus in-flight tokens.
    pub load_tokens: u64,
}

/// A token range `(start, end]` of the prompt cached on another instance,
/// beyond what the chosen instance holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtraHolder {
    pub instance: InstanceId,
    pub start_tokens: usize,
    pub end_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingDecision {
    pub instance: InstanceId,
    /// Fresh matched prefix on the chosen instance's tree.
    pub matched_tokens: usize,
    /// Disjoint extensions beyond `matched_tokens`, ascending; populated
    /// only under the prompt-tree policy.
    pub extra_holders: Vec<ExtraHolder>,
    /// Candidates considered (for the routing log).
    pub alternatives: u32,
}

#[derive(Debug, Clone)]
pub struct GlobalScheduler {
    policy: SchedulerPolicy,
    ttl: f64,
    block_size: usize,
    trees: BTreeMap<InstanceKind, BTreeMap<InstanceId, TokenRadix<()>>>,
}

impl GlobalScheduler {
    pub fn new(policy: SchedulerPolicy, ttl: f64, block_size: usize) -> Self {
        GlobalScheduler { policy, ttl, block_size, trees: BTreeMap::new() }
    }

    pub fn policy(&self) -> SchedulerPolicy {
        self.policy
    }

    /// Record that `instance` now caches the (block-truncated) prefix of
    /// `tokens`; refreshes freshness along the whole path.
    pub fn note_cached(
        &mut self,
        kind: InstanceKind,
        instance: InstanceId,
        tokens: &[TokenId],
        now: SimTime,
    ) {
        let blocks = tokens.len() / self.block_size;
        if blocks == 0 {
            return;
        }
        let tree = self
            .trees
            .entry(kind)
            .or_default()
            .entry(instance)
            .or_insert_with(|| TokenRadix::new(self.block_size));
        // Payloads carry no data; last_access doubles as insert time.
        tree.insert(tokens, &vec![(); blocks], now, OnConflict::KeepExisting)
            .expect("unit payloads cannot conflict");
    }

    /// Drop all advisory state for a failed or removed instance.
    pub fn purge_instance(&mut self, instance: InstanceId) {
        for by_instance in self.trees.values_mut() {
            by_instance.remove(&instance);
        }
    }

    /// Fresh matched prefix length per instance of `kind`.
    pub fn match_global(
        &self,
        kind: InstanceKind,
        tokens: &[TokenId],
        now: SimTime,
    ) -> BTreeMap<InstanceId, usize> {
        let mut out = BTreeMap::new();
        if let Some(by_instance) = self.trees.get(&kind) {
            for (&id, tree) in by_instance {
                out.insert(id, tree.match_len_filtered(tokens, |t| now - t <= self.ttl));
            }
        }
        out
    }

    /// Route one request to an instance of `kind`.
    pub fn route(
        &self,
        kind: InstanceKind,
        tokens: &[TokenId],
        session: u64,
        now: SimTime,
        live: &[InstanceSnapshot],
    ) -> Result<RoutingDecision, SchedulerError> {
        let mut candidates: Vec<&InstanceSnapshot> =
            live.iter().filter(|s| s.kind == kind).collect();
        candidates.sort_by_key(|s| s.id.0);
        if candidates.is_empty() {
            return Err(SchedulerError::NoLiveInstance(kind));
        }
        let matches = self.match_global(kind, tokens, now);
        let matched_of = |id: InstanceId| matches.get(&id).copied().unwrap_or(0);

        let chosen = match self.policy {
            SchedulerPolicy::LeastLoad => candidates
                .iter()
                .min_by_key(|s| (s.load_tokens, s.id.0))
                .unwrap(),
            SchedulerPolicy::SessionId => {
                let h = fnv1a(&session.to_le_bytes());
                &candidates[(h % candidates.len() as u64) as usize]
            }
            SchedulerPolicy::PromptTree => candidates
                .iter()
                .min_by_key(|s| {
                    (
                        std::cmp::Reverse(matched_of(s.id)),
                        s.load_tokens,
                        s.id.0,
                    )
                })
                .unwrap(),
        };

        let matched_tokens = matched_of(chosen.id);
        let extra_holders = if self.policy == SchedulerPolicy::PromptTree {
            self.extra_holders(chosen.id, matched_tokens, tokens, now, live)
        } else {
            Vec::new()
        };
        Ok(RoutingDecision {
            instance: chosen.id,
            matched_tokens,
            extra_holders,
            alternatives: candidates.len() as u32,
        })
    }

    /// Instances of any kind whose trees hold prompt prefixes deeper than
    /// the chosen instance's match, reduced to disjoint ascending ranges:
    /// each range is served by the nearest (shortest-match) holder that
    /// covers it.
    fn extra_holders(
        &self,
        chosen: InstanceId,
        chosen_match: usize,
        tokens: &[TokenId],
        now: SimTime,
        live: &[InstanceSnapshot],
    ) -> Vec<ExtraHolder> {
        let mut deeper: Vec<(usize, InstanceId)> = Vec::new();
        for snap in live {
            if snap.id == chosen {
                continue;
            }
            if let Some(tree) = self.trees.get(&snap.kind).and_then(|m| m.get(&snap.id)) {
                let len = tree.match_len_filtered(tokens, |t| now - t <= self.ttl);
                if len > chosen_match {
                    deeper.push((len, snap.id));
                }
            }
        }
        deeper.sort_by_key(|&(len, id)| (len, id.0));
        let mut out = Vec::new();
        let mut cur = chosen_match;
        for (len, id) in deeper {
            if len > cur {
                out.push(ExtraHolder { instance: id, start_tokens: cur, end_tokens: len });
                cur = len;
            }
        }
        out
    }
}
