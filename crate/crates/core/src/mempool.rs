//! Per-instance pooled KV-cache memory with content indexing.
//!
//! Each instance owns two fixed-capacity block pools (HBM and DRAM) and a
//! content index mapping token prefixes to the blocks that hold their KV
//! data. Blocks are the only allocation unit. An allocated block is either
//! *working* memory (held by a request or an in-flight transfer, invisible
//! to the index) or *indexed* (reachable by prefix match, evictable while
//! unpinned). Pinning protects indexed blocks from eviction while a batch
//! or transfer depends on them; unlinking a pinned block defers its release
//! to the final unpin.
//!
//! Capacity pressure resolves inside [`MemPool::alloc`]: when the free list
//! runs short, least-recently-used unpinned indexed blocks of the same
//! medium are evicted until the request fits or nothing evictable remains.
//! Swapping demotes cold HBM blocks to DRAM (and promotes them back) while
//! keeping index paths intact, so a cache hit can land in either medium.

use std::collections::BTreeSet;

use crate::radix::{MatchOut, OnConflict, SlotInfo, TokenRadix};
use crate::types::{block_tags, BlockAddr, ContentTag, InstanceId, Medium, SimTime, TokenId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MemPoolError {
    #[error("out of memory: {requested} {medium} block(s) requested, {free} free and {evictable} evictable")]
    OutOfMemory { medium: Medium, requested: usize, free: usize, evictable: usize },
    #[error("block {0} is not allocated")]
    NotAllocated(BlockAddr),
    #[error("block {0} does not belong to this instance")]
    ForeignBlock(BlockAddr),
    #[error("block {0} is still pinned")]
    StillPinned(BlockAddr),
    #[error("block {0} is referenced by the index; delete or evict it instead")]
    StillIndexed(BlockAddr),
    #[error("expected {expected} block address(es) for the sequence, got {got}")]
    AddrCountMismatch { expected: usize, got: usize },
    #[error("block {block_index} of the sequence is already mapped to a different address")]
    ConflictingMapping { block_index: usize },
    #[error("sequence is not stored in the index")]
    NotFound,
    #[error("block {0} is not pinned")]
    NotPinned(BlockAddr),
}

#[derive(Debug, Clone, Default)]
pub struct BlockState {
    pub allocated: bool,
    pub pin_count: u32,
    /// Reachable through the content index.
    pub indexed: bool,
    /// Unlinked from the index while pinned; freed on the last unpin.
    pub orphaned: bool,
    /// Content tag of the indexed block (diagnostic).
    pub tag: Option<ContentTag>,
    /// Remote instance this block was allocated on behalf of; cleared when
    /// the block is indexed (ownership transfers to the local pool).
    pub on_behalf: Option<InstanceId>,
}

#[derive(Debug, Clone)]
struct BlockPool {
    free: Vec<u32>,
    states: Vec<BlockState>,
}

impl BlockPool {
    fn new(capacity: u32) -> Self {
        BlockPool {
            // LIFO free list; lowest indexes hand out first.
            free: (0..capacity).rev().collect(),
            states: vec![BlockState::default(); capacity as usize],
        }
    }

    fn capacity(&self) -> usize {
        self.states.len()
    }
}

/// Outcome of [`MemPool::insert`].
#[derive(Debug, Clone, PartialEq)]
pub struct InsertOutcome {
    /// Full blocks of the (truncated) sequence now present in the index.
    pub stored_blocks: usize,
    /// Caller addresses newly linked by this insert.
    pub new_blocks: Vec<BlockAddr>,
    /// Caller addresses released because identical content was already
    /// indexed under different blocks (freed, or orphaned if pinned).
    pub deduped: Vec<BlockAddr>,
}

/// One instance's pooled KV memory.
#[derive(Debug, Clone)]
pub struct MemPool {
    instance: InstanceId,
    block_size: usize,
    hbm: BlockPool,
    dram: BlockPool,
    index: TokenRadix<BlockAddr>,
}

impl MemPool {
    pub fn new(instance: InstanceId, block_size: usize, hbm_blocks: u32, dram_blocks: u32) -> Self {
        MemPool {
            instance,
            block_size,
            hbm: BlockPool::new(hbm_blocks),
            dram: BlockPool::new(dram_blocks),
            index: TokenRadix::new(block_size),
        }
    }

    pub fn instance(&self) -> InstanceId {
        self.instance
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn pool(&self, medium: Medium) -> &BlockPool {
        match medium {
            Medium::Hbm => &self.hbm,
            Medium::Dram => &self.dram,
        }
    }

    fn pool_mut(&mut self, medium: Medium) -> &mut BlockPool {
        match medium {
            Medium::Hbm => &mut self.hbm,
            Medium::Dram => &mut self.dram,
        }
    }

    pub fn capacity(&self, medium: Medium) -> usize {
        self.pool(medium).capacity()
    }

    pub fn free_blocks(&self, medium: Medium) -> usize {
        self.pool(medium).free.len()
    }

    pub fn allocated_blocks(&self, medium: Medium) -> usize {
        self.capacity(medium) - self.free_blocks(medium)
    }

    /// Blocks currently reachable through the content index.
    pub fn indexed_blocks(&self) -> usize {
        self.index.total_blocks()
    }

    pub fn state(&self, addr: BlockAddr) -> Result<&BlockState, MemPoolError> {
        if addr.instance != self.instance {
            return Err(MemPoolError::ForeignBlock(addr));
        }
        self.pool(addr.medium)
            .states
            .get(addr.index as usize)
            .ok_or(MemPoolError::NotAllocated(addr))
    }

    fn state_mut(&mut self, addr: BlockAddr) -> Result<&mut BlockState, MemPoolError> {
        if addr.instance != self.instance {
            return Err(MemPoolError::ForeignBlock(addr));
        }
        self.pool_mut(addr.medium)
            .states
            .get_mut(addr.index as usize)
            .ok_or(MemPoolError::NotAllocated(addr))
    }

    fn addr(&self, medium: Medium, index: u32) -> BlockAddr {
        BlockAddr { instance: self.instance, medium, index }
    }

    /// Allocate `n` blocks, evicting unpinned indexed blocks of the same
    /// medium (least recently used first) if the free list runs short.
    /// `on_behalf` tags blocks allocated for a remote peer's transfer so
    /// failure cleanup can reclaim them.
    pub fn alloc(
        &mut self,
        medium: Medium,
        n: usize,
        on_behalf: Option<InstanceId>,
    ) -> Result<Vec<BlockAddr>, MemPoolError> {
        let free = self.free_blocks(medium);
        if free < n {
            let evicted = self.evict(medium, n - free);
            if self.free_blocks(medium) < n {
                return Err(MemPoolError::OutOfMemory {
                    medium,
                    requested: n,
                    free,
                    evictable: evicted.len(),
                });
            }
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = self.pool_mut(medium).free.pop().expect("free list verified above");
            let st = &mut self.pool_mut(medium).states[idx as usize];
            *st = BlockState { allocated: true, on_behalf, ..BlockState::default() };
            out.push(self.addr(medium, idx));
        }
        Ok(out)
    }

    /// Return working blocks to the free list. Indexed or pinned blocks are
    /// refused: the index owns their lifecycle.
    pub fn free(&mut self, addrs: &[BlockAddr]) -> Result<(), MemPoolError> {
        for &a in addrs {
            let st = self.state(a)?;
            if !st.allocated {
                return Err(MemPoolError::NotAllocated(a));
            }
            if st.indexed {
                return Err(MemPoolError::StillIndexed(a));
            }
            if st.pin_count > 0 {
                return Err(MemPoolError::StillPinned(a));
            }
        }
        for &a in addrs {
            self.release(a);
        }
        Ok(())
    }

    /// Unconditionally reclaim one block (state cleared, back on the free
    /// list). Callers must have settled index/pin bookkeeping.
    fn release(&mut self, addr: BlockAddr) {
        let st = &mut self.pool_mut(addr.medium).states[addr.index as usize];
        debug_assert!(st.allocated, "releasing unallocated block {addr}");
        *st = BlockState::default();
        self.pool_mut(addr.medium).free.push(addr.index);
    }

    /// Index a sequence's full blocks under the given addresses. Positions
    /// already mapped to identical content keep their existing blocks and
    /// the caller's duplicates are released (or orphaned while pinned).
    pub fn insert(
        &mut self,
        tokens: &[TokenId],
        addrs: &[BlockAddr],
        now: SimTime,
    ) -> Result<InsertOutcome, MemPoolError> {
        self.insert_with(tokens, addrs, now, OnConflict::KeepExisting)
    }

    pub fn insert_with(
        &mut self,
        tokens: &[TokenId],
        addrs: &[BlockAddr],
        now: SimTime,
        on_conflict: OnConflict,
    ) -> Result<InsertOutcome, MemPoolError> {
        let blocks = tokens.len() / self.block_size;
        if addrs.len() != blocks {
            return Err(MemPoolError::AddrCountMismatch { expected: blocks, got: addrs.len() });
        }
        for &a in addrs {
            let st = self.state(a)?;
            if !st.allocated {
                return Err(MemPoolError::NotAllocated(a));
            }
        }
        let report = self
            .index
            .insert(tokens, addrs, now, on_conflict)
            .map_err(|c| MemPoolError::ConflictingMapping { block_index: c.block_index })?;

        let tags = block_tags(&tokens[..blocks * self.block_size], self.block_size);
        let mut out = InsertOutcome {
            stored_blocks: report.stored_blocks,
            new_blocks: Vec::new(),
            deduped: Vec::new(),
        };
        for bi in report.new_blocks {
            let a = addrs[bi];
            let tag = tags[bi];
            let st = self.state_mut(a).expect("validated above");
            st.indexed = true;
            st.orphaned = false;
            st.tag = Some(tag);
            st.on_behalf = None; // ownership transfers to the local pool
            out.new_blocks.push(a);
        }
        for (bi, a) in report.duplicates {
            let _ = bi;
            let st = self.state_mut(a).expect("validated above");
            if st.indexed {
                // The caller handed back the index's own block for a
                // position it already owns (re-inserting a grown sequence
                // over a matched prefix). Nothing to release.
                continue;
            }
            // Identical content is already indexed elsewhere: the caller's
            // copy is redundant.
            if st.pin_count > 0 {
                st.orphaned = true;
            } else {
                self.release(a);
            }
            out.deduped.push(a);
        }
        Ok(out)
    }

    /// Longest indexed prefix of `tokens` at block granularity. Refreshes
    /// recency along the matched path; does not pin.
    pub fn match_prefix(&mut self, tokens: &[TokenId], now: SimTime) -> MatchOut<BlockAddr> {
        self.index.match_prefix(tokens, now, true)
    }

    /// Pin blocks against eviction (counted; callers pair with `unpin`).
    pub fn pin(&mut self, addrs: &[BlockAddr]) -> Result<(), MemPoolError> {
        for &a in addrs {
            let st = self.state(a)?;
            if !st.allocated {
                return Err(MemPoolError::NotAllocated(a));
            }
        }
        for &a in addrs {
            self.state_mut(a).unwrap().pin_count += 1;
        }
        Ok(())
    }

    /// Drop one pin. A block unlinked from the index while pinned is
    /// released on its last unpin.
    pub fn unpin(&mut self, addrs: &[BlockAddr]) -> Result<(), MemPoolError> {
        for &a in addrs {
            let st = self.state(a)?;
            if !st.allocated {
                return Err(MemPoolError::NotAllocated(a));
            }
            if st.pin_count == 0 {
                return Err(MemPoolError::NotPinned(a));
            }
        }
        for &a in addrs {
            let st = self.state_mut(a).unwrap();
            st.pin_count -= 1;
            if st.pin_count == 0 && st.orphaned {
                self.release(a);
            }
        }
        Ok(())
    }

    /// Unlink one exact stored sequence from the index. Tail blocks no
    /// other stored sequence shares are freed immediately when unpinned,
    /// orphaned otherwise. Returns the unlinked addresses, deepest first.
    pub fn delete(&mut self, tokens: &[TokenId]) -> Result<Vec<BlockAddr>, MemPoolError> {
        let freed = self.index.delete(tokens).ok_or(MemPoolError::NotFound)?;
        for &a in &freed {
            let st = self.state_mut(a).expect("indexed blocks are valid");
            st.indexed = false;
            st.tag = None;
            if st.pin_count > 0 {
                st.orphaned = true;
            } else {
                self.release(a);
            }
        }
        Ok(freed)
    }

    /// Evict up to `n` least-recently-used unpinned indexed blocks of
    /// `medium`, freeing them. Returns the evicted addresses in order.
    pub fn evict(&mut self, medium: Medium, n: usize) -> Vec<BlockAddr> {
        let (index, hbm, dram) = (&mut self.index, &self.hbm, &self.dram);
        let freed = index.evict(n, |a: &BlockAddr| {
            if a.medium != medium {
                return false;
            }
            let pool = match a.medium {
                Medium::Hbm => hbm,
                Medium::Dram => dram,
            };
            pool.states[a.index as usize].pin_count == 0
        });
        for &a in &freed {
            let st = &mut self.pool_mut(a.medium).states[a.index as usize];
            st.indexed = false;
            st.tag = None;
            self.release(a);
        }
        freed
    }

    /// How many indexed blocks of `medium` could be evicted right now.
    pub fn evictable_blocks(&self, medium: Medium) -> usize {
        self.index
            .slots()
            .iter()
            .filter(|s| {
                s.payload.medium == medium
                    && self.pool(medium).states[s.payload.index as usize].pin_count == 0
            })
            .count()
    }

    /// Demote up to `n` least-recently-used unpinned indexed HBM blocks to
    /// DRAM, preserving their index paths. Returns `(from, to)` pairs.
    pub fn swap_out(&mut self, n: usize) -> Vec<(BlockAddr, BlockAddr)> {
        let mut moved = Vec::new();
        for _ in 0..n {
            let cand = self
                .index
                .slots()
                .into_iter()
                .filter(|s| {
                    s.payload.medium == Medium::Hbm
                        && self.hbm.states[s.payload.index as usize].pin_count == 0
                })
                .min_by(|a, b| {
                    (a.last_access, a.uid)
                        .partial_cmp(&(b.last_access, b.uid))
                        .expect("access times are never NaN")
                });
            let Some(c) = cand else { break };
            let Ok(to) = self.alloc(Medium::Dram, 1, None) else { break };
            let to = to[0];
            self.relocate(c.payload, to);
            moved.push((c.payload, to));
        }
        moved
    }

    /// Promote the given indexed DRAM blocks back to HBM (allocating HBM,
    /// evicting cold HBM blocks if needed). Addresses already in HBM are
    /// skipped. Returns `(from, to)` pairs for the blocks actually moved.
    pub fn swap_in(
        &mut self,
        addrs: &[BlockAddr],
    ) -> Result<Vec<(BlockAddr, BlockAddr)>, MemPoolError> {
        let mut moved = Vec::new();
        for &a in addrs {
            if a.medium != Medium::Dram {
                continue;
            }
            let st = self.state(a)?;
            if !st.allocated || !st.indexed {
                return Err(MemPoolError::NotAllocated(a));
            }
            let to = self.alloc(Medium::Hbm, 1, None)?[0];
            self.relocate(a, to);
            moved.push((a, to));
        }
        Ok(moved)
    }

    /// Rewrite one indexed block's address and carry its state across.
    /// Pins follow the logical block to its new home.
    fn relocate(&mut self, from: BlockAddr, to: BlockAddr) {
        let handle = self
            .index
            .slots()
            .into_iter()
            .find(|s| s.payload == from)
            .expect("relocating a block that is not indexed");
        *self.index.payload_mut(handle.node, handle.slot) = to;
        let src = std::mem::take(
            &mut self.pool_mut(from.medium).states[from.index as usize],
        );
        self.pool_mut(from.medium).free.push(from.index);
        let dst = &mut self.pool_mut(to.medium).states[to.index as usize];
        dst.indexed = true;
        dst.tag = src.tag;
        dst.pin_count = src.pin_count;
        dst.orphaned = false;
        dst.on_behalf = None;
    }

    /// Take local ownership of blocks allocated on a peer's behalf, once
    /// their data has safely arrived. Cleared blocks no longer belong to
    /// the peer's in-flight set and survive its failure.
    pub fn claim(&mut self, addrs: &[BlockAddr]) -> Result<(), MemPoolError> {
        for &a in addrs {
            let st = self.state(a)?;
            if !st.allocated {
                return Err(MemPoolError::NotAllocated(a));
            }
        }
        for &a in addrs {
            self.state_mut(a).unwrap().on_behalf = None;
        }
        Ok(())
    }

    /// Reclaim in-flight blocks allocated on behalf of a failed peer: any
    /// allocated, not-yet-indexed block tagged with `failed`. Pins held by
    /// the dead transfer are discarded. Returns the freed addresses.
    pub fn free_by_allocator(&mut self, failed: InstanceId) -> Vec<BlockAddr> {
        let mut freed = Vec::new();
        for medium in [Medium::Hbm, Medium::Dram] {
            for i in 0..self.pool(medium).capacity() as u32 {
                let st = &self.pool(medium).states[i as usize];
                if st.allocated && !st.indexed && st.on_behalf == Some(failed) {
                    let a = self.addr(medium, i);
                    self.release(a);
                    freed.push(a);
                }
            }
        }
        freed
    }

    /// Every indexed block, in deterministic index order.
    pub fn indexed_slots(&self) -> Vec<SlotInfo<BlockAddr>> {
        self.index.slots()
    }

    /// True when `tokens` (block-truncated) is an exactly stored sequence.
    pub fn contains_sequence(&self, tokens: &[TokenId]) -> bool {
        self.index.contains_end(tokens)
    }

    /// Human-readable snapshot: pool counters plus one index path per line.
    pub fn dump(&self) -> String {
        let mut out = format!("instance={} block_size={}\n", self.instance, self.block_size);
        for medium in [Medium::Hbm, Medium::Dram] {
            let pool = self.pool(medium);
            let pinned = pool.states.iter().filter(|s| s.pin_count > 0).count();
            out.push_str(&format!(
                "{} capacity={} free={} allocated={} pinned={}\n",
                medium,
                pool.capacity(),
                pool.free.len(),
                pool.capacity() - pool.free.len(),
                pinned,
            ));
        }
        out.push_str(&format!("index blocks={}\n", self.index.total_blocks()));
        out.push_str(&self.index.dump(&|a| a.to_string()));
        out
    }

    /// Cross-checks pool and index bookkeeping; used by tests and the
    /// failure-cleanup acceptance gate.
    pub fn verify(&self) -> Result<(), String> {
        self.index.check_invariants()?;
        let mut indexed_addrs = BTreeSet::new();
        for s in self.index.slots() {
            let a = s.payload;
            if a.instance != self.instance {
                return Err(format!("index holds foreign block {a}"));
            }
            if !indexed_addrs.insert(a) {
                return Err(format!("block {a} indexed twice"));
            }
            let st = self.pool(a.medium).states[a.index as usize].clone();
            if !st.allocated || !st.indexed {
                return Err(format!("index points at unallocated block {a}"));
            }
            if st.orphaned {
                return Err(format!("indexed block {a} marked orphaned"));
            }
        }
        for medium in [Medium::Hbm, Medium::Dram] {
            let pool = self.pool(medium);
            let free: BTreeSet<u32> = pool.free.iter().copied().collect();
            if free.len() != pool.free.len() {
                return Err(format!("{medium} free list has duplicates"));
            }
            for i in 0..pool.capacity() as u32 {
                let st = &pool.states[i as usize];
                let a = self.addr(medium, i);
                if st.allocated == free.contains(&i) {
                    return Err(format!("block {a} allocation/free-list mismatch"));
                }
                if st.indexed != indexed_addrs.contains(&a) {
                    return Err(format!("block {a} indexed flag out of sync"));
                }
                if st.orphaned && (st.pin_count == 0 || st.indexed) {
                    return Err(format!("block {a} orphan state inconsistent"));
                }
                if !st.allocated && (st.pin_count != 0 || st.indexed || st.orphaned) {
                    return Err(format!("free block {a} carries state"));
                }
            }
        }
        Ok(())
    }
}
