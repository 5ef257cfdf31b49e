//! Block-granular token-prefix radix tree.
//!
//! The tree stores token sequences at block granularity: a sequence is
//! indexed up to its last full block, and matching truncates to block
//! multiples. Nodes hold compressed token segments; a *slot* is one block's
//! worth of bookkeeping (payload, last access, insertion order, end-of-
//! sequence marker) attached to the node whose segment contains the block's
//! end. Sibling segments always start with distinct tokens, so walks are
//! unambiguous; segments split at arbitrary token offsets when sequences
//! diverge mid-block.
//!
//! Two clients share this structure: the memory pool's index (payload =
//! block address) and the global scheduler's prompt trees (payload = unit,
//! with `last_access` doubling as the entry's freshness time). The matching,
//! deletion and eviction semantics are what the pool's brute-force oracle
//! tests pin down:
//!
//! * `match`: longest common prefix against any stored sequence, truncated
//!   to block granularity;
//! * `delete`: unlink one exact stored sequence, freeing tail blocks no
//!   other stored sequence needs;
//! * `evict`: repeatedly free the least-recently-used leaf block.

use crate::types::{SimTime, TokenId};

/// What `insert` does when a block position is already mapped to a
/// different payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnConflict {
    /// Keep the existing mapping; report the caller's payload back so the
    /// caller can release the duplicate block.
    #[default]
    KeepExisting,
    /// Refuse the whole insert, leaving the tree untouched.
    Reject,
}

/// Reported by `insert` with `OnConflict::Reject`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conflict {
    /// Index of the first conflicting block in the inserted sequence.
    pub block_index: usize,
}

/// Outcome of an insert.
#[derive(Debug, Clone)]
pub struct InsertReport<P> {
    /// Blocks the tree now stores for this sequence (full blocks only).
    pub stored_blocks: usize,
    /// Block positions that were newly indexed by this insert.
    pub new_blocks: Vec<usize>,
    /// `(block index, caller payload)` pairs rejected in favor of an
    /// existing identical-token mapping with a different payload.
    pub duplicates: Vec<(usize, P)>,
}

/// Outcome of a prefix match.
#[derive(Debug, Clone)]
pub struct MatchOut<P> {
    /// Matched token count; always a multiple of the block size.
    pub matched_tokens: usize,
    /// One payload per matched block, shallowest first.
    pub payloads: Vec<P>,
}

/// A visitable block record (for scans, swaps and invariant checks).
#[derive(Debug, Clone)]
pub struct SlotInfo<P> {
    pub node: usize,
    pub slot: usize,
    /// Token depth at which the block ends (multiple of the block size).
    pub end: usize,
    pub last_access: SimTime,
    pub uid: u64,
    pub seq_end: bool,
    pub payload: P,
}

#[derive(Debug, Clone)]
struct BlockSlot<P> {
    /// Token depth at which this block ends.
    end: usize,
    payload: P,
    last_access: SimTime,
    /// Monotone creation counter; also the LRU tie-break.
    uid: u64,
    /// True when a stored sequence ends exactly at this block.
    seq_end: bool,
}

#[derive(Debug, Clone)]
struct Node<P> {
    /// Token segment on the edge into this node.
    seg: Vec<TokenId>,
    /// Token depth at which `seg` begins.
    start: usize,
    children: std::collections::BTreeMap<TokenId, usize>,
    parent: usize,
    /// Blocks ending within `(start, start + seg.len()]`, sorted by `end`.
    slots: Vec<BlockSlot<P>>,
}

impl<P> Node<P> {
    fn end(&self) -> usize {
        self.start + self.seg.len()
    }
}

#[derive(Debug, Clone)]
pub struct TokenRadix<P> {
    block_size: usize,
    nodes: Vec<Node<P>>,
    free: Vec<usize>,
    next_uid: u64,
    n_slots: usize,
}

const ROOT: usize = 0;

impl<P: Clone + PartialEq> TokenRadix<P> {
    pub fn new(block_size: usize) -> Self {
        assert!(block_size > 0, "block_size must be positive");
        TokenRadix {
            block_size,
            nodes: vec![Node {
                seg: Vec::new(),
                start: 0,
                children: std::collections::BTreeMap::new(),
                parent: ROOT,
                slots: Vec::new(),
            }],
            free: Vec::new(),
            next_uid: 0,
            n_slots: 0,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Total indexed blocks.
    pub fn total_blocks(&self) -> usize {
        self.n_slots
    }

    fn truncate(&self, n: usize) -> usize {
        n / self.block_size * self.block_size
    }

    fn alloc_node(&mut self, node: Node<P>) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    /// Walk as deep as the tokens agree with the tree. Returns the visited
    /// node chain (excluding the root) and the token-level agreement depth.
    fn walk<'a>(&self, tokens: &'a [TokenId]) -> (Vec<usize>, usize) {
        let mut path = Vec::new();
        let mut cur = ROOT;
        let mut depth = 0usize;
        loop {
            if depth == tokens.len() {
                break;
            }
            let Some(&child) = self.nodes[cur].children.get(&tokens[depth]) else {
                break;
            };
            let seg = &self.nodes[child].seg;
            let rest = &tokens[depth..];
            let mut n = 0usize;
            let lim = seg.len().min(rest.len());
            while n < lim && seg[n] == rest[n] {
                n += 1;
            }
            path.push(child);
            depth += n;
            if n < seg.len() {
                break;
            }
            cur = child;
        }
        (path, depth)
    }

    /// Insert a sequence (truncated to full blocks) mapping block `i` to
    /// `payloads[i]`. `payloads` must cover exactly the truncated blocks.
    pub fn insert(
        &mut self,
        tokens: &[TokenId],
        payloads: &[P],
        now: SimTime,
        on_conflict: OnConflict,
    ) -> Result<InsertReport<P>, Conflict> {
        let trunc = self.truncate(tokens.len());
        let blocks = trunc / self.block_size;
        assert_eq!(
            payloads.len(),
            blocks,
            "insert payload count must equal the number of full blocks"
        );
        let tokens = &tokens[..trunc];

        if on_conflict == OnConflict::Reject {
            // Pre-scan so a rejected insert leaves the tree untouched.
            let (path, depth) = self.walk(tokens);
            for &ni in &path {
                for s in &self.nodes[ni].slots {
                    if s.end <= depth && s.payload != payloads[s.end / self.block_size - 1] {
                        return Err(Conflict { block_index: s.end / self.block_size - 1 });
                    }
                }
            }
        }

        let mut report =
            InsertReport { stored_blocks: blocks, new_blocks: Vec::new(), duplicates: Vec::new() };
        if blocks == 0 {
            return Ok(report);
        }

        let mut cur = ROOT;
        let mut depth = 0usize;
        while depth < trunc {
            match self.nodes[cur].children.get(&tokens[depth]).copied() {
                None => {
                    // Fresh tail: one new leaf carrying the remaining blocks.
                    let seg = tokens[depth..].to_vec();
                    let mut slots = Vec::new();
                    let first_end = (depth / self.block_size + 1) * self.block_size;
                    let mut e = first_end;
                    while e <= trunc {
                        let bi = e / self.block_size - 1;
                        slots.push(BlockSlot {
                            end: e,
                            payload: payloads[bi].clone(),
                            last_access: now,
                            uid: self.next_uid,
                            seq_end: false,
                        });
                        self.next_uid += 1;
                        self.n_slots += 1;
                        report.new_blocks.push(bi);
                        e += self.block_size;
                    }
                    let leaf = self.alloc_node(Node {
                        seg,
                        start: depth,
                        children: std::collections::BTreeMap::new(),
                        parent: cur,
                        slots,
                    });
                    self.nodes[cur].children.insert(tokens[depth], leaf);
                    cur = leaf;
                    depth = trunc;
                }
                Some(child) => {
                    let seg_len = self.nodes[child].seg.len();
                    let rest = &tokens[depth..];
                    let mut n = 0usize;
                    let lim = seg_len.min(rest.len());
                    while n < lim && self.nodes[child].seg[n] == rest[n] {
                        n += 1;
                    }
                    if n < seg_len {
                        // Diverged (or ran out of input) inside the segment.
                        self.split(child, depth + n);
                    }
                    self.touch_range(child, depth, depth + n, payloads, now, &mut report);
                    depth += n;
                    cur = child;
                }
            }
        }
        // Mark the end of the stored sequence on its final block.
        let node = &mut self.nodes[cur];
        let slot = node
            .slots
            .iter_mut()
            .find(|s| s.end == trunc)
            .expect("final block of an inserted sequence must have a slot");
        slot.seq_end = true;
        Ok(report)
    }

    /// Refresh/compare existing slots of `node` with ends in `(from, to]`.
    fn touch_range(
        &mut self,
        node: usize,
        from: usize,
        to: usize,
        payloads: &[P],
        now: SimTime,
        report: &mut InsertReport<P>,
    ) {
        let bs = self.block_size;
        for s in &mut self.nodes[node].slots {
            if s.end > from && s.end <= to {
                let bi = s.end / bs - 1;
                if s.payload != payloads[bi] {
                    report.duplicates.push((bi, payloads[bi].clone()));
                }
                s.last_access = now;
            }
        }
        report.duplicates.sort_by_key(|d| d.0);
    }

    /// Split `node` so its segment ends at token depth `at`; the tail moves
    /// into a new child that keeps the original children and deeper slots.
    fn split(&mut self, node: usize, at: usize) {
        let start = self.nodes[node].start;
        let end = self.nodes[node].end();
        assert!(at > start && at < end, "split point must be inside the segment");
        let off = at - start;
        let tail_seg = self.nodes[node].seg.split_off(off);
        let tail_children = std::mem::take(&mut self.nodes[node].children);
        let slots = std::mem::take(&mut self.nodes[node].slots);
        let (head_slots, tail_slots): (Vec<_>, Vec<_>) =
            slots.into_iter().partition(|s| s.end <= at);
        self.nodes[node].slots = head_slots;
        let tail_first = tail_seg[0];
        let tail = self.alloc_node(Node {
            seg: tail_seg,
            start: at,
            children: tail_children,
            parent: node,
            slots: tail_slots,
        });
        // Re-home grandchildren.
        let grand: Vec<usize> = self.nodes[tail].children.values().copied().collect();
        for g in grand {
            self.nodes[g].parent = tail;
        }
        self.nodes[node].children.insert(tail_first, tail);
    }

    /// Longest stored prefix of `tokens`, truncated to block granularity.
    /// Refreshes `last_access` along the matched path when `refresh` is set.
    pub fn match_prefix(&mut self, tokens: &[TokenId], now: SimTime, refresh: bool) -> MatchOut<P> {
        let (path, depth) = self.walk(tokens);
        let matched = self.truncate(depth);
        let mut payloads = Vec::with_capacity(matched / self.block_size);
        for ni in path {
            // Slot lists are end-sorted, shallowest first.
            let node = &mut self.nodes[ni];
            for s in &mut node.slots {
                if s.end <= matched {
                    payloads.push(s.payload.clone());
                    if refresh {
                        s.last_access = now;
                    }
                }
            }
        }
        debug_assert_eq!(payloads.len(), matched / self.block_size);
        MatchOut { matched_tokens: matched, payloads }
    }

    /// Read-only match that admits only blocks passing `accept` (checked on
    /// `last_access`); matching stops at the first rejected block. Used by
    /// the global prompt trees for TTL filtering.
    pub fn match_len_filtered(
        &self,
        tokens: &[TokenId],
        accept: impl Fn(SimTime) -> bool,
    ) -> usize {
        let (path, depth) = self.walk(tokens);
        let matched = self.truncate(depth);
        let mut ok = 0usize;
        for ni in path {
            for s in &self.nodes[ni].slots {
                if s.end <= matched {
                    if !accept(s.last_access) {
                        return ok;
                    }
                    ok = s.end;
                }
            }
        }
        ok
    }

    /// True when `tokens` (block-truncated) is an exactly stored sequence.
    pub fn contains_end(&self, tokens: &[TokenId]) -> bool {
        let trunc = self.truncate(tokens.len());
        if trunc == 0 {
            return false;
        }
        let (path, depth) = self.walk(&tokens[..trunc]);
        if depth != trunc {
            return false;
        }
        path.iter().any(|&ni| {
            self.nodes[ni].slots.iter().any(|s| s.end == trunc && s.seq_end)
        })
    }

    /// Unlink one exact stored sequence. Tail blocks no other stored
    /// sequence reaches are removed and their payloads returned,
    /// deepest first.
    pub fn delete(&mut self, tokens: &[TokenId]) -> Option<Vec<P>> {
        let trunc = self.truncate(tokens.len());
        if trunc == 0 {
            return None;
        }
        let (path, depth) = self.walk(&tokens[..trunc]);
        if depth != trunc {
            return None;
        }
        let &end_node = path.last()?;
        let slot = self.nodes[end_node]
            .slots
            .iter_mut()
            .find(|s| s.end == trunc && s.seq_end)?;
        slot.seq_end = false;

        let mut freed = Vec::new();
        let mut node = end_node;
        'outer: loop {
            while self.nodes[node].children.is_empty() {
                let Some(last) = self.nodes[node].slots.last() else {
                    break;
                };
                if last.seq_end {
                    break 'outer;
                }
                let s = self.nodes[node].slots.pop().unwrap();
                self.n_slots -= 1;
                freed.push(s.payload);
            }
            if !self.nodes[node].slots.is_empty() || !self.nodes[node].children.is_empty() {
                break;
            }
            if node == ROOT {
                break;
            }
            node = self.detach(node);
        }
        self.trim_if_leaf(node);
        Some(freed)
    }

    /// Free up to `n` least-recently-used leaf blocks whose payload passes
    /// `evictable`. Returns the freed payloads in eviction order.
    pub fn evict(&mut self, n: usize, mut evictable: impl FnMut(&P) -> bool) -> Vec<P> {
        let mut freed = Vec::new();
        for _ in 0..n {
            let mut best: Option<(SimTime, u64, usize)> = None;
            for (ni, node) in self.nodes.iter().enumerate() {
                if ni == ROOT || node.seg.is_empty() || !node.children.is_empty() {
                    continue;
                }
                if self.free.contains(&ni) {
                    continue;
                }
                let Some(last) = node.slots.last() else { continue };
                if !evictable(&last.payload) {
                    continue;
                }
                let key = (last.last_access, last.uid);
                if best.map_or(true, |(la, uid, _)| key < (la, uid)) {
                    best = Some((key.0, key.1, ni));
                }
            }
            let Some((_, _, node)) = best else { break };
            freed.push(self.pop_leaf_block(node));
        }
        freed
    }

    /// Remove the deepest block of a childless node, maintaining sequence-
    /// end markers and pruning/trimming the structure.
    fn pop_leaf_block(&mut self, node: usize) -> P {
        debug_assert!(self.nodes[node].children.is_empty());
        let slot = self.nodes[node].slots.pop().expect("leaf must hold a block");
        self.n_slots -= 1;
        if slot.seq_end {
            // The stored sequence truncates to the previous block on the
            // path, which is the new deepest slot here or the nearest
            // ancestor's deepest slot.
            let mut holder = None;
            if !self.nodes[node].slots.is_empty() {
                holder = Some(node);
            } else {
                let mut cur = node;
                while cur != ROOT {
                    cur = self.nodes[cur].parent;
                    if !self.nodes[cur].slots.is_empty() {
                        holder = Some(cur);
                        break;
                    }
                }
            }
            if let Some(h) = holder {
                self.nodes[h].slots.last_mut().unwrap().seq_end = true;
            }
        }
        if self.nodes[node].slots.is_empty() {
            let mut cur = node;
            while cur != ROOT
                && self.nodes[cur].slots.is_empty()
                && self.nodes[cur].children.is_empty()
            {
                cur = self.detach(cur);
            }
            self.trim_if_leaf(cur);
        } else {
            self.trim_if_leaf(node);
        }
        slot.payload
    }

    /// Remove a node from its parent and return the parent index.
    fn detach(&mut self, node: usize) -> usize {
        debug_assert!(self.nodes[node].slots.is_empty());
        debug_assert!(self.nodes[node].children.is_empty());
        let parent = self.nodes[node].parent;
        let first = self.nodes[node].seg[0];
        let removed = self.nodes[parent].children.remove(&first);
        debug_assert_eq!(removed, Some(node));
        self.nodes[node].seg.clear();
        self.free.push(node);
        parent
    }

    /// Shrink a childless node's dangling token tail back to its deepest
    /// block so dumps and walks stay canonical.
    fn trim_if_leaf(&mut self, node: usize) {
        if node == ROOT || !self.nodes[node].children.is_empty() {
            return;
        }
        let start = self.nodes[node].start;
        match self.nodes[node].slots.last() {
            Some(last) if last.end < self.nodes[node].end() => {
                let keep = last.end - start;
                self.nodes[node].seg.truncate(keep);
            }
            Some(_) => {}
            None => {
                // A childless node with no blocks should not persist.
                if !self.nodes[node].seg.is_empty() {
                    self.detach(node);
                }
            }
        }
    }

    /// Every indexed block, in deterministic (DFS, token-sorted) order.
    pub fn slots(&self) -> Vec<SlotInfo<P>> {
        let mut out = Vec::with_capacity(self.n_slots);
        let mut stack = vec![ROOT];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            for (si, s) in node.slots.iter().enumerate() {
                out.push(SlotInfo {
                    node: ni,
                    slot: si,
                    end: s.end,
                    last_access: s.last_access,
                    uid: s.uid,
                    seq_end: s.seq_end,
                    payload: s.payload.clone(),
                });
            }
            // Reverse so the smallest child token pops first.
            for &c in node.children.values().rev() {
                stack.push(c);
            }
        }
        out
    }

    /// Mutable access to one block's payload (handles from [`slots`]).
    /// Valid only while no structural mutation happens in between.
    pub fn payload_mut(&mut self, node: usize, slot: usize) -> &mut P {
        &mut self.nodes[node].slots[slot].payload
    }

    /// Deterministic text rendering: one root-to-leaf path per line with
    /// token range, tokens, payloads and last-access times.
    pub fn dump(&self, fmt_payload: &dyn Fn(&P) -> String) -> String {
        let mut out = String::new();
        let mut chain: Vec<usize> = Vec::new();
        self.dump_node(ROOT, &mut chain, fmt_payload, &mut out);
        out
    }

    fn dump_node(
        &self,
        ni: usize,
        chain: &mut Vec<usize>,
        fmt_payload: &dyn Fn(&P) -> String,
        out: &mut String,
    ) {
        if ni != ROOT {
            chain.push(ni);
        }
        if self.nodes[ni].children.is_empty() {
            if !chain.is_empty() {
                let end = self.nodes[*chain.last().unwrap()].end();
                let mut tokens = Vec::with_capacity(end);
                let mut slots = Vec::new();
                let mut ends = Vec::new();
                for &c in chain.iter() {
                    tokens.extend_from_slice(&self.nodes[c].seg);
                    for s in &self.nodes[c].slots {
                        slots.push(format!(
                            "{}@{:.6}={}",
                            s.end,
                            s.last_access,
                            fmt_payload(&s.payload)
                        ));
                        if s.seq_end {
                            ends.push(s.end.to_string());
                        }
                    }
                }
                let toks: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                out.push_str(&format!(
                    "range=[0..{}) tokens={} blocks=[{}] ends=[{}]\n",
                    end,
                    toks.join("."),
                    slots.join(","),
                    ends.join(",")
                ));
            }
        } else {
            for &c in self.nodes[ni].children.values() {
                self.dump_node(c, chain, fmt_payload, out);
            }
        }
        if ni != ROOT {
            chain.pop();
        }
    }

    /// Structural self-checks used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![ROOT];
        let mut seen_slots = 0usize;
        while let Some(ni) = stack.pop() {
            live[ni] = true;
            let node = &self.nodes[ni];
            if ni != ROOT {
                if node.seg.is_empty() {
                    return Err(format!("node {ni} has an empty segment"));
                }
                let parent = &self.nodes[node.parent];
                if parent.children.get(&node.seg[0]) != Some(&ni) {
                    return Err(format!("node {ni} not linked from its parent"));
                }
                if node.start != parent.end() {
                    return Err(format!("node {ni} start does not continue its parent"));
                }
            }
            let mut prev_end = node.start;
            for s in &node.slots {
                if s.end % self.block_size != 0 {
                    return Err(format!("slot end {} not block aligned", s.end));
                }
                if s.end <= prev_end && prev_end != node.start {
                    return Err("slots not strictly end-sorted".into());
                }
                if s.end <= node.start || s.end > node.end() {
                    return Err(format!("slot end {} outside node span", s.end));
                }
                prev_end = s.end;
                seen_slots += 1;
            }
            // Every block boundary inside the span must carry a slot.
            let first_end = (node.start / self.block_size + 1) * self.block_size;
            let mut expect = Vec::new();
            let mut e = first_end;
            while e <= node.end() {
                expect.push(e);
                e += self.block_size;
            }
            let got: Vec<usize> = node.slots.iter().map(|s| s.end).collect();
            if got != expect {
                return Err(format!(
                    "node {ni} slot coverage {got:?} != expected {expect:?}"
                ));
            }
            if node.children.is_empty() && ni != ROOT {
                match node.slots.last() {
                    None => return Err(format!("leaf {ni} holds no blocks")),
                    Some(last) => {
                        if last.end != node.end() {
                            return Err(format!("leaf {ni} has dangling tokens"));
                        }
                        if !last.seq_end {
                            return Err(format!("leaf {ni} deepest block lacks seq_end"));
                        }
                    }
                }
            }
            for (&tok, &c) in &node.children {
                if self.nodes[c].seg.first() != Some(&tok) {
                    return Err(format!("child key {tok} mismatches segment"));
                }
                stack.push(c);
            }
        }
        if seen_slots != self.n_slots {
            return Err(format!("slot count {seen_slots} != tracked {}", self.n_slots));
        }
        for (ni, l) in live.iter().enumerate() {
            if !l && !self.free.contains(&ni) {
                return Err(format!("node {ni} leaked (unreachable, not freed)"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(r: std::ops::Range<u32>) -> Vec<TokenId> {
        r.collect()
    }

    fn tree() -> TokenRadix<u32> {
        TokenRadix::new(16)
    }

    #[test]
    fn insert_truncates_to_full_blocks() {
        let mut t = tree();
        // 40 tokens, block size 16: only 32 tokens (2 blocks) are indexed.
        let rep = t.insert(&toks(0..40), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        assert_eq!(rep.stored_blocks, 2);
        assert_eq!(rep.new_blocks, vec![0, 1]);
        let m = t.match_prefix(&toks(0..40), 1.0, true);
        assert_eq!(m.matched_tokens, 32);
        assert_eq!(m.payloads, vec![1, 2]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn match_truncates_mid_block_divergence() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        // Shares 24 tokens, then diverges: only the first full block matches.
        let mut q = toks(0..24);
        q.extend(100..108);
        let m = t.match_prefix(&q, 1.0, true);
        assert_eq!(m.matched_tokens, 16);
        assert_eq!(m.payloads, vec![1]);
    }

    #[test]
    fn divergent_insert_splits_and_keeps_both() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        let mut other = toks(0..24);
        other.extend(200..208);
        let rep = t.insert(&other, &[1, 9], 1.0, OnConflict::KeepExisting).unwrap();
        // Block 0 is shared (same payload), block 1 is a new branch.
        assert!(rep.duplicates.is_empty());
        assert_eq!(rep.new_blocks, vec![1]);
        assert_eq!(t.total_blocks(), 3);
        assert_eq!(t.match_prefix(&toks(0..32), 2.0, true).payloads, vec![1, 2]);
        assert_eq!(t.match_prefix(&other, 2.0, true).payloads, vec![1, 9]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn conflicting_mapping_keeps_existing_by_default() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        let rep = t.insert(&toks(0..32), &[1, 7], 1.0, OnConflict::KeepExisting).unwrap();
        assert_eq!(rep.duplicates, vec![(1, 7)]);
        assert_eq!(t.match_prefix(&toks(0..32), 2.0, true).payloads, vec![1, 2]);

        let err = t.insert(&toks(0..32), &[5, 2], 2.0, OnConflict::Reject).unwrap_err();
        assert_eq!(err.block_index, 0);
        // Rejected insert left everything alone.
        assert_eq!(t.match_prefix(&toks(0..32), 3.0, true).payloads, vec![1, 2]);
    }

    #[test]
    fn identical_insert_is_a_noop() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        let rep = t.insert(&toks(0..32), &[1, 2], 1.0, OnConflict::KeepExisting).unwrap();
        assert!(rep.new_blocks.is_empty());
        assert!(rep.duplicates.is_empty());
        assert_eq!(t.total_blocks(), 2);
    }

    #[test]
    fn delete_keeps_shared_prefix_alive() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        let mut other = toks(0..16);
        other.extend(300..316);
        t.insert(&other, &[1, 8], 0.0, OnConflict::KeepExisting).unwrap();

        let freed = t.delete(&toks(0..32)).unwrap();
        assert_eq!(freed, vec![2]); // only the unshared tail block
        assert_eq!(t.match_prefix(&toks(0..32), 1.0, true).matched_tokens, 16);
        assert_eq!(t.match_prefix(&other, 1.0, true).matched_tokens, 32);
        t.check_invariants().unwrap();

        assert!(t.delete(&toks(0..32)).is_none(), "already unlinked");
        let freed = t.delete(&other).unwrap();
        assert_eq!(freed, vec![8, 1]); // deepest first, now unshared
        assert_eq!(t.total_blocks(), 0);
        t.check_invariants().unwrap();
    }

    #[test]
    fn delete_of_stored_prefix_keeps_longer_sequence() {
        let mut t = tree();
        t.insert(&toks(0..16), &[1], 0.0, OnConflict::KeepExisting).unwrap();
        t.insert(&toks(0..32), &[1, 2], 0.0, OnConflict::KeepExisting).unwrap();
        let freed = t.delete(&toks(0..16)).unwrap();
        assert!(freed.is_empty(), "block 0 is still on the longer path");
        assert_eq!(t.match_prefix(&toks(0..32), 1.0, true).matched_tokens, 32);
        // Deleting the longer sequence now removes everything.
        let freed = t.delete(&toks(0..32)).unwrap();
        assert_eq!(freed, vec![2, 1]);
        assert_eq!(t.total_blocks(), 0);
        t.check_invariants().unwrap();
    }

    #[test]
    fn evict_frees_lru_leaf_tail_block() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 1.0, OnConflict::KeepExisting).unwrap();
        let mut other = toks(500..516);
        other.extend(600..616);
        t.insert(&other, &[3, 4], 5.0, OnConflict::KeepExisting).unwrap();
        // The t=1 path is older: its last block goes first.
        let freed = t.evict(1, |_| true);
        assert_eq!(freed, vec![2]);
        assert_eq!(t.match_prefix(&toks(0..32), 6.0, false).matched_tokens, 16);
        assert_eq!(t.match_prefix(&other, 6.0, false).matched_tokens, 32);
        t.check_invariants().unwrap();
    }

    #[test]
    fn match_refresh_protects_from_eviction() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 1.0, OnConflict::KeepExisting).unwrap();
        let mut other = toks(500..532);
        t.insert(&other, &[3, 4], 2.0, OnConflict::KeepExisting).unwrap();
        // Touch the older path: now the 500.. path is the LRU victim.
        t.match_prefix(&toks(0..32), 10.0, true);
        let freed = t.evict(1, |_| true);
        assert_eq!(freed, vec![4]);
        other.truncate(16);
        assert_eq!(t.match_prefix(&other, 11.0, false).matched_tokens, 16);
    }

    #[test]
    fn evict_skips_unevictable_payloads() {
        let mut t = tree();
        t.insert(&toks(0..32), &[1, 2], 1.0, OnConflict::KeepExisting).unwrap();
        let freed = t.evict(2, |p| *p != 2);
        // Block 2 is pinned; the branch below it is protected wholesale.
        assert!(freed.is_empty());
        assert_eq!(t.total_blocks(), 2);
    }

    #[test]
    fn evict_moves_sequence_end_to_truncated_block() {
        let mut t = tree();
        t.insert(&toks(0..48), &[1, 2, 3], 1.0, OnConflict::KeepExisting).unwrap();
        t.evict(1, |_| true);
        assert!(t.contains_end(&toks(0..32)), "sequence truncated to 32 tokens");
        assert!(!t.contains_end(&toks(0..48)));
        // The truncated sequence is deletable under its new length.
        let freed = t.delete(&toks(0..32)).unwrap();
        assert_eq!(freed, vec![2, 1]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn ttl_filtered_match_stops_at_stale_block() {
        let mut t = tree();
        t.insert(&toks(0..48), &[1, 2, 3], 0.0, OnConflict::KeepExisting).unwrap();
        // Refresh the first two blocks only.
        t.match_prefix(&toks(0..32), 100.0, true);
        let m = t.match_len_filtered(&toks(0..48), |la| la > 50.0);
        assert_eq!(m, 32, "stale third block is not returned");
        let m = t.match_len_filtered(&toks(0..48), |la| la > 200.0);
        assert_eq!(m, 0);
    }

    #[test]
    fn dump_is_deterministic_and_sorted() {
        let mut t = tree();
        t.insert(&toks(16..32), &[7], 0.25, OnConflict::KeepExisting).unwrap();
        t.insert(&toks(0..16), &[5], 0.5, OnConflict::KeepExisting).unwrap();
        let d = t.dump(&|p| format!("b{p}"));
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 2);
        // Child keyed by first token 0 prints before 16.
        assert!(lines[0].starts_with("range=[0..16) tokens=0."), "{d}");
        assert!(lines[0].contains("16@0.500000=b5"), "{d}");
        assert!(lines[1].contains("16@0.250000=b7"), "{d}");
        assert_eq!(d, t.dump(&|p| format!("b{p}")));
    }

    #[test]
    fn deep_shared_prefix_chains_stay_consistent() {
        let mut t = tree();
        let base = toks(0..128);
        let mut payload = 0u32;
        // Store every block-aligned prefix as its own sequence.
        for blocks in 1..=8usize {
            let ps: Vec<u32> = (0..blocks as u32).collect();
            t.insert(&base[..blocks * 16], &ps, blocks as f64, OnConflict::KeepExisting).unwrap();
            payload += 1;
        }
        let _ = payload;
        assert_eq!(t.total_blocks(), 8);
        for blocks in (1..=8usize).rev() {
            assert!(t.contains_end(&base[..blocks * 16]));
        }
        // Deleting the full sequence frees only the deepest block; every
        // shorter prefix is still a stored sequence.
        let freed = t.delete(&base).unwrap();
        assert_eq!(freed, vec![7]);
        assert_eq!(t.match_prefix(&base, 99.0, false).matched_tokens, 112);
        t.check_invariants().unwrap();
    }
}
