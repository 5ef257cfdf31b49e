//! The acceptance gate: ten end-to-end checks, one per headline behavior of
//! the library. Each test is written against an independent oracle — a
//! brute-force model, a closed-form expectation, or a directional claim that
//! must hold between two otherwise-identical runs — never against values the
//! implementation itself produced. Run with `--nocapture` to see one
//! `[ACnn] PASS` line per criterion with the measured numbers.

use std::collections::BTreeMap;
use std::time::Instant;

use kvsim_core::config::{Layout, SimConfig, TransferMode};
use kvsim_core::engine::{evaluate_reuse, CachedPrefix, ReuseDecision, TimingModel};
use kvsim_core::mempool::MemPool;
use kvsim_core::sim::metrics::RequestStatus;
use kvsim_core::sim::workload::{GeneratedWorkload, SessionScript};
use kvsim_core::sim::{run_simulation, run_with_workload, SimReport};
use kvsim_core::transfer::plan_transfer;
use kvsim_core::types::{
    truncate_to_blocks, BlockAddr, InstanceId, Medium, Parallelism, Request, RequestId, TokenId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Scenario plumbing: every simulation test builds its config from one TOML
// template so that the knobs under test are the only thing that varies.

struct Scenario {
    seed: u64,
    serving: &'static str,
    design: &'static str,
    mode: &'static str,
    layout: &'static str,
    policy: &'static str,
    layers: u32,
    eviction: bool,
    per_call_overhead: f64,
    comms: u32,
    max_batch_tokens: usize,
    instances: String,
    workload: String,
    tail: String,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 42,
            serving: "colocated",
            design: "pd-basic",
            mode: "by-request-agg",
            layout: "aggregated",
            policy: "least-load",
            layers: 4,
            eviction: true,
            per_call_overhead: 5e-6,
            comms: 4,
            max_batch_tokens: 16384,
            instances: inst("c0", "colocated", 4096, 4096, true),
            workload: chat(1.0, 1, 1, 0.1, [16, 32], [4, 8]),
            tail: String::new(),
        }
    }
}

impl Scenario {
    fn build(&self) -> SimConfig {
        let text = format!(
            r#"
seed = {seed}
serving_mode = "{serving}"
caching_design = "{design}"
transfer_mode = "{mode}"

[model]
num_layers = {layers}
hidden_size = 64
kv_bytes_per_token_per_layer = 2
context_window = 32768

[block]
block_size = 16
layout = "{layout}"

[network]
per_call_overhead = {oh:?}
hbm_bandwidth = 5e10
dram_bandwidth = 1e10
communicators_per_pair = {comms}

[engine]
max_batch_tokens = {mbt}
max_batch_size = 64
eviction_enabled = {eviction}
swap_before_evict = {eviction}

[scheduler]
policy = "{policy}"
tree_ttl = 3600.0

[cluster]
heartbeat_interval = 0.02
failure_timeout = 0.05

{instances}
[workload]
{workload}
[output]
dir = "acceptance-out"

{tail}
"#,
            seed = self.seed,
            serving = self.serving,
            design = self.design,
            mode = self.mode,
            layers = self.layers,
            layout = self.layout,
            oh = self.per_call_overhead,
            comms = self.comms,
            mbt = self.max_batch_tokens,
            eviction = self.eviction,
            policy = self.policy,
            instances = self.instances,
            workload = self.workload,
            tail = self.tail,
        );
        SimConfig::from_toml_str(&text).expect("acceptance config parses")
    }
}

fn inst(id: &str, kind: &str, hbm: u32, dram: u32, caching: bool) -> String {
    format!(
        "[[instances]]\nid = \"{id}\"\nkind = \"{kind}\"\nhbm_blocks = {hbm}\n\
         dram_blocks = {dram}\ncaching = {caching}\n\n"
    )
}

fn chat(rate: f64, sessions: u32, turns: u32, think: f64, q: [usize; 2], g: [usize; 2]) -> String {
    format!(
        "kind = \"chat\"\nrequest_rate = {rate:?}\nsessions = {sessions}\nturns = {turns}\n\
         think_time_mean = {think:?}\nquestion_tokens = [{}, {}]\ngen_tokens = [{}, {}]\n",
        q[0], q[1], g[0], g[1]
    )
}

#[allow(clippy::too_many_arguments)]
fn docqa(
    rate: f64,
    sessions: u32,
    share: u32,
    turns: u32,
    doc: usize,
    q: [usize; 2],
    g: [usize; 2],
    think: f64,
) -> String {
    format!(
        "kind = \"docqa\"\nrequest_rate = {rate:?}\nsessions = {sessions}\nshare_ratio = {share}\n\
         turns = {turns}\ndoc_prefix_tokens = {doc}\nthink_time_mean = {think:?}\n\
         question_tokens = [{}, {}]\ngen_tokens = [{}, {}]\n",
        q[0], q[1], g[0], g[1]
    )
}

fn req(id: u32, session: u64, prompt: Vec<TokenId>, gen_len: usize) -> Request {
    Request {
        id: RequestId(id),
        session,
        turn: 1,
        prompt,
        gen_len,
        response: (0..gen_len as u32).map(|i| 3_000_000 + id * 1000 + i).collect(),
        think_time: 0.0,
    }
}

// ---------------------------------------------------------------------------
// AC1 — the block index agrees with a brute-force membership model across
// randomized insert / match / delete / evict interleavings.

/// Shadow model of the index: a block is (parent, token chunk) and a match
/// is the longest chain of such links from the root. Maintained purely from
/// the pool's own return values (post-insert match payloads, delete/evict
/// victim lists), so any structural drift shows up as a mismatch.
struct Membership {
    block: usize,
    nodes: BTreeMap<BlockAddr, (Option<BlockAddr>, Vec<TokenId>)>,
    children: BTreeMap<(Option<BlockAddr>, Vec<TokenId>), BlockAddr>,
}

impl Membership {
    fn new(block: usize) -> Self {
        Membership { block, nodes: BTreeMap::new(), children: BTreeMap::new() }
    }

    fn record(&mut self, tokens: &[TokenId], chain: &[BlockAddr]) {
        let mut parent = None;
        for (i, &addr) in chain.iter().enumerate() {
            let chunk = tokens[i * self.block..(i + 1) * self.block].to_vec();
            self.nodes.insert(addr, (parent, chunk.clone()));
            self.children.insert((parent, chunk), addr);
            parent = Some(addr);
        }
    }

    fn remove(&mut self, addr: BlockAddr) {
        if let Some(key) = self.nodes.remove(&addr) {
            self.children.remove(&key);
        }
    }

    fn lookup(&self, tokens: &[TokenId]) -> (usize, Vec<BlockAddr>) {
        let mut parent = None;
        let mut chain = Vec::new();
        let mut i = 0;
        while (i + 1) * self.block <= tokens.len() {
            let chunk = tokens[i * self.block..(i + 1) * self.block].to_vec();
            match self.children.get(&(parent, chunk)) {
                Some(&a) => {
                    chain.push(a);
                    parent = Some(a);
                    i += 1;
                }
                None => break,
            }
        }
        (i * self.block, chain)
    }

    fn covers(&self, tokens: &[TokenId]) -> bool {
        self.lookup(tokens).0 == truncate_to_blocks(tokens.len(), self.block)
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, stored: &[Vec<TokenId>]) -> Vec<TokenId> {
    let len = rng.gen_range(1..=512);
    let mut out: Vec<TokenId> = Vec::with_capacity(len);
    if !stored.is_empty() && rng.gen_bool(0.6) {
        let base = &stored[rng.gen_range(0..stored.len())];
        let keep = rng.gen_range(0..=base.len().min(len));
        out.extend_from_slice(&base[..keep]);
    }
    while out.len() < len {
        out.push(rng.gen_range(0..48));
    }
    out
}

#[test]
fn ac01_prefix_index_matches_brute_force_membership_oracle() {
    let t0 = Instant::now();
    let mut totals = [0usize; 4];
    for block in [8usize, 16] {
        // Capacity exceeds the worst-case live set (100 sequences of at most
        // 512 tokens) so allocation never triggers auto-eviction behind the
        // oracle's back.
        let mut pool = MemPool::new(InstanceId(0), block, 8192, 0);
        let mut oracle = Membership::new(block);
        let mut stored: Vec<Vec<TokenId>> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC01 + block as u64);
        let mut now = 0.0;
        for step in 0..1000 {
            now += 1.0;
            let mut op = match rng.gen_range(0..100) {
                0..=39 => 0,
                40..=69 => 1,
                70..=84 => 2,
                _ => 3,
            };
            if op == 0 && stored.len() >= 100 {
                op = 1;
            }
            if op == 2 && stored.is_empty() {
                op = 1;
            }
            match op {
                0 => {
                    let tokens = random_sequence(&mut rng, &stored);
                    let blocks = tokens.len() / block;
                    if blocks == 0 {
                        continue;
                    }
                    let floored = tokens[..blocks * block].to_vec();
                    assert!(
                        pool.free_blocks(Medium::Hbm) >= blocks,
                        "oracle assumes allocation never auto-evicts"
                    );
                    let addrs = pool.alloc(Medium::Hbm, blocks, None).unwrap();
                    pool.insert(&floored, &addrs, now).unwrap();
                    let got = pool.match_prefix(&floored, now);
                    assert_eq!(got.matched_tokens, floored.len());
                    oracle.record(&floored, &got.payloads);
                    if !stored.iter().any(|s| s == &floored) {
                        stored.push(floored);
                    }
                    totals[0] += 1;
                }
                1 => {
                    let query = random_sequence(&mut rng, &stored);
                    let (want_tokens, want_chain) = oracle.lookup(&query);
                    let got = pool.match_prefix(&query, now);
                    assert_eq!(got.matched_tokens, want_tokens, "query of {}", query.len());
                    assert_eq!(got.payloads, want_chain);
                    totals[1] += 1;
                }
                2 => {
                    let victim = stored.swap_remove(rng.gen_range(0..stored.len()));
                    let freed = pool.delete(&victim).unwrap();
                    for addr in freed {
                        oracle.remove(addr);
                    }
                    totals[2] += 1;
                }
                _ => {
                    let evicted = pool.evict(Medium::Hbm, rng.gen_range(1..=8));
                    for &addr in &evicted {
                        oracle.remove(addr);
                    }
                    // A sequence whose tail block was evicted loses its
                    // end-of-sequence slot with it and is no longer
                    // deletable by exact lookup.
                    stored.retain(|s| oracle.covers(s));
                    totals[3] += 1;
                }
            }
            if step % 100 == 99 {
                pool.verify().expect("pool invariants hold");
            }
        }
        pool.verify().expect("pool invariants hold");
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "oracle run took {secs:.2}s");
    println!(
        "[AC01] PASS — {} inserts / {} matches / {} deletes / {} evicts across block sizes 8 and 16 agreed with the brute-force oracle in {secs:.2}s",
        totals[0], totals[1], totals[2], totals[3]
    );
}

// ---------------------------------------------------------------------------
// AC2 — transfer-call accounting: discrete by-request movement costs 2L
// calls per block; block aggregation collapses that to one.

#[test]
fn ac02_block_aggregation_cuts_calls_by_twice_the_layer_count() {
    let base = Scenario::default().build();
    let par = Parallelism::default();

    let mut model = base.model.clone();
    model.num_layers = 40;
    let discrete = plan_transfer(
        2048,
        TransferMode::ByRequest,
        Layout::Discrete,
        par,
        par,
        &model,
        16,
        0.0,
        None,
    )
    .unwrap();
    let agg = plan_transfer(
        2048,
        TransferMode::ByRequestAgg,
        Layout::Aggregated,
        par,
        par,
        &model,
        16,
        0.0,
        None,
    )
    .unwrap();
    assert_eq!(discrete.n_calls, 10_240);
    assert_eq!(agg.n_calls, 128);
    assert_eq!(discrete.n_calls, agg.n_calls * 2 * 40);
    assert_eq!(discrete.bytes_total, agg.bytes_total);

    let mut rng = ChaCha8Rng::seed_from_u64(0xAC02);
    for _ in 0..200 {
        let block = [8usize, 16, 32, 64][rng.gen_range(0..4)];
        let layers = rng.gen_range(1..=80u32);
        let n = rng.gen_range(1..=4096usize);
        let blocks = n.div_ceil(block) as u64;
        let mut m = base.model.clone();
        m.num_layers = layers;
        let d = plan_transfer(
            n,
            TransferMode::ByRequest,
            Layout::Discrete,
            par,
            par,
            &m,
            block,
            0.0,
            None,
        )
        .unwrap();
        let a = plan_transfer(
            n,
            TransferMode::ByRequestAgg,
            Layout::Aggregated,
            par,
            par,
            &m,
            block,
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(d.n_calls, blocks * 2 * layers as u64, "n={n} B={block} L={layers}");
        assert_eq!(a.n_calls, blocks, "n={n} B={block}");
        assert_eq!(d.n_calls, a.n_calls * 2 * layers as u64);
        assert_eq!(d.bytes_total, a.bytes_total);
    }
    println!(
        "[AC02] PASS — 2048 tokens / B=16 / L=40: 10240 vs 128 calls (80x), and 200 random (n, B, L) cases held n_blocks*2L vs n_blocks exactly"
    );
}

// ---------------------------------------------------------------------------
// AC3 — the caching-design ladder moves compute and bytes the way it
// should: each added mechanism strictly helps the axis it targets.

fn ladder_report(design: &'static str) -> SimReport {
    let s = Scenario {
        serving: "disaggregated",
        design,
        eviction: false,
        instances: inst("p0", "prefill", 4096, 0, true) + &inst("d0", "decode", 4096, 0, false),
        workload: docqa(2.0, 6, 1, 5, 1024, [24, 24], [40, 40], 0.5),
        ..Scenario::default()
    };
    let report = run_simulation(&s.build()).unwrap();
    assert_eq!(report.summary.requests_failed, 0, "{design}: no request may fail");
    assert!(report.verify_errors.is_empty());
    report
}

#[test]
fn ac03_caching_ladder_shifts_compute_and_bytes_monotonically() {
    let reports: Vec<SimReport> =
        ["pd-basic", "pd-caching1", "pd-caching2", "pd-caching3"].map(ladder_report).into();
    let computed: Vec<u64> = reports.iter().map(|r| r.summary.prefill_tokens_computed).collect();
    let cfg = Scenario::default(); // only for ids below
    let _ = cfg;
    let p0 = InstanceId(0);
    let d0 = InstanceId(1);
    let p2d: Vec<u64> = reports
        .iter()
        .map(|r| {
            r.transfers.iter().filter(|t| t.src == p0 && t.dst == d0).map(|t| t.bytes).sum()
        })
        .collect();

    // Prefill compute: caching the prompt on P (design 1) strictly beats no
    // caching; deduplicating on D (design 2) does not change what P
    // computes; writing the decoded tail back to P (design 3) strictly
    // reduces it again.
    assert!(computed[1] < computed[0], "prompt caching must cut prefill work: {computed:?}");
    assert_eq!(computed[1], computed[2], "D-side dedup must not change P compute: {computed:?}");
    assert!(computed[3] < computed[1], "decode backflow must cut P compute again: {computed:?}");

    // P->D bytes: dedup on D (design 2) strictly cuts forwarded bytes;
    // backflow (design 3) changes only the D->P direction.
    assert!(p2d[2] < p2d[1], "D-side dedup must cut forwarded bytes: {p2d:?}");
    assert_eq!(p2d[2], p2d[3], "backflow must leave P->D bytes unchanged: {p2d:?}");

    // Under the full design the matched prefix grows turn over turn within
    // every session: the conversation tail written back after decode is
    // deeper than the prompt prefix alone.
    let mut by_session: BTreeMap<u64, Vec<(u32, usize)>> = BTreeMap::new();
    for r in &reports[3].records {
        by_session.entry(r.session).or_default().push((r.turn, r.reused));
    }
    for (session, mut turns) in by_session {
        turns.sort_unstable();
        assert!(
            turns.windows(2).all(|w| w[0].1 <= w[1].1),
            "session {session}: reuse not monotone: {turns:?}"
        );
        assert!(turns.last().unwrap().1 > turns[0].1, "session {session}: reuse never grew");
    }
    println!(
        "[AC03] PASS — prefill tokens {:?} (basic > c1 = c2 > c3), P->D bytes {:?} (c1 > c2 = c3), matched prefix monotone per session under pd-caching3",
        computed, p2d
    );
}

// ---------------------------------------------------------------------------
// AC4 — transfer-mode tradeoff: layer-wise streaming wins time-to-second-
// token when the cluster is idle; block aggregation wins completion time
// when it is busy and per-call overhead piles up.

fn mode_run(mode: &'static str, layout: &'static str, rate: f64) -> (f64, f64) {
    let s = Scenario {
        serving: "disaggregated",
        design: "pd-basic",
        mode,
        layout,
        layers: 40,
        per_call_overhead: 1e-4,
        instances: inst("p0", "prefill", 8192, 0, false) + &inst("d0", "decode", 8192, 0, false),
        workload: chat(rate, 150, 1, 0.1, [1024, 1024], [8, 8]),
        ..Scenario::default()
    };
    let report = run_simulation(&s.build()).unwrap();
    assert_eq!(report.summary.requests_failed, 0, "{mode}@{rate}: no request may fail");
    (report.summary.ttst.mean.unwrap(), report.summary.jct.mean.unwrap())
}

#[test]
fn ac04_layerwise_wins_idle_ttst_aggregated_wins_busy_jct() {
    // Saturation basis: one 1024-token prefill costs 1e-4 * 1024 = 0.1024s,
    // so a single prefill instance saturates near 9.77 req/s. 1.9 is ~0.2x
    // of that; 8.3 is ~0.85x.
    let low = 1.9;
    let high = 8.3;

    let (ttst_layer, _) = mode_run("by-layer", "discrete", low);
    let (ttst_request, _) = mode_run("by-request", "discrete", low);
    assert!(
        ttst_layer < ttst_request,
        "idle: by-layer TTST {ttst_layer} must beat by-request {ttst_request}"
    );

    let (_, jct_agg) = mode_run("by-request-agg", "aggregated", high);
    let (_, jct_layer) = mode_run("by-layer", "discrete", high);
    assert!(
        jct_agg < jct_layer,
        "busy: aggregated JCT {jct_agg} must beat by-layer {jct_layer}"
    );
    println!(
        "[AC04] PASS — idle (0.2x sat) mean TTST: by-layer {ttst_layer:.4}s < by-request {ttst_request:.4}s; busy (0.85x sat) mean JCT: aggregated {jct_agg:.4}s < by-layer {jct_layer:.4}s"
    );
}

// ---------------------------------------------------------------------------
// AC5 — the reuse cost model has a real interior threshold, and the
// simulator's decisions and latencies obey it.

#[test]
fn ac05_reuse_threshold_is_interior_and_simulator_obeys_the_oracle() {
    let base = Scenario::default().build();
    let timing = TimingModel::new(base.timing.clone());
    let block = 16usize;
    let p = 1024usize;

    // All-DRAM cached prefix of m = 16k tokens against a 1024-token prompt.
    // Two-path oracle from the raw cost constants.
    let mut decisions = Vec::new();
    for k in 1..=63usize {
        let m = block * k;
        let prefix = CachedPrefix { tokens: m, remote: false, hbm_blocks: 0, dram_blocks: k };
        let est = evaluate_reuse(
            &timing,
            &base.network,
            &base.model,
            block,
            TransferMode::ByRequestAgg,
            p,
            0,
            &prefix,
        );
        let mv = 1.3e-3 * k as f64;
        let reuse = mv + 1e-4 * (p - m) as f64 + 4e-8 * ((p - m) * m) as f64;
        let recompute = 1e-4 * p as f64;
        assert!((est.move_cost - mv).abs() < 1e-12);
        assert!((est.reuse_path - reuse).abs() < 1e-12, "m={m}");
        assert!((est.recompute_path - recompute).abs() < 1e-12);
        assert_eq!(
            est.decision == ReuseDecision::Reuse,
            reuse < recompute,
            "decision at m={m} disagrees with the two-path oracle"
        );
        decisions.push(est.decision);
    }
    assert_eq!(decisions[0], ReuseDecision::Recompute, "tiny prefixes must not be worth a swap");
    assert_eq!(*decisions.last().unwrap(), ReuseDecision::Reuse, "deep prefixes must win");
    let flips = decisions.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(flips, 1, "the threshold must be a single crossing: {decisions:?}");
    let k_star = decisions.iter().position(|d| *d == ReuseDecision::Reuse).unwrap() + 1;
    let r_star = (block * k_star) as f64 / p as f64;
    assert!(r_star > 0.0 && r_star < 1.0);

    // End to end: a second request sharing 90% of a 1024-token prompt must
    // reuse (912 of 922 shared tokens are whole blocks) and see a strictly
    // smaller TTFT than the same pair without caching.
    let sim = |caching: bool| -> SimReport {
        let s = Scenario {
            instances: inst("c0", "colocated", 4096, 4096, caching),
            ..Scenario::default()
        };
        let prompt_a: Vec<TokenId> = (0..1024).collect();
        let mut prompt_b: Vec<TokenId> = prompt_a[..922].to_vec();
        prompt_b.extend(2_000_000..2_000_102u32);
        let wl = GeneratedWorkload {
            sessions: vec![
                SessionScript { start: 0.0, requests: vec![req(0, 0, prompt_a, 1)] },
                SessionScript { start: 1.0, requests: vec![req(1, 1, prompt_b, 1)] },
            ],
        };
        run_with_workload(&s.build(), &wl).unwrap()
    };
    let cached = sim(true);
    let plain = sim(false);
    let b_cached = &cached.records[1];
    let b_plain = &plain.records[1];
    assert_eq!(b_cached.reused, 912);
    assert_eq!(b_cached.decision, "reuse");
    assert_eq!(b_plain.reused, 0);
    let expect = 1e-4 * 112.0 + 4e-8 * 112.0 * 912.0;
    assert!((b_cached.ttft.unwrap() - expect).abs() < 1e-9);
    assert!((b_plain.ttft.unwrap() - 0.1024).abs() < 1e-9);
    assert!(b_cached.ttft.unwrap() < b_plain.ttft.unwrap());
    println!(
        "[AC05] PASS — DRAM reuse threshold at r* = {r_star:.3} (single crossing, interior), and 90%-shared TTFT {:.5}s < uncached {:.5}s",
        b_cached.ttft.unwrap(),
        b_plain.ttft.unwrap()
    );
}

// ---------------------------------------------------------------------------
// AC6 — scheduler policies: prompt-tree routing reuses at least as much as
// session affinity, which beats load-only routing, and the prompt tree's
// tail latency is strictly better than blind affinity.

fn policy_run(policy: &'static str) -> (u64, f64) {
    let s = Scenario {
        serving: "disaggregated",
        design: "pd-caching2",
        policy,
        instances: inst("p0", "prefill", 4096, 0, true)
            + &inst("p1", "prefill", 4096, 0, true)
            + &inst("p2", "prefill", 4096, 0, true)
            + &inst("d0", "decode", 8192, 0, false),
        workload: docqa(6.0, 12, 2, 4, 1024, [32, 32], [32, 32], 0.3),
        ..Scenario::default()
    };
    let report = run_simulation(&s.build()).unwrap();
    assert_eq!(report.summary.requests_failed, 0, "{policy}: no request may fail");
    (report.summary.tokens_reused, report.summary.ttft.p99.unwrap())
}

#[test]
fn ac06_prompt_tree_routing_beats_affinity_beats_load_only() {
    let (ll_reused, ll_p99) = policy_run("least-load");
    let (sid_reused, sid_p99) = policy_run("session-id");
    let (pt_reused, pt_p99) = policy_run("prompt-tree");

    assert!(
        pt_reused >= sid_reused && sid_reused >= ll_reused,
        "reuse must rank prompt-tree >= session-id >= least-load: {pt_reused} / {sid_reused} / {ll_reused}"
    );
    assert!(pt_reused > ll_reused, "the spread must be real, not a three-way tie");
    assert!(
        pt_p99 < sid_p99,
        "prompt-tree P99 TTFT {pt_p99} must beat session-id {sid_p99}"
    );
    println!(
        "[AC06] PASS — tokens reused: prompt-tree {pt_reused} >= session-id {sid_reused} >= least-load {ll_reused}; P99 TTFT {pt_p99:.4}s < {sid_p99:.4}s (least-load {ll_p99:.4}s)"
    );
}

// ---------------------------------------------------------------------------
// AC7 — the end-to-end wins: context caching improves mean JCT on a
// disaggregated cluster and mean TTFT on a colocated one, same workload.

#[test]
fn ac07_context_caching_wins_end_to_end() {
    let workload = || chat(4.0, 20, 4, 0.3, [128, 256], [64, 128]);

    let disagg = |design: &'static str| -> f64 {
        let s = Scenario {
            serving: "disaggregated",
            design,
            policy: "session-id",
            instances: inst("p0", "prefill", 4096, 0, true) + &inst("d0", "decode", 4096, 0, false),
            workload: workload(),
            ..Scenario::default()
        };
        let r = run_simulation(&s.build()).unwrap();
        assert_eq!(r.summary.requests_failed, 0);
        r.summary.jct.mean.unwrap()
    };
    let jct_plain = disagg("pd-basic");
    let jct_cached = disagg("pd-caching3");
    assert!(
        jct_cached < jct_plain,
        "disaggregated: cached mean JCT {jct_cached} must beat plain {jct_plain}"
    );

    let colocated = |caching: bool| -> f64 {
        let s = Scenario {
            policy: "session-id",
            instances: inst("c0", "colocated", 4096, 4096, caching)
                + &inst("c1", "colocated", 4096, 4096, caching),
            workload: workload(),
            ..Scenario::default()
        };
        let r = run_simulation(&s.build()).unwrap();
        assert_eq!(r.summary.requests_failed, 0);
        r.summary.ttft.mean.unwrap()
    };
    let ttft_plain = colocated(false);
    let ttft_cached = colocated(true);
    assert!(
        ttft_cached < ttft_plain,
        "colocated: cached mean TTFT {ttft_cached} must beat plain {ttft_plain}"
    );
    println!(
        "[AC07] PASS — disaggregated mean JCT {jct_cached:.4}s < {jct_plain:.4}s with caching; colocated mean TTFT {ttft_cached:.4}s < {ttft_plain:.4}s"
    );
}

// ---------------------------------------------------------------------------
// AC8 — failure of a prefill instance mid-flight: peers reclaim every block
// allocated on its behalf, nothing leaks, and routing stops at detection.

#[test]
fn ac08_instance_failure_reclaims_peer_blocks_and_stops_routing() {
    // Slow single-communicator links and one-request prefill batches keep a
    // deep backlog of in-flight P->D transfers when p0 dies at t=1.0.
    let s = Scenario {
        serving: "disaggregated",
        design: "pd-basic",
        per_call_overhead: 4e-3,
        comms: 1,
        max_batch_tokens: 600,
        instances: inst("p0", "prefill", 4096, 0, false)
            + &inst("p1", "prefill", 4096, 0, false)
            + &inst("d0", "decode", 8192, 0, false),
        workload: chat(30.0, 80, 1, 0.1, [512, 512], [8, 8]),
        tail: "[[failures]]\ntime = 1.0\ninstance = \"p0\"\n".into(),
        ..Scenario::default()
    };
    let cfg = s.build();
    let report = run_simulation(&cfg).unwrap();
    let p0 = cfg.instance_id("p0").unwrap();

    assert_eq!(report.failures.len(), 1);
    let failure = &report.failures[0];
    assert_eq!(failure.instance, p0);
    assert!(
        failure.detected_at > 1.0 && failure.detected_at < 1.2,
        "heartbeat detection should land shortly after injection, got {}",
        failure.detected_at
    );

    let reclaimed: usize = failure.cleanup.freed_on_peers.values().sum();
    assert!(reclaimed >= 10, "expected a deep backlog, reclaimed only {reclaimed} peer blocks");

    // Conservation on the survivors: nothing pinned, nothing allocated that
    // the index does not account for, and the pools' own invariants hold.
    assert!(report.verify_errors.is_empty(), "{:?}", report.verify_errors);
    for audit in report.audits.iter().filter(|a| a.instance != p0) {
        assert_eq!(audit.pinned, 0, "{audit:?}");
        assert_eq!(audit.hbm_allocated + audit.dram_allocated, audit.indexed, "{audit:?}");
    }

    // Every request the failure doomed is accounted for, and none routed to
    // the dead instance once detection fired.
    assert!(report.summary.requests_failed > 0);
    assert_eq!(
        report.summary.requests_done + report.summary.requests_failed,
        report.summary.requests_total
    );
    let arrivals: BTreeMap<RequestId, f64> =
        report.records.iter().map(|r| (r.request, r.arrival)).collect();
    for route in report.routing.iter().filter(|r| r.chosen == p0) {
        assert!(
            arrivals[&route.request] < failure.detected_at,
            "request {:?} routed to the dead instance after detection",
            route.request
        );
    }
    assert!(
        report
            .records
            .iter()
            .any(|r| r.arrival > failure.detected_at && r.status == RequestStatus::Done),
        "the surviving prefill instance must keep serving"
    );
    println!(
        "[AC08] PASS — p0 died at t=1.0, detected at {:.3}s; {reclaimed} on-behalf blocks reclaimed on peers, {} requests failed / {} done, zero leaks on survivors",
        failure.detected_at, report.summary.requests_failed, report.summary.requests_done
    );
}

// ---------------------------------------------------------------------------
// AC9 — determinism: one seed, two runs, byte-identical CSVs, on a config
// that exercises failures, backflow, layer-wise transfers and tree routing.

#[test]
fn ac09_same_seed_same_bytes() {
    let scenario = || Scenario {
        serving: "disaggregated",
        design: "pd-caching3",
        mode: "by-layer",
        layout: "discrete",
        policy: "prompt-tree",
        instances: inst("p0", "prefill", 4096, 0, true)
            + &inst("p1", "prefill", 4096, 0, true)
            + &inst("d0", "decode", 8192, 0, false),
        workload: docqa(6.0, 8, 2, 3, 512, [32, 64], [16, 32], 0.2),
        tail: "[[failures]]\ntime = 2.0\ninstance = \"p1\"\n".into(),
        ..Scenario::default()
    };
    let first = run_simulation(&scenario().build()).unwrap();
    let second = run_simulation(&scenario().build()).unwrap();
    assert_eq!(first.summary, second.summary);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    first.write_csvs(dir_a.path()).unwrap();
    second.write_csvs(dir_b.path()).unwrap();
    let mut bytes = 0usize;
    for name in ["requests.csv", "transfers.csv", "routing.csv", "summary.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between identically seeded runs");
        bytes += a.len();
    }
    println!(
        "[AC09] PASS — two seed-42 runs over a failure-injecting prompt-tree scenario produced byte-identical CSVs ({bytes} bytes compared)"
    );
}

// ---------------------------------------------------------------------------
// AC10 — index and allocator speed: desk-scale operations stay in the
// microsecond-to-millisecond range and the allocator scales linearly.

fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    (sxy * sxy) / (sxx * syy)
}

#[test]
fn ac10_index_is_fast_and_allocator_scales_linearly() {
    // Insert-then-match of a 4096-token sequence, best of five fresh pools.
    let mut best_insert = f64::INFINITY;
    let mut best_match = f64::INFINITY;
    for _ in 0..5 {
        let mut pool = MemPool::new(InstanceId(0), 16, 512, 0);
        let tokens: Vec<TokenId> = (0..4096u32).map(|i| i.wrapping_mul(2654435761) >> 8).collect();
        let addrs = pool.alloc(Medium::Hbm, 256, None).unwrap();
        let t0 = Instant::now();
        pool.insert(&tokens, &addrs, 0.0).unwrap();
        let insert = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let got = pool.match_prefix(&tokens, 1.0);
        let matched = t1.elapsed().as_secs_f64();
        assert_eq!(got.matched_tokens, 4096);
        best_insert = best_insert.min(insert);
        best_match = best_match.min(matched);
    }
    assert!(
        best_insert + best_match < 0.010,
        "4096-token insert {best_insert}s + match {best_match}s must stay under 10ms"
    );

    // Allocation cost over three orders of magnitude, best of 16 per size.
    let mut pool = MemPool::new(InstanceId(0), 16, 1 << 14, 0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for exp in 4..=14u32 {
        let n = 1usize << exp;
        let mut best = f64::INFINITY;
        for _ in 0..16 {
            let t0 = Instant::now();
            let addrs = pool.alloc(Medium::Hbm, n, None).unwrap();
            pool.free(&addrs).unwrap();
            best = best.min(t0.elapsed().as_secs_f64());
        }
        xs.push(n as f64);
        ys.push(best);
    }
    let r2 = linear_r2(&xs, &ys);
    assert!(r2 > 0.99, "alloc/free cost must be linear in block count, R^2 = {r2:.4}");
    println!(
        "[AC10] PASS — 4096-token insert+match in {:.3}ms, alloc/free linear over 2^4..2^14 blocks with R^2 = {r2:.4}",
        (best_insert + best_match) * 1e3
    );
}
