//! Per-request records, latency aggregation, and CSV emission.
//!
//! Latencies are durations relative to each request's arrival: `ttft` is
//! prefill completion (the first token), `ttst` the first decode step
//! completion (the second token), `jct` the last. `tpot` is
//! `(jct − ttft) / (gen_len − 1)` and is left empty for single-token
//! requests. P99 is the nearest-rank percentile (no interpolation) so that
//! reported numbers are always observed values. Floats are written with
//! Rust's shortest-roundtrip formatting, which keeps outputs byte-stable
//! across runs.

use std::io::Write;
use std::path::Path;

use crate::config::{SchedulerPolicy, TransferMode};
use crate::types::{InstanceId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestStatus {
    Done,
    Failed,
}

impl std::fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RequestStatus::Done => write!(f, "done"),
            RequestStatus::Failed => write!(f, "failed"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RequestRecord {
    pub request: RequestId,
    pub session: u64,
    pub turn: u32,
    pub arrival: f64,
    pub prompt_tokens: usize,
    pub gen_len: usize,
    pub ttft: Option<f64>,
    pub ttst: Option<f64>,
    pub jct: Option<f64>,
    pub prefill_computed: usize,
    pub reused: usize,
    pub bytes_transferred: u64,
    /// Cost-model outcome for the matched prefix: "reuse" or "recompute".
    pub decision: &'static str,
    pub status: RequestStatus,
}

impl RequestRecord {
    pub fn tpot(&self) -> Option<f64> {
        match (self.ttft, self.jct) {
            (Some(t), Some(j)) if self.gen_len > 1 => Some((j - t) / (self.gen_len - 1) as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferRecord {
    pub request: RequestId,
    pub mode: TransferMode,
    pub n_calls: u64,
    pub bytes: u64,
    pub start: f64,
    pub end: f64,
    pub src: InstanceId,
    pub dst: InstanceId,
}

#[derive(Debug, Clone)]
pub struct RoutingRecord {
    pub request: RequestId,
    pub policy: SchedulerPolicy,
    pub chosen: InstanceId,
    pub matched_len: usize,
    pub alternatives: u32,
}

/// Mean and nearest-rank P99 of one latency family.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Agg {
    pub mean: Option<f64>,
    pub p99: Option<f64>,
}

fn aggregate(mut values: Vec<f64>) -> Agg {
    if values.is_empty() {
        return Agg::default();
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let rank = ((0.99 * values.len() as f64).ceil() as usize).max(1);
    Agg { mean: Some(mean), p99: Some(values[rank - 1]) }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub requests_total: usize,
    pub requests_done: usize,
    pub requests_failed: usize,
    pub ttft: Agg,
    pub ttst: Agg,
    pub jct: Agg,
    pub tpot: Agg,
    /// Reused prompt tokens over total prompt tokens, completed requests.
    pub reuse_ratio: f64,
    pub tokens_reused: u64,
    pub prefill_tokens_computed: u64,
    pub transfer_calls: u64,
    pub transfer_bytes: u64,
    /// Completion time of the last finished request.
    pub makespan: f64,
}

pub fn summarize(records: &[RequestRecord], transfers: &[TransferRecord]) -> Summary {
    let done: Vec<&RequestRecord> =
        records.iter().filter(|r| r.status == RequestStatus::Done).collect();
    let pick = |f: fn(&RequestRecord) -> Option<f64>| -> Vec<f64> {
        done.iter().filter_map(|r| f(r)).collect()
    };
    let prompt_total: u64 = done.iter().map(|r| r.prompt_tokens as u64).sum();
    let reused: u64 = done.iter().map(|r| r.reused as u64).sum();
    Summary {
        requests_total: records.len(),
        requests_done: done.len(),
        requests_failed: records.len() - done.len(),
        ttft: aggregate(pick(|r| r.ttft)),
        ttst: aggregate(pick(|r| r.ttst)),
        jct: aggregate(pick(|r| r.jct)),
        tpot: aggregate(pick(|r| r.tpot())),
        reuse_ratio: if prompt_total > 0 { reused as f64 / prompt_total as f64 } else { 0.0 },
        tokens_reused: reused,
        prefill_tokens_computed: done.iter().map(|r| r.prefill_computed as u64).sum(),
        transfer_calls: transfers.iter().map(|t| t.n_calls).sum(),
        transfer_bytes: transfers.iter().map(|t| t.bytes).sum(),
        makespan: done
            .iter()
            .map(|r| r.arrival + r.jct.unwrap_or(0.0))
            .fold(0.0, f64::max),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub const REQUESTS_HEADER: &[&str] = &[
    "request_id",
    "session_id",
    "turn",
    "arrival",
    "ttft",
    "jct",
    "tpot",
    "prefill_tokens_computed",
    "tokens_reused",
    "bytes_transferred",
    "decision",
    "prompt_tokens",
    "gen_len",
    "ttst",
    "status",
];

pub fn write_requests_csv<W: Write>(out: W, records: &[RequestRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REQUESTS_HEADER)?;
    for r in records {
        w.write_record(&[
            r.request.0.to_string(),
            r.session.to_string(),
            r.turn.to_string(),
            format!("{}", r.arrival),
            opt(r.ttft),
            opt(r.jct),
            opt(r.tpot()),
            r.prefill_computed.to_string(),
            r.reused.to_string(),
            r.bytes_transferred.to_string(),
            r.decision.to_string(),
            r.prompt_tokens.to_string(),
            r.gen_len.to_string(),
            opt(r.ttst),
            r.status.to_string(),
        ])?;
    }
    w.flush()
}

pub fn write_transfers_csv<W: Write>(out: W, transfers: &[TransferRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["request_id", "mode", "n_calls", "bytes", "start", "end", "src", "dst"])?;
    for t in transfers {
        w.write_record(&[
            t.request.0.to_string(),
            t.mode.to_string(),
            t.n_calls.to_string(),
            t.bytes.to_string(),
            format!("{}", t.start),
            format!("{}", t.end),
            t.src.to_string(),
            t.dst.to_string(),
        ])?;
    }
    w.flush()
}

pub fn write_routing_csv<W: Write>(out: W, rows: &[RoutingRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["request_id", "policy", "chosen_instance", "matched_len", "alternatives"])?;
    for r in rows {
        w.write_record(&[
            r.request.0.to_string(),
            r.policy.to_string(),
            r.chosen.to_string(),
            r.matched_len.to_string(),
            r.alternatives.to_string(),
        ])?;
    }
    w.flush()
}

pub const SUMMARY_HEADER: &[&str] = &[
    "requests_total",
    "requests_done",
    "requests_failed",
    "mean_ttft",
    "p99_ttft",
    "mean_ttst",
    "p99_ttst",
    "mean_jct",
    "p99_jct",
    "mean_tpot",
    "p99_tpot",
    "reuse_ratio",
    "tokens_reused",
    "prefill_tokens_computed",
    "transfer_calls",
    "transfer_bytes",
    "makespan",
];

pub fn summary_row(s: &Summary) -> Vec<String> {
    vec![
        s.requests_total.to_string(),
        s.requests_done.to_string(),
        s.requests_failed.to_string(),
        opt(s.ttft.mean),
        opt(s.ttft.p99),
        opt(s.ttst.mean),
        opt(s.ttst.p99),
        opt(s.jct.mean),
        opt(s.jct.p99),
        opt(s.tpot.mean),
        opt(s.tpot.p99),
        format!("{}", s.reuse_ratio),
        s.tokens_reused.to_string(),
        s.prefill_tokens_computed.to_string(),
        s.transfer_calls.to_string(),
        s.transfer_bytes.to_string(),
        format!("{}", s.makespan),
    ]
}

pub fn write_summary_csv<W: Write>(out: W, s: &Summary) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    w.write_record(summary_row(s))?;
    w.flush()
}

/// Write the four CSVs into `dir`, creating it if needed.
pub fn write_output_dir(
    dir: &Path,
    records: &[RequestRecord],
    transfers: &[TransferRecord],
    routing: &[RoutingRecord],
    summary: &Summary,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_requests_csv(std::fs::File::create(dir.join("requests.csv"))?, records)?;
    write_transfers_csv(std::fs::File::create(dir.join("transfers.csv"))?, transfers)?;
    write_routing_csv(std::fs::File::create(dir.join("routing.csv"))?, routing)?;
    write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?, summary)
}
