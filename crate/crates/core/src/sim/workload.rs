//! Workload generation: everything random is sampled here, ahead of time.
//!
//! The generator turns a [`WorkloadConfig`] into fully resolved sessions:
//! each turn's complete prompt (conversation so far plus new user text) and
//! the exact token ids the response will consist of. Response tokens are
//! pre-sampled so that a later turn's prompt — which embeds them — is
//! reproducible and identical across serving architectures, caching designs
//! and scheduler policies under one seed.
//!
//! Three synthetic families approximate common shapes: `chat` (uniform
//! medium prompts and generations), `docqa` (a long per-session document
//! prefix, short questions and answers, five turns), and `agent` (one
//! globally shared document prefix with long generations). The distribution
//! parameters are approximations; all of them are config knobs. A `trace`
//! workload instead reads line-delimited JSON records of the form
//! `{"session_id": 7, "turn": 1, "prompt_tokens": [...], "gen_len": 12}`;
//! sessions are renumbered densely and arrival times are always
//! synthesized.
//!
//! `share_ratio = r` duplicates the generated session set r times in total:
//! fresh session ids, byte-identical token content, interleaved into the
//! same Poisson arrival process. Session initiations are Poisson such that
//! the long-run request rate is `request_rate` per first-phase instance;
//! turn k+1 arrives an exponential think time after turn k's response.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;

use crate::config::{ServingMode, SimConfig, WorkloadKind};
use crate::types::{InstanceKind, Request, RequestId, SimTime, TokenId};

use super::SimError;

/// One session's fully resolved request sequence.
#[derive(Debug, Clone)]
pub struct SessionScript {
    /// Arrival time of the first turn.
    pub start: SimTime,
    /// Requests in turn order; `requests[k].think_time` is the client gap
    /// between turn k's response and turn k+1's arrival.
    pub requests: Vec<Request>,
}

#[derive(Debug, Clone)]
pub struct GeneratedWorkload {
    pub sessions: Vec<SessionScript>,
}

impl GeneratedWorkload {
    pub fn total_requests(&self) -> usize {
        self.sessions.iter().map(|s| s.requests.len()).sum()
    }
}

#[derive(Debug, Deserialize)]
struct TraceRecord {
    session_id: u64,
    turn: u32,
    prompt_tokens: Vec<TokenId>,
    gen_len: usize,
}

/// Turn content before scheduling: full prompt plus response tokens.
struct TurnContent {
    prompt: Vec<TokenId>,
    gen: Vec<TokenId>,
}

pub fn generate(cfg: &SimConfig) -> Result<GeneratedWorkload, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = &cfg.workload;

    // Phase 1: content. One entry per base session, turns resolved.
    let base: Vec<Vec<TurnContent>> = match w.kind {
        WorkloadKind::Trace => load_trace(cfg, &mut rng)?,
        _ => {
            let global_doc: Vec<TokenId> = if w.kind == WorkloadKind::Agent {
                sample_tokens(&mut rng, w.doc_prefix_tokens(), w.vocab_size)
            } else {
                Vec::new()
            };
            (0..w.sessions)
                .map(|_| synth_session(&mut rng, w, &global_doc))
                .collect()
        }
    };
    for sess in &base {
        for t in sess {
            let total = t.prompt.len() + t.gen.len();
            if total > cfg.model.context_window {
                return Err(SimError::PromptTooLong {
                    len: total,
                    window: cfg.model.context_window,
                });
            }
        }
    }

    // Phase 2: duplication. The copies of base session i occupy final slots
    // i·r .. (i+1)·r, so duplicates interleave in the arrival order.
    let r = w.share_ratio as usize;
    let mut sessions: Vec<Vec<TurnContent>> = Vec::with_capacity(base.len() * r);
    for sess in base {
        for _ in 1..r {
            sessions.push(sess.iter().map(clone_turn).collect());
        }
        sessions.push(sess);
    }

    // Phase 3: scheduling. Poisson session initiations at a rate that keeps
    // the long-run request rate at `request_rate` per first-phase instance,
    // exponential think time between turns.
    let first_phase_kind = match cfg.serving_mode {
        ServingMode::Colocated => InstanceKind::Colocated,
        ServingMode::Disaggregated => InstanceKind::Prefill,
    };
    let n_serving = cfg.instances.iter().filter(|i| i.kind == first_phase_kind).count().max(1);
    let total_turns: usize = sessions.iter().map(|s| s.len()).sum();
    let mean_turns = total_turns as f64 / sessions.len().max(1) as f64;
    let session_rate = w.request_rate * n_serving as f64 / mean_turns.max(1.0);
    let gap_dist = Exp::new(session_rate).expect("request_rate validated positive");
    let think_dist =
        (w.think_time_mean > 0.0).then(|| Exp::new(1.0 / w.think_time_mean).unwrap());

    let mut out = Vec::with_capacity(sessions.len());
    let mut next_id = 0u32;
    let mut t = 0.0f64;
    for (si, turns) in sessions.into_iter().enumerate() {
        let start = t;
        t += gap_dist.sample(&mut rng);
        let n = turns.len();
        let requests = turns
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let think = if k + 1 < n {
                    think_dist.as_ref().map_or(0.0, |d| d.sample(&mut rng))
                } else {
                    0.0
                };
                let id = RequestId(next_id);
                next_id += 1;
                Request {
                    id,
                    session: si as u64,
                    turn: k as u32 + 1,
                    gen_len: c.gen.len(),
                    prompt: c.prompt,
                    response: c.gen,
                    think_time: think,
                }
            })
            .collect();
        out.push(SessionScript { start, requests });
    }
    Ok(GeneratedWorkload { sessions: out })
}

fn clone_turn(t: &TurnContent) -> TurnContent {
    TurnContent { prompt: t.prompt.clone(), gen: t.gen.clone() }
}

fn sample_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn sample_len(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    rng.gen_range(range[0]..=range[1])
}

fn synth_session(
    rng: &mut ChaCha8Rng,
    w: &crate::config::WorkloadConfig,
    global_doc: &[TokenId],
) -> Vec<TurnContent> {
    let mut conversation: Vec<TokenId> = match w.kind {
        WorkloadKind::Docqa => sample_tokens(rng, w.doc_prefix_tokens(), w.vocab_size),
        WorkloadKind::Agent => global_doc.to_vec(),
        _ => Vec::new(),
    };
    let mut turns = Vec::with_capacity(w.turns() as usize);
    for _ in 0..w.turns() {
        let q_len = sample_len(rng, w.question_tokens());
        let q = sample_tokens(rng, q_len, w.vocab_size);
        let g_len = sample_len(rng, w.gen_tokens());
        let gen = sample_tokens(rng, g_len, w.vocab_size);
        conversation.extend_from_slice(&q);
        let prompt = conversation.clone();
        conversation.extend_from_slice(&gen);
        turns.push(TurnContent { prompt, gen });
    }
    turns
}

fn load_trace(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<TurnContent>>, SimError> {
    let path = cfg
        .workload
        .trace_path
        .as_ref()
        .expect("validated: trace workloads carry a path");
    let text = std::fs::read_to_string(path)
        .map_err(|source| SimError::TraceIo { path: path.clone(), source })?;
    let mut by_session: BTreeMap<u64, Vec<(u32, TraceRecord)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(line).map_err(|e| SimError::TraceParse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if rec.prompt_tokens.is_empty() || rec.gen_len == 0 {
            return Err(SimError::TraceParse {
                path: path.clone(),
                line: i + 1,
                message: "prompt_tokens must be non-empty and gen_len >= 1".into(),
            });
        }
        by_session.entry(rec.session_id).or_default().push((rec.turn, rec));
    }
    let mut out = Vec::with_capacity(by_session.len());
    for (_, mut turns) in by_session {
        turns.sort_by_key(|(turn, _)| *turn);
        out.push(
            turns
                .into_iter()
                .map(|(_, rec)| TurnContent {
                    prompt: rec.prompt_tokens,
                    gen: sample_tokens(rng, rec.gen_len, cfg.workload.vocab_size),
                })
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;

    fn cfg(extra: &str) -> SimConfig {
        let text = format!(
            r#"
serving_mode = "disaggregated"
[[instances]]
id = "p0"
kind = "prefill"
hbm_blocks = 4096
[[instances]]
id = "d0"
kind = "decode"
hbm_blocks = 4096
{extra}
"#
        );
        SimConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn docqa_sessions_share_their_document_prefix_across_turns() {
        let c = cfg("[workload]\nkind = \"docqa\"\nsessions = 1\n");
        let w = generate(&c).unwrap();
        assert_eq!(w.sessions.len(), 1);
        let reqs = &w.sessions[0].requests;
        assert_eq!(reqs.len(), 5, "docqa defaults to five turns");
        let doc = &reqs[0].prompt[..1024];
        for r in reqs {
            assert!(r.prompt.len() >= 1024);
            assert_eq!(&r.prompt[..1024], doc, "turn {} lost the document", r.turn);
        }
        // Each turn's prompt extends the previous conversation exactly.
        for k in 1..reqs.len() {
            let prev_conv_len = reqs[k - 1].prompt.len() + reqs[k - 1].response.len();
            assert_eq!(
                &reqs[k].prompt[..prev_conv_len],
                &[reqs[k - 1].prompt.clone(), reqs[k - 1].response.clone()].concat()[..],
            );
            assert!(reqs[k].prompt.len() > prev_conv_len, "new question appended");
        }
    }

    #[test]
    fn agent_sessions_share_one_global_document() {
        let c = cfg("[workload]\nkind = \"agent\"\nsessions = 3\n");
        let w = generate(&c).unwrap();
        let doc = w.sessions[0].requests[0].prompt[..1024].to_vec();
        for s in &w.sessions {
            assert_eq!(&s.requests[0].prompt[..1024], &doc[..]);
        }
    }

    #[test]
    fn share_ratio_duplicates_content_with_fresh_session_ids() {
        let c = cfg("[workload]\nkind = \"docqa\"\nsessions = 2\nshare_ratio = 2\n");
        let w = generate(&c).unwrap();
        assert_eq!(w.sessions.len(), 4);
        let total: usize = w.total_requests();
        assert_eq!(total, 2 * 2 * 5, "exactly 2x requests");
        // Duplicates interleave: sessions (0,1) share base 0; (2,3) share base 1.
        for pair in [(0usize, 1usize), (2, 3)] {
            let (a, b) = (&w.sessions[pair.0], &w.sessions[pair.1]);
            assert_eq!(a.requests.len(), b.requests.len());
            for (ra, rb) in a.requests.iter().zip(&b.requests) {
                assert_eq!(ra.prompt, rb.prompt);
                assert_eq!(ra.response, rb.response);
                assert_ne!(ra.session, rb.session);
            }
        }
        let ids: Vec<u64> = w.sessions.iter().map(|s| s.requests[0].session).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn first_session_arrives_at_time_zero() {
        let c = cfg("[workload]\nkind = \"chat\"\nsessions = 3\n");
        let w = generate(&c).unwrap();
        assert_eq!(w.sessions[0].start, 0.0);
        for pair in w.sessions.windows(2) {
            assert!(pair[0].start < pair[1].start, "initiations strictly ordered");
        }
    }

    #[test]
    fn same_seed_reproduces_the_workload_exactly() {
        let c = cfg("[workload]\nkind = \"chat\"\nsessions = 4\nthink_time_mean = 2.0\n");
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.sessions.len(), b.sessions.len());
        for (sa, sb) in a.sessions.iter().zip(&b.sessions) {
            assert_eq!(sa.start, sb.start);
            for (ra, rb) in sa.requests.iter().zip(&sb.requests) {
                assert_eq!(ra.prompt, rb.prompt);
                assert_eq!(ra.response, rb.response);
                assert_eq!(ra.think_time, rb.think_time);
            }
        }
    }

    #[test]
    fn trace_workload_groups_and_orders_by_session_and_turn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"session_id\": 9, \"turn\": 2, \"prompt_tokens\": [1,2,3,4], \"gen_len\": 2}\n",
                "{\"session_id\": 9, \"turn\": 1, \"prompt_tokens\": [1,2], \"gen_len\": 1}\n",
                "\n",
                "{\"session_id\": 3, \"turn\": 1, \"prompt_tokens\": [7], \"gen_len\": 3}\n",
            ),
        )
        .unwrap();
        let c = cfg(&format!(
            "[workload]\nkind = \"trace\"\ntrace_path = {:?}\n",
            path.to_str().unwrap()
        ));
        let w = generate(&c).unwrap();
        assert_eq!(w.sessions.len(), 2);
        // Session ids are renumbered densely in trace-id order (3 then 9).
        assert_eq!(w.sessions[0].requests[0].prompt, vec![7]);
        assert_eq!(w.sessions[1].requests.len(), 2);
        assert_eq!(w.sessions[1].requests[0].prompt, vec![1, 2]);
        assert_eq!(w.sessions[1].requests[1].prompt, vec![1, 2, 3, 4]);
        assert_eq!(w.sessions[1].requests[1].turn, 2);
        assert_eq!(w.sessions[1].requests[0].response.len(), 1);
    }

    #[test]
    fn malformed_trace_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"session_id\": 1}\n").unwrap();
        let c = cfg(&format!(
            "[workload]\nkind = \"trace\"\ntrace_path = {:?}\n",
            path.to_str().unwrap()
        ));
        let err = generate(&c).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn oversized_prompts_are_rejected_up_front() {
        let c = cfg(
            "[model]\ncontext_window = 256\n[workload]\nkind = \"docqa\"\nsessions = 1\n",
        );
        let err = generate(&c).unwrap_err();
        assert!(matches!(err, SimError::PromptTooLong { .. }), "{err}");
    }
}
