//! Run configuration: the TOML schema, per-field defaults, and validation.
//!
//! Everything a run needs is in one [`SimConfig`]: model shape, block/layout
//! choices, timing and network coefficients, the instance roster, scheduler
//! policy, workload description and output location. `SimConfig::load`
//! reports parse errors with the file path and line, and `validate` rejects
//! inconsistent values with a message naming the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{InstanceId, InstanceKind, Parallelism};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How KV blocks are laid out in device memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One storage block per (layer, K/V) pair: 2·L storage blocks per B
    /// tokens. Required by by-layer and by-request transfers.
    Discrete,
    /// One block per B tokens holding every layer's K and V contiguously.
    /// Required by aggregated by-request transfers.
    Aggregated,
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Layout::Discrete => write!(f, "discrete"),
            Layout::Aggregated => write!(f, "aggregated"),
        }
    }
}

/// When KV moves from prefill to decode, and at what granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Chunks stream out as each layer finishes, overlapping prefill compute.
    ByLayer,
    /// The whole request's KV moves after prefill completes, one call per
    /// discrete storage block.
    ByRequest,
    /// Like by-request but over aggregated blocks: one call per token block.
    ByRequestAgg,
}

impl std::fmt::Display for TransferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransferMode::ByLayer => write!(f, "by-layer"),
            TransferMode::ByRequest => write!(f, "by-request"),
            TransferMode::ByRequestAgg => write!(f, "by-request-agg"),
        }
    }
}

/// Where historical KV is kept in a disaggregated deployment.
///
/// Each level strictly extends the previous one:
/// basic keeps nothing; caching-1 indexes prompt KV at the prefill side;
/// caching-2 additionally indexes at the decode side and transfers
/// incrementally; caching-3 additionally flows decode-produced KV back to
/// the prefill side when a request retires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CachingDesign {
    PdBasic,
    PdCaching1,
    PdCaching2,
    PdCaching3,
}

impl std::fmt::Display for CachingDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CachingDesign::PdBasic => "pd-basic",
            CachingDesign::PdCaching1 => "pd-caching-1",
            CachingDesign::PdCaching2 => "pd-caching-2",
            CachingDesign::PdCaching3 => "pd-caching-3",
        };
        write!(f, "{s}")
    }
}

/// Global-scheduler routing policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerPolicy {
    /// Fewest queued-plus-running tokens wins.
    LeastLoad,
    /// Stable hash of the session id over live instances of the kind.
    SessionId,
    /// Longest global prompt-tree prefix wins; ties fall back to load, then
    /// lowest instance id.
    PromptTree,
}

impl std::fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchedulerPolicy::LeastLoad => "least-load",
            SchedulerPolicy::SessionId => "session-id",
            SchedulerPolicy::PromptTree => "prompt-tree",
        };
        write!(f, "{s}")
    }
}

/// Architecture a run serves requests with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServingMode {
    /// Every request prefills and decodes on one colocated instance.
    Colocated,
    /// Every request prefills on a prefill-only instance, then its KV moves
    /// to a decode-only instance.
    Disaggregated,
}

/// Model shape; determines KV byte volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_num_layers")]
    pub num_layers: u32,
    #[serde(default = "d_hidden_size")]
    pub hidden_size: u32,
    /// K+V bytes one token contributes per layer. Defaults to 2·H·2
    /// (K and V, fp16).
    #[serde(default)]
    pub kv_bytes_per_token_per_layer: Option<u64>,
    #[serde(default = "d_context_window")]
    pub context_window: usize,
}

fn d_num_layers() -> u32 {
    40
}
fn d_hidden_size() -> u32 {
    5120
}
fn d_context_window() -> usize {
    4096
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: d_num_layers(),
            hidden_size: d_hidden_size(),
            kv_bytes_per_token_per_layer: None,
            context_window: d_context_window(),
        }
    }
}

impl ModelConfig {
    pub fn kv_bytes_per_token_per_layer(&self) -> u64 {
        self.kv_bytes_per_token_per_layer
            .unwrap_or(2 * self.hidden_size as u64 * 2)
    }

    /// Total KV bytes for `n` tokens across all layers.
    pub fn kv_bytes_for_tokens(&self, n: usize) -> u64 {
        n as u64 * self.num_layers as u64 * self.kv_bytes_per_token_per_layer()
    }
}

/// Block size and layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    #[serde(default = "d_block_size")]
    pub block_size: usize,
    #[serde(default = "d_layout")]
    pub layout: Layout,
}

fn d_block_size() -> usize {
    16
}
fn d_layout() -> Layout {
    Layout::Discrete
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig { block_size: d_block_size(), layout: d_layout() }
    }
}

impl BlockConfig {
    /// Bytes one token block (B tokens, all layers, K and V) occupies.
    pub fn block_bytes(&self, model: &ModelConfig) -> u64 {
        model.kv_bytes_for_tokens(self.block_size)
    }
}

/// Coefficients of the engine timing model, in simulated seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    /// Per new token: prefill_cost = base·n_new + ctx·n_new·n_context.
    #[serde(default = "d_prefill_base")]
    pub prefill_base_per_token: f64,
    #[serde(default = "d_prefill_ctx")]
    pub prefill_context_factor: f64,
    /// Per decode step: decode_step_cost = base + per_request·batch_size.
    #[serde(default = "d_decode_base")]
    pub decode_step_base: f64,
    #[serde(default = "d_decode_per_req")]
    pub decode_step_per_request: f64,
    /// One block HBM<->DRAM, either direction.
    #[serde(default = "d_swap_cost")]
    pub swap_cost_per_block: f64,
}

fn d_prefill_base() -> f64 {
    1e-4
}
fn d_prefill_ctx() -> f64 {
    4e-8
}
fn d_decode_base() -> f64 {
    5e-3
}
fn d_decode_per_req() -> f64 {
    2.5e-4
}
fn d_swap_cost() -> f64 {
    1.3e-3
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            prefill_base_per_token: d_prefill_base(),
            prefill_context_factor: d_prefill_ctx(),
            decode_step_base: d_decode_base(),
            decode_step_per_request: d_decode_per_req(),
            swap_cost_per_block: d_swap_cost(),
        }
    }
}

/// Network model parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Fixed cost per network API call (seconds).
    #[serde(default = "d_per_call")]
    pub per_call_overhead: f64,
    /// HBM-to-HBM path (bytes/second).
    #[serde(default = "d_hbm_bw")]
    pub hbm_bandwidth: f64,
    /// Any path touching DRAM on either end (bytes/second).
    #[serde(default = "d_dram_bw")]
    pub dram_bandwidth: f64,
    /// Parallel FIFO channels per ordered instance pair.
    #[serde(default = "d_comms")]
    pub communicators_per_pair: u32,
}

fn d_per_call() -> f64 {
    5e-6
}
fn d_hbm_bw() -> f64 {
    50e9
}
fn d_dram_bw() -> f64 {
    10e9
}
fn d_comms() -> u32 {
    1
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            per_call_overhead: d_per_call(),
            hbm_bandwidth: d_hbm_bw(),
            dram_bandwidth: d_dram_bw(),
            communicators_per_pair: d_comms(),
        }
    }
}

/// Batch admission and memory-pressure policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "d_max_batch_tokens")]
    pub max_batch_tokens: usize,
    #[serde(default = "d_max_batch_size")]
    pub max_batch_size: usize,
    /// When false, allocation under pressure fails instead of evicting.
    #[serde(default = "d_true")]
    pub eviction_enabled: bool,
    /// Try swapping unreferenced historical blocks to DRAM before evicting.
    #[serde(default = "d_true")]
    pub swap_before_evict: bool,
}

fn d_max_batch_tokens() -> usize {
    8192
}
fn d_max_batch_size() -> usize {
    16
}
fn d_true() -> bool {
    true
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_batch_tokens: d_max_batch_tokens(),
            max_batch_size: d_max_batch_size(),
            eviction_enabled: true,
            swap_before_evict: true,
        }
    }
}

/// Scheduler policy and prompt-tree entry lifetime.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "d_policy")]
    pub policy: SchedulerPolicy,
    /// Seconds a global prompt-tree entry stays routable.
    #[serde(default = "d_ttl")]
    pub tree_ttl: f64,
}

fn d_policy() -> SchedulerPolicy {
    SchedulerPolicy::PromptTree
}
fn d_ttl() -> f64 {
    300.0
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { policy: d_policy(), tree_ttl: d_ttl() }
    }
}

/// Heartbeat cadence and failure detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "d_heartbeat")]
    pub heartbeat_interval: f64,
    /// An instance silent for longer than this is declared failed.
    #[serde(default = "d_failure_timeout")]
    pub failure_timeout: f64,
}

fn d_heartbeat() -> f64 {
    1.0
}
fn d_failure_timeout() -> f64 {
    3.0
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { heartbeat_interval: d_heartbeat(), failure_timeout: d_failure_timeout() }
    }
}

/// One instance in the roster.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub id: String,
    pub kind: InstanceKind,
    #[serde(default = "d_one")]
    pub tp: u32,
    #[serde(default = "d_one")]
    pub pp: u32,
    /// HBM capacity in token blocks.
    pub hbm_blocks: u32,
    /// DRAM (second-tier) capacity in token blocks.
    #[serde(default)]
    pub dram_blocks: u32,
    /// Colocated instances: keep historical KV after requests retire.
    /// Ignored for prefill/decode instances (the caching design governs).
    #[serde(default = "d_true")]
    pub caching: bool,
}

fn d_one() -> u32 {
    1
}

impl InstanceConfig {
    pub fn parallelism(&self) -> Parallelism {
        Parallelism { tp: self.tp, pp: self.pp }
    }
}

/// Kill an instance at a point in simulated time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureInjection {
    pub time: f64,
    pub instance: String,
}

/// Built-in workload families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    /// Multi-turn conversations, uniform prompt/generation lengths.
    Chat,
    /// A long per-session document prefix followed by short QA turns.
    Docqa,
    /// A long globally shared two-shot prefix, short questions, long
    /// generations.
    Agent,
    /// Requests read from a line-delimited trace file.
    Trace,
}

impl std::fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            WorkloadKind::Chat => "chat",
            WorkloadKind::Docqa => "docqa",
            WorkloadKind::Agent => "agent",
            WorkloadKind::Trace => "trace",
        };
        write!(f, "{s}")
    }
}

/// Workload description. Length knobs default per kind; see the accessors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default = "d_workload_kind")]
    pub kind: WorkloadKind,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    /// Request arrivals per simulated second per instance.
    #[serde(default = "d_rate")]
    pub request_rate: f64,
    /// Duplicate the generated session set this many times (with fresh
    /// session ids, identical token content).
    #[serde(default = "d_one_u")]
    pub share_ratio: u32,
    #[serde(default = "d_sessions")]
    pub sessions: u32,
    #[serde(default)]
    pub turns: Option<u32>,
    /// Mean of the exponential client think time between turns.
    #[serde(default)]
    pub think_time_mean: f64,
    #[serde(default)]
    pub doc_prefix_tokens: Option<usize>,
    #[serde(default)]
    pub question_tokens: Option<[usize; 2]>,
    #[serde(default)]
    pub gen_tokens: Option<[usize; 2]>,
    #[serde(default = "d_vocab")]
    pub vocab_size: u32,
}

fn d_workload_kind() -> WorkloadKind {
    WorkloadKind::Chat
}
fn d_rate() -> f64 {
    1.0
}
fn d_one_u() -> u32 {
    1
}
fn d_sessions() -> u32 {
    16
}
fn d_vocab() -> u32 {
    32000
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            kind: d_workload_kind(),
            trace_path: None,
            request_rate: d_rate(),
            share_ratio: 1,
            sessions: d_sessions(),
            turns: None,
            think_time_mean: 0.0,
            doc_prefix_tokens: None,
            question_tokens: None,
            gen_tokens: None,
            vocab_size: d_vocab(),
        }
    }
}

impl WorkloadConfig {
    pub fn turns(&self) -> u32 {
        self.turns.unwrap_or(match self.kind {
            WorkloadKind::Chat => 4,
            WorkloadKind::Docqa => 5,
            WorkloadKind::Agent => 2,
            WorkloadKind::Trace => 1, // ignored; the trace decides
        })
    }

    /// Shared prefix length: per session for docqa, global for agent.
    pub fn doc_prefix_tokens(&self) -> usize {
        self.doc_prefix_tokens.unwrap_or(match self.kind {
            WorkloadKind::Docqa | WorkloadKind::Agent => 1024,
            _ => 0,
        })
    }

    /// New user text per turn, uniform inclusive range.
    pub fn question_tokens(&self) -> [usize; 2] {
        self.question_tokens.unwrap_or(match self.kind {
            WorkloadKind::Chat => [32, 256],
            _ => [16, 64],
        })
    }

    /// Generation length, uniform inclusive range.
    pub fn gen_tokens(&self) -> [usize; 2] {
        self.gen_tokens.unwrap_or(match self.kind {
            WorkloadKind::Chat => [32, 256],
            WorkloadKind::Agent => [128, 512],
            _ => [16, 64],
        })
    }
}

/// Output locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory the four CSVs are written into. The KVSIM_OUTPUT_DIR
    /// environment variable overrides it.
    #[serde(default = "d_out_dir")]
    pub dir: PathBuf,
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: d_out_dir() }
    }
}

/// A complete simulation run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    pub serving_mode: ServingMode,
    #[serde(default = "d_design")]
    pub caching_design: CachingDesign,
    #[serde(default = "d_mode")]
    pub transfer_mode: TransferMode,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub block: BlockConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(rename = "instances")]
    pub instances: Vec<InstanceConfig>,
    #[serde(default)]
    pub failures: Vec<FailureInjection>,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn d_design() -> CachingDesign {
    CachingDesign::PdBasic
}
fn d_mode() -> TransferMode {
    TransferMode::ByRequest
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: SimConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            // toml's Display includes the line/column span of the error.
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dense id of a roster instance by name.
    pub fn instance_id(&self, name: &str) -> Option<InstanceId> {
        self.instances
            .iter()
            .position(|i| i.id == name)
            .map(|i| InstanceId(i as u32))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(v: f64, field: &str) -> Result<(), ConfigError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{field} must be positive and finite, got {v}")))
            }
        }
        fn non_negative(v: f64, field: &str) -> Result<(), ConfigError> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!(
                    "{field} must be non-negative and finite, got {v}"
                )))
            }
        }

        if self.model.num_layers == 0 {
            return Err(ConfigError::Invalid("model.num_layers must be >= 1".into()));
        }
        if self.model.hidden_size == 0 {
            return Err(ConfigError::Invalid("model.hidden_size must be >= 1".into()));
        }
        if self.model.context_window == 0 {
            return Err(ConfigError::Invalid("model.context_window must be >= 1".into()));
        }
        if self.block.block_size == 0 {
            return Err(ConfigError::Invalid("block.block_size must be >= 1".into()));
        }

        positive(self.timing.prefill_base_per_token, "timing.prefill_base_per_token")?;
        non_negative(self.timing.prefill_context_factor, "timing.prefill_context_factor")?;
        positive(self.timing.decode_step_base, "timing.decode_step_base")?;
        non_negative(self.timing.decode_step_per_request, "timing.decode_step_per_request")?;
        non_negative(self.timing.swap_cost_per_block, "timing.swap_cost_per_block")?;
        non_negative(self.network.per_call_overhead, "network.per_call_overhead")?;
        positive(self.network.hbm_bandwidth, "network.hbm_bandwidth")?;
        positive(self.network.dram_bandwidth, "network.dram_bandwidth")?;
        if self.network.communicators_per_pair == 0 {
            return Err(ConfigError::Invalid("network.communicators_per_pair must be >= 1".into()));
        }
        if self.engine.max_batch_tokens == 0 {
            return Err(ConfigError::Invalid("engine.max_batch_tokens must be >= 1".into()));
        }
        if self.engine.max_batch_size == 0 {
            return Err(ConfigError::Invalid("engine.max_batch_size must be >= 1".into()));
        }
        positive(self.scheduler.tree_ttl, "scheduler.tree_ttl")?;
        positive(self.cluster.heartbeat_interval, "cluster.heartbeat_interval")?;
        positive(self.cluster.failure_timeout, "cluster.failure_timeout")?;

        // Mode/layout pairing is fixed; reject early rather than at plan time.
        match (self.transfer_mode, self.block.layout) {
            (TransferMode::ByRequestAgg, Layout::Aggregated) => {}
            (TransferMode::ByRequestAgg, Layout::Discrete) => {
                return Err(ConfigError::Invalid(
                    "transfer_mode by-request-agg requires block.layout = \"aggregated\"".into(),
                ))
            }
            (TransferMode::ByLayer | TransferMode::ByRequest, Layout::Aggregated) => {
                return Err(ConfigError::Invalid(format!(
                    "transfer_mode {} requires block.layout = \"discrete\"",
                    self.transfer_mode
                )))
            }
            _ => {}
        }

        if self.instances.is_empty() {
            return Err(ConfigError::Invalid("at least one [[instances]] entry is required".into()));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.id.is_empty() {
                return Err(ConfigError::Invalid(format!("instances[{i}].id must be non-empty")));
            }
            if inst.id.contains(',') || inst.id.contains(';') {
                return Err(ConfigError::Invalid(format!(
                    "instances[{i}].id {:?} must not contain ',' or ';'",
                    inst.id
                )));
            }
            if self.instances.iter().filter(|j| j.id == inst.id).count() > 1 {
                return Err(ConfigError::Invalid(format!("duplicate instance id {:?}", inst.id)));
            }
            if inst.tp == 0 || inst.pp == 0 {
                return Err(ConfigError::Invalid(format!(
                    "instance {:?}: tp and pp must be >= 1",
                    inst.id
                )));
            }
            if inst.pp > self.model.num_layers {
                return Err(ConfigError::Invalid(format!(
                    "instance {:?}: pp {} exceeds num_layers {}",
                    inst.id, inst.pp, self.model.num_layers
                )));
            }
            if inst.hbm_blocks == 0 {
                return Err(ConfigError::Invalid(format!(
                    "instance {:?}: hbm_blocks must be >= 1",
                    inst.id
                )));
            }
        }

        let n_prefill = self.count_kind(InstanceKind::Prefill);
        let n_decode = self.count_kind(InstanceKind::Decode);
        let n_colocated = self.count_kind(InstanceKind::Colocated);
        match self.serving_mode {
            ServingMode::Colocated if n_colocated == 0 => {
                return Err(ConfigError::Invalid(
                    "serving_mode colocated needs at least one colocated instance".into(),
                ))
            }
            ServingMode::Disaggregated if n_prefill == 0 || n_decode == 0 => {
                return Err(ConfigError::Invalid(
                    "serving_mode disaggregated needs at least one prefill and one decode instance"
                        .into(),
                ))
            }
            _ => {}
        }

        for f in &self.failures {
            non_negative(f.time, "failures.time")?;
            if self.instance_id(&f.instance).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "failure injection names unknown instance {:?}",
                    f.instance
                )));
            }
        }

        positive(self.workload.request_rate, "workload.request_rate")?;
        non_negative(self.workload.think_time_mean, "workload.think_time_mean")?;
        if self.workload.share_ratio == 0 {
            return Err(ConfigError::Invalid("workload.share_ratio must be >= 1".into()));
        }
        if self.workload.kind == WorkloadKind::Trace && self.workload.trace_path.is_none() {
            return Err(ConfigError::Invalid(
                "workload.kind = \"trace\" requires workload.trace_path".into(),
            ));
        }
        if self.workload.kind != WorkloadKind::Trace {
            if self.workload.sessions == 0 {
                return Err(ConfigError::Invalid("workload.sessions must be >= 1".into()));
            }
            if self.workload.turns() == 0 {
                return Err(ConfigError::Invalid("workload.turns must be >= 1".into()));
            }
            for (name, [lo, hi]) in [
                ("question_tokens", self.workload.question_tokens()),
                ("gen_tokens", self.workload.gen_tokens()),
            ] {
                if lo == 0 || lo > hi {
                    return Err(ConfigError::Invalid(format!(
                        "workload.{name} range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
                    )));
                }
            }
            if self.workload.vocab_size == 0 {
                return Err(ConfigError::Invalid("workload.vocab_size must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn count_kind(&self, kind: InstanceKind) -> usize {
        self.instances.iter().filter(|i| i.kind == kind).count()
    }
}
