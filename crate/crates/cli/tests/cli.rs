//! Process-level tests of the `kvsim` binary.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11
serving_mode = "disaggregated"
caching_design = "pd-caching2"
transfer_mode = "by-request-agg"

[model]
num_layers = 4
hidden_size = 64
kv_bytes_per_token_per_layer = 2
context_window = 8192

[block]
block_size = 16
layout = "aggregated"

[network]
per_call_overhead = 5e-6
hbm_bandwidth = 5e10
dram_bandwidth = 1e10
communicators_per_pair = 4

[engine]
max_batch_tokens = 16384
max_batch_size = 64
eviction_enabled = true
swap_before_evict = true

[scheduler]
policy = "least-load"
tree_ttl = 3600.0

[cluster]
heartbeat_interval = 0.02
failure_timeout = 0.05

[[instances]]
id = "p0"
kind = "prefill"
hbm_blocks = 2048
dram_blocks = 2048
caching = true

[[instances]]
id = "d0"
kind = "decode"
hbm_blocks = 2048
dram_blocks = 2048
caching = false

[workload]
kind = "chat"
request_rate = 5.0
sessions = 4
turns = 2
think_time_mean = 0.2

[output]
dir = "unused-by-tests"
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("sim.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

fn kvsim(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kvsim"));
    cmd.args(args);
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

#[test]
fn run_writes_four_csvs_and_a_summary_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = run_ok(kvsim(&["run"]).arg(&cfg).arg("--out").arg(&out_dir));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("ttft mean/p99"), "{stdout}");
    assert!(stdout.contains("8/8 done"), "{stdout}");
    for f in ["requests.csv", "transfers.csv", "routing.csv", "summary.csv"] {
        let text = std::fs::read_to_string(out_dir.join(f)).unwrap();
        assert!(text.lines().count() >= 2, "{f} has no data rows");
    }
}

#[test]
fn seed_override_changes_sampled_values_not_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let mut lines = Vec::new();
    for seed in ["11", "12"] {
        let dir = tmp.path().join(seed);
        let out = run_ok(kvsim(&["run"]).arg(&cfg).args(["--seed", seed]).arg("--out").arg(&dir));
        let requests = std::fs::read_to_string(dir.join("requests.csv")).unwrap();
        assert_eq!(requests.lines().count(), 9, "8 requests either way");
        lines.push(String::from_utf8(out.stdout).unwrap());
    }
    assert_ne!(lines[0], lines[1], "different seeds sample different workloads");
}

#[test]
fn env_var_overrides_the_config_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_dir = tmp.path().join("from-env");
    run_ok(kvsim(&["run"]).arg(&cfg).env("KVSIM_OUTPUT_DIR", &out_dir));
    assert!(out_dir.join("summary.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = kvsim(&["run", "--definitely-not-a-flag"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn validate_reports_shape_and_rejects_broken_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = run_ok(kvsim(&["validate"]).arg(&cfg));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("2 instance(s), 4 session(s), 8 request(s)"), "{stdout}");

    // by-layer needs the discrete layout; keep the layout aggregated.
    let broken = CONFIG.replace("by-request-agg", "by-layer");
    let path = tmp.path().join("broken.toml");
    std::fs::write(&path, broken).unwrap();
    let out = kvsim(&["validate"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("error"), "{stderr}");
}

#[test]
fn sweep_enumerates_the_cross_product_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let mut tables = Vec::new();
    for round in ["a", "b"] {
        let dir = tmp.path().join(round);
        run_ok(
            kvsim(&["sweep"])
                .arg(&cfg)
                .args(["--rates", "2,8", "--designs", "pd-basic,pd-caching3"])
                .arg("--out")
                .arg(&dir),
        );
        let table = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
        assert_eq!(table.lines().count(), 5, "header + 4 points:\n{table}");
        for label in ["r2_pd-basic", "r2_pd-caching3", "r8_pd-basic", "r8_pd-caching3"] {
            assert!(dir.join(label).join("summary.csv").exists(), "missing point {label}");
        }
        tables.push(table);
    }
    assert_eq!(tables[0], tables[1], "sweep output is reproducible byte for byte");
}

#[test]
fn dump_index_renders_pool_counters_and_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = run_ok(kvsim(&["dump-index"]).arg(&cfg));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("instance=i0 block_size=16"), "{stdout}");
    assert!(stdout.contains("HBM capacity=2048"), "{stdout}");
    assert!(stdout.contains("index blocks="), "{stdout}");
}
