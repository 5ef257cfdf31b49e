//! `kvsim` — run simulated serving experiments from TOML configs and emit
//! plot-ready CSV.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use kvsim_core::config::{CachingDesign, Layout, SchedulerPolicy, SimConfig, TransferMode};
use kvsim_core::mempool::MemPool;
use kvsim_core::sim::metrics::{summary_row, SUMMARY_HEADER};
use kvsim_core::sim::{run_simulation, workload, SimReport};
use kvsim_core::types::{truncate_to_blocks, InstanceId, Medium};

/// Output directory defaults come from the config; this variable overrides
/// it, and --out overrides both.
const OUTPUT_DIR_ENV: &str = "KVSIM_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "kvsim", version, about = "Simulated LLM serving over a pooled KV cache")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and write requests/transfers/routing/summary CSVs.
    Run(RunArgs),
    /// Run the cross-product of sweep axes and write a combined table.
    Sweep(SweepArgs),
    /// Parse a config, check invariants, and report what it describes.
    Validate { config: PathBuf },
    /// Render the content index the workload's conversations would build
    /// on one instance (golden-file debug aid).
    DumpIndex { config: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (beats KVSIM_OUTPUT_DIR and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// Request rates to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    /// Caching designs to sweep, e.g. pd-basic,pd-caching3.
    #[arg(long, value_delimiter = ',')]
    designs: Vec<String>,
    /// Scheduler policies to sweep, e.g. least-load,prompt-tree.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    /// Transfer modes to sweep (the block layout follows the mode).
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Validate { config } => cmd_validate(&config),
        Cmd::DumpIndex { config } => cmd_dump_index(&config),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load(path: &Path) -> Result<SimConfig> {
    SimConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn output_dir(flag: Option<PathBuf>, cfg: &SimConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output.dir.clone())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = output_dir(args.out, &cfg);
    let report = run_simulation(&cfg)?;
    report.write_csvs(&dir).with_context(|| format!("writing {}", dir.display()))?;
    println!("{}", summary_line(&report));
    Ok(())
}

fn summary_line(report: &SimReport) -> String {
    let s = &report.summary;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    format!(
        "requests {}/{} done, {} failed | ttft mean/p99 {}/{} | jct mean/p99 {}/{} | \
         tpot mean {} | reuse ratio {:.4} | {} bytes in {} calls | makespan {:.6}",
        s.requests_done,
        s.requests_total,
        s.requests_failed,
        opt(s.ttft.mean),
        opt(s.ttft.p99),
        opt(s.jct.mean),
        opt(s.jct.p99),
        opt(s.tpot.mean),
        s.reuse_ratio,
        s.transfer_bytes,
        s.transfer_calls,
        s.makespan,
    )
}

/// Parse one of the config's kebab-case enum values ("pd-caching2",
/// "prompt-tree", ...) through the same serde names the TOML uses.
fn kebab<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|e| anyhow!("invalid {what} {s:?}: {e}"))
}

struct Point {
    rate: Option<f64>,
    design: Option<CachingDesign>,
    policy: Option<SchedulerPolicy>,
    mode: Option<TransferMode>,
}

impl Point {
    fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(r) = self.rate {
            parts.push(format!("r{r}"));
        }
        if let Some(d) = self.design {
            parts.push(enum_name(&d));
        }
        if let Some(p) = self.policy {
            parts.push(enum_name(&p));
        }
        if let Some(m) = self.mode {
            parts.push(enum_name(&m));
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("_")
        }
    }

    fn apply(&self, cfg: &mut SimConfig) {
        if let Some(r) = self.rate {
            cfg.workload.request_rate = r;
        }
        if let Some(d) = self.design {
            cfg.caching_design = d;
        }
        if let Some(p) = self.policy {
            cfg.scheduler.policy = p;
        }
        if let Some(m) = self.mode {
            cfg.transfer_mode = m;
            // The layout is coupled to the mode; keep the pair valid.
            cfg.block.layout = match m {
                TransferMode::ByRequestAgg => Layout::Aggregated,
                _ => Layout::Discrete,
            };
        }
    }
}

fn enum_name<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "?".into(),
    }
}

fn axis<T>(values: Vec<T>) -> Vec<Option<T>>
where
    T: Copy,
{
    if values.is_empty() {
        vec![None]
    } else {
        values.into_iter().map(Some).collect()
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = load(&args.config)?;
    let designs: Vec<CachingDesign> =
        args.designs.iter().map(|s| kebab("caching design", s)).collect::<Result<_>>()?;
    let policies: Vec<SchedulerPolicy> =
        args.policies.iter().map(|s| kebab("scheduler policy", s)).collect::<Result<_>>()?;
    let modes: Vec<TransferMode> =
        args.modes.iter().map(|s| kebab("transfer mode", s)).collect::<Result<_>>()?;
    let dir = output_dir(args.out, &base);
    std::fs::create_dir_all(&dir)?;

    // Cross-product in declaration order: rates, designs, policies, modes.
    let mut points = Vec::new();
    for &rate in &axis(args.rates) {
        for &design in &axis(designs.clone()) {
            for &policy in &axis(policies.clone()) {
                for &mode in &axis(modes.clone()) {
                    points.push(Point { rate, design, policy, mode });
                }
            }
        }
    }

    let mut table = csv::Writer::from_path(dir.join("sweep.csv"))?;
    let mut header = vec!["rate", "design", "policy", "mode", "status"];
    header.extend_from_slice(SUMMARY_HEADER);
    table.write_record(&header)?;
    let mut failed = 0usize;
    for point in &points {
        let mut cfg = base.clone();
        point.apply(&mut cfg);
        let label = point.label();
        let mut row = vec![
            point.rate.map(|r| r.to_string()).unwrap_or_default(),
            point.design.map(|d| enum_name(&d)).unwrap_or_default(),
            point.policy.map(|p| enum_name(&p)).unwrap_or_default(),
            point.mode.map(|m| enum_name(&m)).unwrap_or_default(),
        ];
        match run_simulation(&cfg) {
            Ok(report) => {
                report.write_csvs(&dir.join(&label))?;
                row.push("ok".into());
                row.extend(summary_row(&report.summary));
                println!("{label}: {}", summary_line(&report));
            }
            Err(e) => {
                failed += 1;
                row.push(format!("error: {e}"));
                row.extend(std::iter::repeat(String::new()).take(SUMMARY_HEADER.len()));
                eprintln!("{label}: error: {e}");
            }
        }
        table.write_record(&row)?;
    }
    table.flush()?;
    println!("swept {} points ({failed} failed) -> {}", points.len(), dir.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<()> {
    let cfg = load(path)?;
    // Sampling the workload exercises trace parsing and prompt-length
    // checks that only show up at run time otherwise.
    let wl = workload::generate(&cfg)?;
    println!(
        "ok: {} instance(s), {} session(s), {} request(s), seed {}",
        cfg.instances.len(),
        wl.sessions.len(),
        wl.total_requests(),
        cfg.seed,
    );
    Ok(())
}

fn cmd_dump_index(path: &Path) -> Result<()> {
    let cfg = load(path)?;
    let wl = workload::generate(&cfg)?;
    let spec = cfg.instances.first().ok_or_else(|| anyhow!("config has no instances"))?;
    let mut pool =
        MemPool::new(InstanceId(0), cfg.block.block_size, spec.hbm_blocks, spec.dram_blocks);
    let mut t = 0.0;
    for sess in &wl.sessions {
        for r in &sess.requests {
            let mut conv = r.prompt.clone();
            conv.extend(&r.response);
            let n = truncate_to_blocks(conv.len(), cfg.block.block_size);
            let blocks = n / cfg.block.block_size;
            if blocks == 0 {
                continue;
            }
            let addrs = pool
                .alloc(Medium::Hbm, blocks, None)
                .map_err(|e| anyhow!("instance too small to hold the workload: {e}"))?;
            pool.insert(&conv[..n], &addrs, t).map_err(|e| anyhow!("insert failed: {e}"))?;
            t += 1.0;
        }
    }
    // Tolerate a closed pipe (`kvsim dump-index ... | head`).
    use std::io::Write;
    match std::io::stdout().write_all(pool.dump().as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}
