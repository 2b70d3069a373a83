//! Command-line front end for the selective compression toolkit.
//!
//! Typical lifecycle: `gen` a corpus, `train` per-type models on it,
//! `oracle` to capture per-item dual measurements, then `run` experiments
//! and inspect the written reports (or re-derive one with `report`).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use selzip::corpus::{generate_corpus, read_manifest, ClassSpec, CorpusSpec, PayloadClass};
use selzip::experiment::{
    capture_profiles, run_experiment, save_profiles, ExperimentConfig, ExperimentReport,
    LiveConfig, OutcomeRow, RunMode,
};
use selzip::link::BYTES_PER_SEC_PER_MBPS;
use selzip::training::train_corpus;
use selzip::transfer::serve;
use selzip::{Action, DataTypeLabel, DeflateCodec, EstimatorConfig, PolicyConfig, PolicyKind};

#[derive(Parser)]
#[command(
    name = "selzip",
    version,
    about = "Selective compression: decide per item whether compressing before transmit pays off"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with a manifest.
    Gen(GenArgs),
    /// Fit per-type size and latency models from a corpus.
    Train(TrainArgs),
    /// Capture per-item compression profiles (feeds oracle and analytic runs).
    Oracle(OracleArgs),
    /// Run policies over a corpus across link conditions and write reports.
    Run(RunArgs),
    /// Summarize a previously written outcome log.
    Report(ReportArgs),
    /// Run a standalone receive server.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Text plus incompressible and tiny items; exercises every decision path.
    Mixed,
    /// Compressible text only.
    Text,
    /// Incompressible payloads only.
    Random,
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for items/, manifest.jsonl, corpus_spec.json.
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total item count (split across classes for the mixed preset).
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, value_enum, default_value_t = Preset::Mixed)]
    preset: Preset,
    /// Corpus spec JSON; overrides --preset and --items.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "models.json")]
    out: PathBuf,
    /// Timed codec repetitions per item (median kept).
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "profiles.jsonl")]
    out: PathBuf,
    /// Timed codec repetitions per item (median kept).
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained model file (required for the selective policy).
    #[arg(long)]
    models: Option<PathBuf>,
    /// Profile log from `oracle` (required for analytic compressing runs).
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Link levels in Mbps.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2.0, 5.0, 10.0])]
    mbps: Vec<f64>,
    /// Single pass with a seeded schedule over partitions instead of one
    /// pass per level.
    #[arg(long, conflicts_with = "sequence")]
    dynamic: bool,
    #[arg(long, default_value_t = 8)]
    partitions: usize,
    /// Single pass with one epoch per level, applied in the given order.
    #[arg(long)]
    sequence: bool,
    /// Policies to run: uncompressed, compressed, selective, oracle.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy,
          default_values_t = vec![PolicyKind::Uncompressed, PolicyKind::Compressed, PolicyKind::Selective, PolicyKind::TimeOracle])]
    policies: Vec<PolicyKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Round-trip time in seconds added per transfer.
    #[arg(long, default_value_t = 0.0)]
    rtt: f64,
    /// Transmission jitter as a fraction (0.1 = +/-10%).
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Items below this many bytes are always sent raw.
    #[arg(long, default_value_t = 4096)]
    min_size: u64,
    /// Labels always sent raw.
    #[arg(long, value_delimiter = ',', default_values_t = ["image".to_string(), "audio".to_string(), "video".to_string()])]
    exclude: Vec<String>,
    /// EWMA decay weight for new throughput samples.
    #[arg(long, default_value_t = 0.05)]
    decay: f64,
    /// Throughput assumed before any samples arrive, in Mbps.
    #[arg(long, default_value_t = 5.0)]
    prior_mbps: f64,
    /// Samples required before the EWMA replaces the prior.
    #[arg(long, default_value_t = 1)]
    warmup: u64,
    /// Consecutive items per reporting group (speedup spread granularity).
    #[arg(long, default_value_t = 25)]
    group_size: usize,
    /// Send payloads through the real client/server path instead of the
    /// analytic link.
    #[arg(long)]
    live: bool,
    /// Receive endpoint for --live; a loopback server is spawned if unset.
    #[arg(long)]
    endpoint: Option<String>,
    /// Live dual-measurement repetitions per item.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Outcome log written by `run`.
    #[arg(long, default_value = "results/outcomes.jsonl")]
    outcomes: PathBuf,
    /// Print rows as JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:9099")]
    bind: String,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::from_str(s)
}

fn main() {
    // Rust ignores SIGPIPE by default, turning `selzip report | head` into a
    // println panic. Restore the conventional quiet death on a closed pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Oracle(args) => cmd_oracle(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Serve(args) => cmd_serve(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn label(name: &str) -> Result<DataTypeLabel> {
    DataTypeLabel::new(name).with_context(|| format!("bad label `{name}`"))
}

fn preset_spec(preset: Preset, items: usize, seed: u64) -> Result<CorpusSpec> {
    if items == 0 {
        bail!("--items must be at least 1");
    }
    let classes = match preset {
        Preset::Text => vec![ClassSpec {
            label: label("text")?,
            class: PayloadClass::Text,
            count: items,
            min_size: 8 * 1024,
            max_size: 512 * 1024,
        }],
        Preset::Random => vec![ClassSpec {
            label: label("random")?,
            class: PayloadClass::RandomBytes,
            count: items,
            min_size: 8 * 1024,
            max_size: 256 * 1024,
        }],
        Preset::Mixed => {
            // Half text, the rest split between already-encoded media
            // stand-ins, unlabeled noise, and sub-threshold blobs.
            let image = items / 5;
            let random = items / 5;
            let tiny = items / 10;
            let text = items - image - random - tiny;
            vec![
                ClassSpec {
                    label: label("text")?,
                    class: PayloadClass::Text,
                    count: text,
                    min_size: 8 * 1024,
                    max_size: 512 * 1024,
                },
                ClassSpec {
                    label: label("image")?,
                    class: PayloadClass::RandomBytes,
                    count: image,
                    min_size: 8 * 1024,
                    max_size: 256 * 1024,
                },
                ClassSpec {
                    label: label("random")?,
                    class: PayloadClass::RandomBytes,
                    count: random,
                    min_size: 8 * 1024,
                    max_size: 256 * 1024,
                },
                ClassSpec {
                    label: label("text")?,
                    class: PayloadClass::TinyOpaque,
                    count: tiny,
                    min_size: 64,
                    max_size: 2048,
                },
            ]
        }
    };
    Ok(CorpusSpec { seed, classes })
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading corpus spec {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing corpus spec {}", path.display()))?
        }
        None => preset_spec(args.preset, args.items, args.seed)?,
    };
    let manifest = generate_corpus(&spec, &args.out)?;
    let items = read_manifest(&manifest)?;
    println!("wrote {} items, manifest {}", items.len(), manifest.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let items = read_manifest(&args.manifest)?;
    let codec = DeflateCodec::default();
    let models = train_corpus(&items, &codec, args.reps)?;
    models.save(&args.out)?;
    println!(
        "trained {} type models (+ global fallback) from {} items -> {}",
        models.len(),
        items.len(),
        args.out.display()
    );
    for l in models.labels() {
        let m = models.model_for(&l);
        println!(
            "  {:<10} alpha={:.3e} s/B  beta={:.3e} s  compressibility={:.3}",
            l.to_string(),
            m.alpha,
            m.beta,
            m.compressibility
        );
    }
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let items = read_manifest(&args.manifest)?;
    if items.is_empty() {
        bail!("manifest {} has no usable items", args.manifest.display());
    }
    let codec = DeflateCodec::default();
    let profiles = capture_profiles(&items, &codec, args.reps)?;
    save_profiles(&args.out, &profiles)?;
    let original: u64 = profiles.iter().map(|p| p.original_size).sum();
    let compressed: u64 = profiles.iter().map(|p| p.compressed_size).sum();
    println!(
        "profiled {} items -> {} (byte-weighted ratio {:.3})",
        profiles.len(),
        args.out.display(),
        original as f64 / compressed as f64
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut policy = PolicyConfig {
        min_size_bytes: args.min_size,
        default_throughput: args.prior_mbps * BYTES_PER_SEC_PER_MBPS,
        ..PolicyConfig::default()
    };
    policy.excluded_labels.clear();
    for name in &args.exclude {
        if name.trim().is_empty() {
            continue;
        }
        policy.excluded_labels.insert(label(name)?);
    }

    let config = ExperimentConfig {
        manifest: args.manifest,
        models: args.models,
        profiles: args.profiles,
        policies: args.policies,
        levels_mbps: args.mbps,
        mode: if args.dynamic {
            RunMode::Dynamic {
                partitions: args.partitions,
            }
        } else if args.sequence {
            RunMode::Sequence
        } else {
            RunMode::Fixed
        },
        rtt: args.rtt,
        jitter: args.jitter,
        seed: args.seed,
        policy,
        estimator: EstimatorConfig {
            decay: args.decay,
            prior_bps: args.prior_mbps * BYTES_PER_SEC_PER_MBPS,
            warmup_samples: args.warmup,
        },
        group_size: args.group_size,
        out_dir: args.out.clone(),
        live: if args.live {
            Some(LiveConfig {
                endpoint: args.endpoint,
            })
        } else {
            None
        },
        measure_reps: args.reps,
    };
    let report = run_experiment(&config)?;
    print_report(&report);
    println!(
        "\nwrote report.csv, report.json, outcomes.jsonl under {}",
        args.out.display()
    );
    Ok(())
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{:<13} {:>8} {:>6} {:>12} {:>9} {:>7} {:>7} {:>9}",
        "policy", "link", "items", "total_s", "speedup", "usage", "comp%", "success"
    );
    for row in &report.rows {
        println!(
            "{:<13} {:>8} {:>6} {:>12.3} {:>9.3} {:>7.3} {:>7.1} {:>9}",
            row.policy.to_string(),
            row.link,
            row.items,
            row.total_seconds,
            row.speedup_vs_uncompressed,
            row.data_usage_vs_uncompressed,
            row.compressed_fraction * 100.0,
            row.success_rate
                .map(|s| format!("{s:.3}"))
                .unwrap_or_else(|| "-".to_string()),
        );
    }
    if !report.epoch_rows.is_empty() {
        println!("\nper-epoch compressed fraction:");
        for row in &report.epoch_rows {
            println!(
                "  {:<13} epoch {:>2} @ {:>6.1} Mbps: {:>5.1}% of {} items",
                row.policy.to_string(),
                row.epoch,
                row.link_mbps,
                row.compressed_fraction * 100.0,
                row.items
            );
        }
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.outcomes)
        .with_context(|| format!("reading {}", args.outcomes.display()))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: OutcomeRow = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", args.outcomes.display(), idx + 1))?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} contains no outcome rows", args.outcomes.display());
    }

    let mut groups: BTreeMap<(String, PolicyKind), Vec<&OutcomeRow>> = BTreeMap::new();
    for row in &rows {
        groups.entry((row.link.clone(), row.policy)).or_default().push(row);
    }

    if args.json {
        for ((link, policy), rows) in &groups {
            let summary = summarize(rows);
            let baseline = groups
                .get(&(link.clone(), PolicyKind::Uncompressed))
                .map(|b| summarize(b));
            println!(
                "{}",
                serde_json::json!({
                    "link": link,
                    "policy": policy,
                    "items": rows.len(),
                    "total_seconds": summary.0,
                    "wire_bytes": summary.1,
                    "compressed_fraction": summary.2,
                    "speedup_vs_uncompressed": baseline.map(|b| b.0 / summary.0),
                    "data_usage_vs_uncompressed": baseline.map(|b| summary.1 as f64 / b.1 as f64),
                })
            );
        }
        return Ok(());
    }

    println!(
        "{:<13} {:>8} {:>6} {:>12} {:>9} {:>7} {:>7}",
        "policy", "link", "items", "total_s", "speedup", "usage", "comp%"
    );
    for ((link, policy), rows) in &groups {
        let (total, wire, frac) = summarize(rows);
        let baseline = groups
            .get(&(link.clone(), PolicyKind::Uncompressed))
            .map(|b| summarize(b));
        let speedup = baseline
            .map(|b| format!("{:.3}", b.0 / total))
            .unwrap_or_else(|| "-".to_string());
        let usage = baseline
            .map(|b| format!("{:.3}", wire as f64 / b.1 as f64))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<13} {:>8} {:>6} {:>12.3} {:>9} {:>7} {:>7.1}",
            policy.to_string(),
            link,
            rows.len(),
            total,
            speedup,
            usage,
            frac * 100.0
        );
    }
    Ok(())
}

fn summarize(rows: &[&OutcomeRow]) -> (f64, u64, f64) {
    let total: f64 = rows.iter().map(|r| r.total).sum();
    let wire: u64 = rows.iter().map(|r| r.bytes_on_wire).sum();
    let compressed = rows.iter().filter(|r| r.action == Action::Compress).count();
    (total, wire, compressed as f64 / rows.len() as f64)
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let server = serve(&args.bind).with_context(|| format!("binding {}", args.bind))?;
    println!("listening on {}", server.endpoint());
    // Serve until the process is killed.
    loop {
        std::thread::park();
    }
}
