//! End-to-end experiment runner.
//!
//! An experiment replays one corpus under several transfer policies and link
//! conditions and reduces the outcomes to a report. Two execution modes:
//!
//! * **Analytic** (default): transmission times come from the analytic link
//!   and per-item compression behavior comes from a profile log captured
//!   once by a dual-measurement pass. Nothing is re-measured at run time,
//!   so a given config and seed reproduces byte-identical outputs. Decision
//!   overhead is pinned to zero here; it is a wall-clock quantity and would
//!   break reproducibility (live runs measure it for real).
//! * **Live**: payloads travel through the real client/server path with the
//!   client's writes paced to the link bandwidth; all timings are measured.
//!
//! Every policy in a run sees the same corpus order, the same link schedule,
//! and the same jitter draws, so totals are comparable item by item.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{Codec, CodecError, DeflateCodec};
use crate::corpus::{read_manifest, CorpusError, CorpusItem};
use crate::estimator::{
    EstimatorConfig, EstimatorError, EstimatorState, SharedEstimator, ThroughputSample,
};
use crate::link::{
    make_schedule, transmission_time, EpochSchedule, LinkError, LinkSpec, ScheduleFile,
};
use crate::metrics::{
    breakdown, compressed_fraction_series, confusion, time_oracle, total_time, total_wire_bytes,
    ItemMeasurement, MetricsError, PolicyKind,
};
use crate::policy::{
    decide_for_size, Action, DataTypeLabel, Decision, DecisionReason, PolicyConfig, PolicyError,
    TransferItem,
};
use crate::training::{ModelSet, TrainingError};
use crate::transfer::{serve, ServerHandle, TransferClient, TransferError, TransferOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("transfer failed: {0}")]
    Transfer(#[from] TransferError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("selective policy needs trained models; run `train` first and pass the model file")]
    MissingModels,
    #[error(
        "analytic runs with compressing policies need a dual-measurement profile log; \
         run `oracle` first and pass it ({missing} items uncovered, e.g. `{example}`)"
    )]
    MissingProfiles { missing: usize, example: String },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("profile log {path}: {reason}")]
    InvalidProfileLog { path: PathBuf, reason: String },
}

/// Per-item codec behavior captured once by the dual-measurement pass:
/// compressed size plus median compression and decompression latencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemProfile {
    pub item_id: String,
    pub label: DataTypeLabel,
    pub original_size: u64,
    pub compressed_size: u64,
    pub compression_latency: f64,
    pub decompression_latency: f64,
}

/// Measure every corpus item with the codec: `reps` timed compressions and
/// decompressions, medians kept. This is the expensive pass; analytic runs
/// replay its output instead of re-measuring.
pub fn capture_profiles(
    items: &[CorpusItem],
    codec: &dyn Codec,
    reps: usize,
) -> Result<Vec<ItemProfile>, ExperimentError> {
    let reps = reps.max(1);
    let mut profiles = Vec::with_capacity(items.len());
    for item in items {
        let payload = std::fs::read(&item.path).map_err(|source| ExperimentError::Io {
            path: item.path.clone(),
            source,
        })?;
        let mut compress_times = Vec::with_capacity(reps);
        let mut decompress_times = Vec::with_capacity(reps);
        let mut compressed = Vec::new();
        for rep in 0..reps {
            let t = Instant::now();
            let out = codec.compress(&payload)?;
            compress_times.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            codec.decompress(&out)?;
            decompress_times.push(t.elapsed().as_secs_f64());
            if rep == 0 {
                compressed = out;
            }
        }
        profiles.push(ItemProfile {
            item_id: item.id.clone(),
            label: item.label.clone(),
            original_size: payload.len() as u64,
            compressed_size: compressed.len() as u64,
            compression_latency: median(&mut compress_times),
            decompression_latency: median(&mut decompress_times),
        });
    }
    Ok(profiles)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

pub fn save_profiles(path: &Path, profiles: &[ItemProfile]) -> Result<(), ExperimentError> {
    let mut out = String::new();
    for p in profiles {
        out.push_str(&serde_json::to_string(p).expect("profile serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_profiles(path: &Path) -> Result<Vec<ItemProfile>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut profiles = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let profile: ItemProfile =
            serde_json::from_str(line).map_err(|e| ExperimentError::InvalidProfileLog {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", idx + 1),
            })?;
        profiles.push(profile);
    }
    Ok(profiles)
}

/// How link conditions vary over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RunMode {
    /// Each configured level gets its own full pass over the corpus.
    Fixed,
    /// One pass; the corpus is split into as many epochs as there are
    /// levels, applied in the given order.
    Sequence,
    /// One pass; the corpus is split into partitions and each partition
    /// draws a level from the seeded schedule.
    Dynamic { partitions: usize },
}

/// Live-transfer settings. With no endpoint a loopback server is spawned
/// for the duration of the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    /// Trained model file; required when Selective runs.
    pub models: Option<PathBuf>,
    /// Dual-measurement profile log; required for analytic runs that
    /// compress anything.
    pub profiles: Option<PathBuf>,
    pub policies: Vec<PolicyKind>,
    pub levels_mbps: Vec<f64>,
    pub mode: RunMode,
    pub rtt: f64,
    pub jitter: f64,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub estimator: EstimatorConfig,
    /// Consecutive items per reporting group (spread/stderr granularity).
    pub group_size: usize,
    pub out_dir: PathBuf,
    pub live: Option<LiveConfig>,
    /// Repetitions for live dual measurements.
    pub measure_reps: usize,
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            models: None,
            profiles: None,
            policies: vec![
                PolicyKind::Uncompressed,
                PolicyKind::Compressed,
                PolicyKind::Selective,
                PolicyKind::TimeOracle,
            ],
            levels_mbps: vec![2.0, 5.0, 10.0],
            mode: RunMode::Fixed,
            rtt: 0.0,
            jitter: 0.0,
            seed: 0,
            policy: PolicyConfig::default(),
            estimator: EstimatorConfig::default(),
            group_size: 25,
            out_dir: out_dir.into(),
            live: None,
            measure_reps: 3,
        }
    }
}

/// Everything that determines an experiment's numbers, hashed into the
/// report so outputs are traceable to their settings. The output directory
/// is deliberately absent: where results land must not change them.
#[derive(Debug, Clone, Serialize)]
struct ResolvedConfig {
    dataset: String,
    policies: Vec<String>,
    levels_mbps: Vec<f64>,
    mode: RunMode,
    rtt: f64,
    jitter: f64,
    seed: u64,
    min_size_bytes: u64,
    excluded_labels: Vec<String>,
    default_throughput: f64,
    estimator_decay: f64,
    estimator_prior_bps: f64,
    estimator_warmup: u64,
    group_size: usize,
    codec_id: String,
    live: bool,
    measure_reps: usize,
}

fn config_hash(resolved: &ResolvedConfig) -> String {
    let canonical = serde_json::to_string(resolved).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..16].to_string()
}

/// One aggregate row of the report: policy x link condition.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub policy: PolicyKind,
    pub dataset: String,
    /// Level in Mbps rendered as text, or "dynamic".
    pub link: String,
    pub items: usize,
    pub total_seconds: f64,
    pub wire_bytes: u64,
    pub speedup_vs_uncompressed: f64,
    /// Standard error of the speedup over reporting groups.
    pub speedup_stderr: f64,
    pub data_usage_vs_uncompressed: f64,
    pub frac_overhead: f64,
    pub frac_compression: f64,
    pub frac_transmission: f64,
    /// Aggregate server-side decompression seconds, reported next to the
    /// client total it is excluded from.
    pub decompression_seconds: f64,
    pub compressed_fraction: f64,
    pub success_rate: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub false_negative_rate: Option<f64>,
    /// Per-group speedups behind the stderr (JSON only).
    pub group_speedups: Vec<f64>,
}

/// Compression activity within one epoch of a dynamic run.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub policy: PolicyKind,
    pub epoch: usize,
    pub link_mbps: f64,
    pub items: usize,
    pub compressed_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub config_hash: String,
    pub codec_id: String,
    pub seed: u64,
    pub mode: RunMode,
    pub levels_mbps: Vec<f64>,
    pub rtt: f64,
    pub jitter: f64,
    pub min_size_bytes: u64,
    pub excluded_labels: Vec<String>,
    pub estimator_decay: f64,
    pub estimator_prior_bps: f64,
    pub estimator_warmup: u64,
    pub group_size: usize,
    pub live: bool,
    /// Items whose oracle choice would flip if server-side decompression
    /// counted toward the compared totals. The oracle compares sender-side
    /// totals; this surfaces how much that interpretation matters.
    pub oracle_flips_with_decompression: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
    pub epoch_rows: Vec<EpochRow>,
}

/// One outcome log line: everything needed to re-derive the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub policy: PolicyKind,
    pub link: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub item_id: String,
    pub label: String,
    pub group: usize,
    pub original_size: u64,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<DecisionReason>,
    pub bytes_on_wire: u64,
    pub overhead: f64,
    pub compression_time: f64,
    pub transmission_time: f64,
    pub decompression_time: f64,
    pub total: f64,
    pub codec_fallback: bool,
}

/// A policy's full pass over the corpus under one link condition.
struct PolicyRun {
    outcomes: Vec<TransferOutcome>,
    actions: Vec<Action>,
    reasons: Vec<Option<DecisionReason>>,
}

/// Run the experiment and write all outputs under the config's out_dir:
/// `outcomes.jsonl`, `report.csv`, `report.json`, `config_resolved.json`,
/// plus `schedule.json` and `epochs.csv` for dynamic runs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    validate_config(config)?;
    let items = read_manifest(&config.manifest)?;
    if items.is_empty() {
        return Err(ExperimentError::InvalidConfig(
            "corpus manifest has no usable items".to_string(),
        ));
    }

    let policies = dedup_policies(&config.policies);
    let needs_models = policies.contains(&PolicyKind::Selective);
    let models = match (&config.models, needs_models) {
        (Some(path), _) => Some(ModelSet::load(path)?),
        (None, true) => return Err(ExperimentError::MissingModels),
        (None, false) => None,
    };

    let compressing = policies.iter().any(|p| {
        matches!(
            p,
            PolicyKind::Compressed | PolicyKind::Selective | PolicyKind::TimeOracle
        )
    });
    let profiles = if config.live.is_none() && compressing {
        Some(load_profile_map(config, &items)?)
    } else {
        None
    };

    let levels = config
        .levels_mbps
        .iter()
        .map(|&mbps| LinkSpec::new(mbps * crate::link::BYTES_PER_SEC_PER_MBPS, config.rtt, config.jitter))
        .collect::<Result<Vec<_>, _>>()?;

    let codec_id = models
        .as_ref()
        .map(|m| m.codec_id.clone())
        .unwrap_or_else(|| DeflateCodec::default().id().to_string());
    let dataset = dataset_name(&config.manifest);
    let resolved = ResolvedConfig {
        dataset: dataset.clone(),
        policies: policies.iter().map(|p| p.to_string()).collect(),
        levels_mbps: config.levels_mbps.clone(),
        mode: config.mode.clone(),
        rtt: config.rtt,
        jitter: config.jitter,
        seed: config.seed,
        min_size_bytes: config.policy.min_size_bytes,
        excluded_labels: config
            .policy
            .excluded_labels
            .iter()
            .map(|l| l.to_string())
            .collect(),
        default_throughput: config.policy.default_throughput,
        estimator_decay: config.estimator.decay,
        estimator_prior_bps: config.estimator.prior_bps,
        estimator_warmup: config.estimator.warmup_samples,
        group_size: config.group_size,
        codec_id: codec_id.clone(),
        live: config.live.is_some(),
        measure_reps: config.measure_reps,
    };
    let hash = config_hash(&resolved);

    std::fs::create_dir_all(&config.out_dir).map_err(|source| ExperimentError::Io {
        path: config.out_dir.clone(),
        source,
    })?;

    // A spawned loopback server must outlive every send below.
    let mut spawned_server: Option<ServerHandle> = None;
    let endpoint = match &config.live {
        None => None,
        Some(live) => Some(match &live.endpoint {
            Some(endpoint) => endpoint.clone(),
            None => {
                let server = serve("127.0.0.1:0").map_err(|source| ExperimentError::Io {
                    path: PathBuf::from("127.0.0.1:0"),
                    source,
                })?;
                let endpoint = server.endpoint();
                spawned_server = Some(server);
                endpoint
            }
        }),
    };

    let mut rows = Vec::new();
    let mut epoch_rows = Vec::new();
    let mut outcome_rows: Vec<OutcomeRow> = Vec::new();
    let mut oracle_flips = profiles.as_ref().map(|_| 0usize);

    match config.mode.clone() {
        RunMode::Fixed => {
            for (level_idx, spec) in levels.iter().enumerate() {
                let schedule = EpochSchedule {
                    seed: config.seed,
                    n_items: items.len(),
                    epochs: vec![crate::link::Epoch {
                        partition_index: 0,
                        link: *spec,
                    }],
                };
                let link_label = format_mbps(config.levels_mbps[level_idx]);
                let runs = run_all_policies(
                    config,
                    &items,
                    &policies,
                    models.as_ref(),
                    profiles.as_ref(),
                    &schedule,
                    derive_seed(config.seed, level_idx as u64),
                    endpoint.as_deref(),
                    &mut oracle_flips,
                )?;
                collect_rows(
                    config, &dataset, &link_label, &items, &policies, &runs, &mut rows,
                    &mut outcome_rows, None,
                );
            }
        }
        mode @ (RunMode::Sequence | RunMode::Dynamic { .. }) => {
            let (schedule, link_label) = match mode {
                RunMode::Sequence => (
                    EpochSchedule::from_levels(&levels, items.len())?,
                    "sequence",
                ),
                RunMode::Dynamic { partitions } => {
                    let schedule = make_schedule(items.len(), partitions, &levels, config.seed)?;
                    ScheduleFile {
                        seed: config.seed,
                        levels_mbps: config.levels_mbps.clone(),
                        n_partitions: partitions,
                    }
                    .save(&config.out_dir.join("schedule.json"))?;
                    (schedule, "dynamic")
                }
                RunMode::Fixed => unreachable!("handled above"),
            };
            let runs = run_all_policies(
                config,
                &items,
                &policies,
                models.as_ref(),
                profiles.as_ref(),
                &schedule,
                derive_seed(config.seed, DYNAMIC_SEED_STREAM),
                endpoint.as_deref(),
                &mut oracle_flips,
            )?;
            for policy in &policies {
                let run = &runs[policy];
                let series = compressed_fraction_series(&run.actions, &schedule);
                for (epoch, fraction) in series.iter().enumerate() {
                    epoch_rows.push(EpochRow {
                        policy: *policy,
                        epoch,
                        link_mbps: schedule.epochs[epoch].link.mbps(),
                        items: schedule.partition_range(epoch).len(),
                        compressed_fraction: *fraction,
                    });
                }
            }
            collect_rows(
                config, &dataset, link_label, &items, &policies, &runs, &mut rows,
                &mut outcome_rows, Some(&schedule),
            );
        }
    }

    if let Some(server) = spawned_server {
        server.shutdown();
    }

    let meta = ReportMeta {
        dataset,
        config_hash: hash,
        codec_id,
        seed: config.seed,
        mode: config.mode.clone(),
        levels_mbps: config.levels_mbps.clone(),
        rtt: config.rtt,
        jitter: config.jitter,
        min_size_bytes: config.policy.min_size_bytes,
        excluded_labels: resolved.excluded_labels.clone(),
        estimator_decay: config.estimator.decay,
        estimator_prior_bps: config.estimator.prior_bps,
        estimator_warmup: config.estimator.warmup_samples,
        group_size: config.group_size,
        live: config.live.is_some(),
        oracle_flips_with_decompression: oracle_flips,
    };
    let report = ExperimentReport {
        meta,
        rows,
        epoch_rows,
    };
    write_outputs(config, &resolved, &report, &outcome_rows)?;
    Ok(report)
}

fn validate_config(config: &ExperimentConfig) -> Result<(), ExperimentError> {
    if config.policies.is_empty() {
        return Err(ExperimentError::InvalidConfig("no policies requested".into()));
    }
    if config.levels_mbps.is_empty() {
        return Err(ExperimentError::InvalidConfig("no link levels given".into()));
    }
    if config.levels_mbps.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(ExperimentError::InvalidConfig(
            "link levels must be positive Mbps".into(),
        ));
    }
    if config.group_size == 0 {
        return Err(ExperimentError::InvalidConfig("group_size must be >= 1".into()));
    }
    if let RunMode::Dynamic { partitions } = config.mode {
        if partitions == 0 {
            return Err(ExperimentError::InvalidConfig("partitions must be >= 1".into()));
        }
    }
    config.estimator.validate()?;
    Ok(())
}

fn dedup_policies(requested: &[PolicyKind]) -> Vec<PolicyKind> {
    let mut seen = Vec::new();
    for p in requested {
        if !seen.contains(p) {
            seen.push(*p);
        }
    }
    seen
}

fn dataset_name(manifest: &Path) -> String {
    manifest
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string())
}

fn format_mbps(mbps: f64) -> String {
    if mbps.fract() == 0.0 {
        format!("{}", mbps as u64)
    } else {
        format!("{mbps}")
    }
}

/// Jitter stream index for dynamic runs, past any fixed-level index.
const DYNAMIC_SEED_STREAM: u64 = 0xD11A;

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step keeps per-level streams independent of each other.
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn load_profile_map(
    config: &ExperimentConfig,
    items: &[CorpusItem],
) -> Result<BTreeMap<String, ItemProfile>, ExperimentError> {
    let path = config.profiles.as_ref().ok_or(ExperimentError::MissingProfiles {
        missing: items.len(),
        example: items[0].id.clone(),
    })?;
    let profiles = load_profiles(path)?;
    let map: BTreeMap<String, ItemProfile> = profiles
        .into_iter()
        .map(|p| (p.item_id.clone(), p))
        .collect();
    let missing: Vec<&str> = items
        .iter()
        .filter(|i| !map.contains_key(&i.id))
        .map(|i| i.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(ExperimentError::MissingProfiles {
            missing: missing.len(),
            example: missing[0].to_string(),
        });
    }
    Ok(map)
}

/// Jitter multipliers shared by every policy in a run: one draw per item,
/// so raw and compressed paths of the same item see identical conditions.
fn jitter_multipliers(n: usize, jitter: f64, seed: u64) -> Vec<f64> {
    if jitter == 0.0 {
        return vec![1.0; n];
    }
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|_| 1.0 + rng.gen_range(-jitter..=jitter)).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_all_policies(
    config: &ExperimentConfig,
    items: &[CorpusItem],
    policies: &[PolicyKind],
    models: Option<&ModelSet>,
    profiles: Option<&BTreeMap<String, ItemProfile>>,
    schedule: &EpochSchedule,
    seed: u64,
    endpoint: Option<&str>,
    oracle_flips: &mut Option<usize>,
) -> Result<BTreeMap<PolicyKind, PolicyRun>, ExperimentError> {
    let mut runs = BTreeMap::new();
    // The raw baseline is always computed: speedup and data usage are
    // normalized against it even when it was not requested.
    let mut wanted: Vec<PolicyKind> = policies.to_vec();
    if !wanted.contains(&PolicyKind::Uncompressed) {
        wanted.push(PolicyKind::Uncompressed);
    }
    for policy in wanted {
        let run = match endpoint {
            None => run_policy_analytic(
                config, items, policy, models, profiles, schedule, seed, oracle_flips,
            )?,
            Some(endpoint) => {
                run_policy_live(config, items, policy, models, schedule, endpoint)?
            }
        };
        runs.insert(policy, run);
    }
    Ok(runs)
}

#[allow(clippy::too_many_arguments)]
fn run_policy_analytic(
    config: &ExperimentConfig,
    items: &[CorpusItem],
    policy: PolicyKind,
    models: Option<&ModelSet>,
    profiles: Option<&BTreeMap<String, ItemProfile>>,
    schedule: &EpochSchedule,
    seed: u64,
    oracle_flips: &mut Option<usize>,
) -> Result<PolicyRun, ExperimentError> {
    let profile_for = |item: &CorpusItem| {
        profiles
            .and_then(|m| m.get(&item.id))
            .ok_or_else(|| ExperimentError::MissingProfiles {
                missing: 1,
                example: item.id.clone(),
            })
    };
    let multipliers = jitter_multipliers(items.len(), config.jitter, seed);
    let mut estimator = EstimatorState::new(config.estimator)?;
    let mut outcomes = Vec::with_capacity(items.len());
    let mut actions = Vec::with_capacity(items.len());
    let mut reasons = Vec::with_capacity(items.len());

    for (idx, item) in items.iter().enumerate() {
        let link = schedule.epochs[schedule.epoch_for_item(idx)].link;
        let m = multipliers[idx];
        let raw = analytic_raw_outcome(item, &link, m);
        let (action, reason): (Action, Option<DecisionReason>) = match policy {
            PolicyKind::Uncompressed => (Action::SendRaw, None),
            PolicyKind::Compressed => (Action::Compress, None),
            PolicyKind::Selective => {
                let models = models.ok_or(ExperimentError::MissingModels)?;
                let model = models.model_for(&item.label);
                let decision = decide_for_size(
                    item.size,
                    &item.label,
                    model,
                    estimator.current_estimate(),
                    &config.policy,
                )?;
                (decision.action, Some(decision.reason))
            }
            PolicyKind::TimeOracle => {
                let profile = profile_for(item)?;
                let compressed = analytic_compressed_outcome(item, profile, &link, m);
                let measurement = dual_measurement(item, &raw, &compressed);
                let decision = time_oracle(&measurement);
                if let Some(flips) = oracle_flips {
                    let with_decompression = measurement.compressed_total
                        + profile.decompression_latency
                        < measurement.raw_total;
                    if (decision.action == Action::Compress) != with_decompression {
                        *flips += 1;
                    }
                }
                (decision.action, Some(decision.reason))
            }
        };
        let outcome = match action {
            Action::SendRaw => raw,
            Action::Compress => analytic_compressed_outcome(item, profile_for(item)?, &link, m),
        };
        if let Ok(sample) = ThroughputSample::new(outcome.bytes_on_wire, outcome.transmission_time)
        {
            estimator.add_sample(sample);
        }
        actions.push(outcome.action_taken);
        reasons.push(reason);
        outcomes.push(outcome);
    }
    Ok(PolicyRun {
        outcomes,
        actions,
        reasons,
    })
}

fn analytic_raw_outcome(item: &CorpusItem, link: &LinkSpec, multiplier: f64) -> TransferOutcome {
    let tx = transmission_time(item.size, link) * multiplier;
    TransferOutcome::new(item.id.clone(), Action::SendRaw, item.size, 0.0, 0.0, tx, 0.0)
}

fn analytic_compressed_outcome(
    item: &CorpusItem,
    profile: &ItemProfile,
    link: &LinkSpec,
    multiplier: f64,
) -> TransferOutcome {
    let tx = transmission_time(profile.compressed_size, link) * multiplier;
    TransferOutcome::new(
        item.id.clone(),
        Action::Compress,
        profile.compressed_size,
        0.0,
        profile.compression_latency,
        tx,
        profile.decompression_latency,
    )
}

fn dual_measurement(
    item: &CorpusItem,
    raw: &TransferOutcome,
    compressed: &TransferOutcome,
) -> ItemMeasurement {
    ItemMeasurement {
        item_id: item.id.clone(),
        raw_total: raw.total,
        compressed_total: compressed.total,
        raw_bytes: raw.bytes_on_wire,
        compressed_bytes: compressed.bytes_on_wire,
    }
}

fn run_policy_live(
    config: &ExperimentConfig,
    items: &[CorpusItem],
    policy: PolicyKind,
    models: Option<&ModelSet>,
    schedule: &EpochSchedule,
    endpoint: &str,
) -> Result<PolicyRun, ExperimentError> {
    let estimator = SharedEstimator::new(config.estimator)?;
    let mut outcomes = Vec::with_capacity(items.len());
    let mut actions = Vec::with_capacity(items.len());
    let mut reasons = Vec::with_capacity(items.len());

    for (idx, item) in items.iter().enumerate() {
        let link = schedule.epochs[schedule.epoch_for_item(idx)].link;
        let client = TransferClient::new(endpoint)
            .with_shaping(link)
            .with_estimator(estimator.clone());
        let payload = std::fs::read(&item.path).map_err(|source| ExperimentError::Io {
            path: item.path.clone(),
            source,
        })?;
        let transfer_item = TransferItem::new(item.id.clone(), item.label.clone(), payload);

        let (decision, decide_seconds, reason) = match policy {
            PolicyKind::Uncompressed => (Decision::forced_raw(), 0.0, None),
            PolicyKind::Compressed => (Decision::forced_compress(), 0.0, None),
            PolicyKind::Selective => {
                let models = models.ok_or(ExperimentError::MissingModels)?;
                let model = models.model_for(&item.label);
                let t = Instant::now();
                let decision = decide_for_size(
                    item.size,
                    &item.label,
                    model,
                    estimator.current_estimate(),
                    &config.policy,
                )?;
                let reason = decision.reason;
                (decision, t.elapsed().as_secs_f64(), Some(reason))
            }
            PolicyKind::TimeOracle => {
                let measurement =
                    live_dual_measurement(&client, &transfer_item, config.measure_reps)?;
                let decision = time_oracle(&measurement);
                let reason = decision.reason;
                (decision, 0.0, Some(reason))
            }
        };

        let mut outcome = client.send(&transfer_item, &decision)?;
        outcome.add_overhead(decide_seconds);
        actions.push(outcome.action_taken);
        reasons.push(reason);
        outcomes.push(outcome);
    }
    Ok(PolicyRun {
        outcomes,
        actions,
        reasons,
    })
}

/// Send one item both ways `reps` times each and keep the median totals.
/// The replayed transfer that follows is what lands in the outcome log; this
/// pass only informs the oracle's choice.
fn live_dual_measurement(
    client: &TransferClient,
    item: &TransferItem,
    reps: usize,
) -> Result<ItemMeasurement, ExperimentError> {
    let reps = reps.max(1);
    let mut raw_totals = Vec::with_capacity(reps);
    let mut compressed_totals = Vec::with_capacity(reps);
    let mut raw_bytes = 0;
    let mut compressed_bytes = 0;
    for _ in 0..reps {
        let raw = client.send(item, &Decision::forced_raw())?;
        raw_bytes = raw.bytes_on_wire;
        raw_totals.push(raw.total);
        let compressed = client.send(item, &Decision::forced_compress())?;
        compressed_bytes = compressed.bytes_on_wire;
        compressed_totals.push(compressed.total);
    }
    Ok(ItemMeasurement {
        item_id: item.id.clone(),
        raw_total: median(&mut raw_totals),
        compressed_total: median(&mut compressed_totals),
        raw_bytes,
        compressed_bytes,
    })
}

#[allow(clippy::too_many_arguments)]
fn collect_rows(
    config: &ExperimentConfig,
    dataset: &str,
    link_label: &str,
    items: &[CorpusItem],
    policies: &[PolicyKind],
    runs: &BTreeMap<PolicyKind, PolicyRun>,
    rows: &mut Vec<ReportRow>,
    outcome_rows: &mut Vec<OutcomeRow>,
    schedule: Option<&EpochSchedule>,
) {
    let baseline = &runs[&PolicyKind::Uncompressed];
    let oracle_actions = runs.get(&PolicyKind::TimeOracle).map(|r| r.actions.as_slice());

    for policy in policies {
        let run = &runs[policy];
        let stats = match (*policy, oracle_actions) {
            (PolicyKind::Selective, Some(oracle)) => confusion(&run.actions, oracle).ok(),
            _ => None,
        };
        let frac = breakdown(&run.outcomes).unwrap_or(crate::metrics::LatencyBreakdown {
            overhead: 0.0,
            compression: 0.0,
            transmission: 0.0,
        });
        let group_speedups = per_group_speedups(
            &run.outcomes,
            &baseline.outcomes,
            config.group_size,
        );
        let compressed_count = run
            .actions
            .iter()
            .filter(|a| **a == Action::Compress)
            .count();
        rows.push(ReportRow {
            policy: *policy,
            dataset: dataset.to_string(),
            link: link_label.to_string(),
            items: items.len(),
            total_seconds: total_time(&run.outcomes),
            wire_bytes: total_wire_bytes(&run.outcomes),
            speedup_vs_uncompressed: crate::metrics::speedup(&run.outcomes, &baseline.outcomes),
            speedup_stderr: stderr(&group_speedups),
            data_usage_vs_uncompressed: crate::metrics::data_usage(
                &run.outcomes,
                &baseline.outcomes,
            ),
            frac_overhead: frac.overhead,
            frac_compression: frac.compression,
            frac_transmission: frac.transmission,
            decompression_seconds: run.outcomes.iter().map(|o| o.decompression_time).sum(),
            compressed_fraction: compressed_count as f64 / items.len() as f64,
            success_rate: stats.map(|s| s.success_rate),
            false_positive_rate: stats.map(|s| s.false_positive_rate),
            false_negative_rate: stats.map(|s| s.false_negative_rate),
            group_speedups,
        });

        for (idx, outcome) in run.outcomes.iter().enumerate() {
            outcome_rows.push(OutcomeRow {
                policy: *policy,
                link: link_label.to_string(),
                epoch: schedule.map(|s| s.epoch_for_item(idx)),
                item_id: outcome.item_id.clone(),
                label: items[idx].label.to_string(),
                group: idx / config.group_size,
                original_size: items[idx].size,
                action: outcome.action_taken,
                reason: run.reasons[idx],
                bytes_on_wire: outcome.bytes_on_wire,
                overhead: outcome.overhead,
                compression_time: outcome.compression_time,
                transmission_time: outcome.transmission_time,
                decompression_time: outcome.decompression_time,
                total: outcome.total,
                codec_fallback: outcome.codec_fallback,
            });
        }
    }
}

fn per_group_speedups(
    policy: &[TransferOutcome],
    baseline: &[TransferOutcome],
    group_size: usize,
) -> Vec<f64> {
    policy
        .chunks(group_size)
        .zip(baseline.chunks(group_size))
        .map(|(p, b)| total_time(b) / total_time(p))
        .collect()
}

fn stderr(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (variance / n as f64).sqrt()
}

fn write_outputs(
    config: &ExperimentConfig,
    resolved: &ResolvedConfig,
    report: &ExperimentReport,
    outcome_rows: &[OutcomeRow],
) -> Result<(), ExperimentError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| ExperimentError::Io {
            path: path.clone(),
            source,
        }
    };

    let outcomes_path = config.out_dir.join("outcomes.jsonl");
    {
        let file = std::fs::File::create(&outcomes_path).map_err(io_err(&outcomes_path))?;
        let mut writer = std::io::BufWriter::new(file);
        for row in outcome_rows {
            serde_json::to_writer(&mut writer, row).expect("outcome row serializes");
            writer.write_all(b"\n").map_err(io_err(&outcomes_path))?;
        }
        writer.flush().map_err(io_err(&outcomes_path))?;
    }

    let csv_path = config.out_dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(report)).map_err(io_err(&csv_path))?;

    let json_path = config.out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    if !report.epoch_rows.is_empty() {
        let epochs_path = config.out_dir.join("epochs.csv");
        std::fs::write(&epochs_path, epochs_csv(&report.epoch_rows))
            .map_err(io_err(&epochs_path))?;
    }

    let config_path = config.out_dir.join("config_resolved.json");
    let mut resolved_json: serde_json::Value =
        serde_json::to_value(resolved).expect("config serializes");
    resolved_json["config_hash"] = serde_json::Value::String(report.meta.config_hash.clone());
    resolved_json["out_dir"] = serde_json::Value::String(config.out_dir.display().to_string());
    let text = serde_json::to_string_pretty(&resolved_json).expect("config serializes");
    std::fs::write(&config_path, text + "\n").map_err(io_err(&config_path))?;

    Ok(())
}

fn fmt_time(x: f64) -> String {
    format!("{x:.9}")
}

fn fmt_frac(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_frac).unwrap_or_default()
}

/// Fixed column set; every row embeds the config identity so a CSV can be
/// traced back to its settings without the JSON.
pub const REPORT_CSV_HEADER: &str = "policy,dataset,link,items,total_seconds,wire_bytes,\
speedup_vs_uncompressed,speedup_stderr,data_usage,frac_overhead,frac_compression,\
frac_transmission,decompression_seconds,compressed_fraction,success_rate,\
false_positive_rate,false_negative_rate,config_hash,codec_id,min_size_bytes,\
excluded_labels,estimator_decay,estimator_prior_bps,seed";

fn report_csv(report: &ExperimentReport) -> String {
    let meta = &report.meta;
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.policy,
            row.dataset,
            row.link,
            row.items,
            fmt_time(row.total_seconds),
            row.wire_bytes,
            fmt_frac(row.speedup_vs_uncompressed),
            fmt_frac(row.speedup_stderr),
            fmt_frac(row.data_usage_vs_uncompressed),
            fmt_frac(row.frac_overhead),
            fmt_frac(row.frac_compression),
            fmt_frac(row.frac_transmission),
            fmt_time(row.decompression_seconds),
            fmt_frac(row.compressed_fraction),
            fmt_opt(row.success_rate),
            fmt_opt(row.false_positive_rate),
            fmt_opt(row.false_negative_rate),
            meta.config_hash,
            meta.codec_id,
            meta.min_size_bytes,
            meta.excluded_labels.join("|"),
            fmt_frac(meta.estimator_decay),
            fmt_frac(meta.estimator_prior_bps),
            meta.seed,
        ));
    }
    out
}

fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("policy,epoch,link_mbps,items,compressed_fraction\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.policy,
            row.epoch,
            fmt_frac(row.link_mbps),
            row.items,
            fmt_frac(row.compressed_fraction),
        ));
    }
    out
}
