//! End-to-end pipeline tests through the library API: corpus generation,
//! training, profile capture, experiment runs in both execution modes, and
//! the contracts between them (dominance, determinism, shaped/analytic
//! agreement, prerequisite errors).

use std::path::{Path, PathBuf};

use selzip::corpus::{generate_corpus, read_manifest, ClassSpec, CorpusSpec, PayloadClass};
use selzip::experiment::{
    capture_profiles, run_experiment, save_profiles, ExperimentConfig, ExperimentError,
    LiveConfig, RunMode,
};
use selzip::link::LinkSpec;
use selzip::metrics::PolicyKind;
use selzip::training::train_corpus;
use selzip::transfer::{serve, TransferClient};
use selzip::{DataTypeLabel, Decision, DeflateCodec, TransferItem};

fn label(name: &str) -> DataTypeLabel {
    DataTypeLabel::new(name).unwrap()
}

fn mixed_spec(seed: u64, scale: usize) -> CorpusSpec {
    CorpusSpec {
        seed,
        classes: vec![
            ClassSpec {
                label: label("text"),
                class: PayloadClass::Text,
                count: 3 * scale,
                min_size: 8_192,
                max_size: 131_072,
            },
            ClassSpec {
                label: label("image"),
                class: PayloadClass::RandomBytes,
                count: scale,
                min_size: 8_192,
                max_size: 65_536,
            },
            ClassSpec {
                label: label("random"),
                class: PayloadClass::RandomBytes,
                count: scale,
                min_size: 8_192,
                max_size: 65_536,
            },
            ClassSpec {
                label: label("text"),
                class: PayloadClass::TinyOpaque,
                count: scale,
                min_size: 64,
                max_size: 2_048,
            },
        ],
    }
}

/// Generate, train, and profile a corpus under `dir`; returns the manifest,
/// model, and profile paths.
fn prepare(dir: &Path, seed: u64, scale: usize) -> (PathBuf, PathBuf, PathBuf) {
    let manifest = generate_corpus(&mixed_spec(seed, scale), &dir.join("corpus")).unwrap();
    let items = read_manifest(&manifest).unwrap();
    let codec = DeflateCodec::default();
    let models_path = dir.join("models.json");
    train_corpus(&items, &codec, 1).unwrap().save(&models_path).unwrap();
    let profiles_path = dir.join("profiles.jsonl");
    save_profiles(&profiles_path, &capture_profiles(&items, &codec, 1).unwrap()).unwrap();
    (manifest, models_path, profiles_path)
}

fn base_config(manifest: &Path, models: &Path, profiles: &Path, out: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(manifest, out);
    config.models = Some(models.to_path_buf());
    config.profiles = Some(profiles.to_path_buf());
    config
}

#[test]
fn analytic_pipeline_reports_all_policies_and_oracle_dominates() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, profiles) = prepare(dir.path(), 21, 6);
    let mut config = base_config(&manifest, &models, &profiles, &dir.path().join("out"));
    config.levels_mbps = vec![2.0, 10.0];
    config.seed = 5;
    let report = run_experiment(&config).unwrap();

    assert_eq!(report.rows.len(), 8, "4 policies x 2 levels");
    for level in ["2", "10"] {
        let total = |kind: PolicyKind| {
            report
                .rows
                .iter()
                .find(|r| r.link == level && r.policy == kind)
                .unwrap()
                .total_seconds
        };
        let oracle = total(PolicyKind::TimeOracle);
        assert!(oracle <= total(PolicyKind::Uncompressed), "level {level}");
        assert!(oracle <= total(PolicyKind::Compressed), "level {level}");
        assert!(oracle <= total(PolicyKind::Selective), "level {level}");
    }

    let selective = report
        .rows
        .iter()
        .find(|r| r.link == "2" && r.policy == PolicyKind::Selective)
        .unwrap();
    assert!(selective.success_rate.is_some());
    assert!(selective.data_usage_vs_uncompressed < 1.0);
    let csum = selective.frac_overhead + selective.frac_compression + selective.frac_transmission;
    assert!((csum - 1.0).abs() < 1e-9);

    // Every configured output lands on disk.
    for file in ["outcomes.jsonl", "report.csv", "report.json", "config_resolved.json"] {
        assert!(dir.path().join("out").join(file).exists(), "{file} missing");
    }
    let outcome_lines = std::fs::read_to_string(dir.path().join("out/outcomes.jsonl"))
        .unwrap()
        .lines()
        .count();
    let items = read_manifest(&manifest).unwrap().len();
    assert_eq!(outcome_lines, 4 * 2 * items);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, profiles) = prepare(dir.path(), 33, 4);
    let run = |out: &Path| {
        let mut config = base_config(&manifest, &models, &profiles, out);
        config.levels_mbps = vec![2.0, 5.0];
        config.jitter = 0.1;
        config.seed = 77;
        run_experiment(&config).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a.meta.config_hash, b.meta.config_hash);
    for file in ["report.csv", "outcomes.jsonl", "report.json"] {
        let fa = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let fb = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
}

#[test]
fn different_seeds_change_jittered_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, profiles) = prepare(dir.path(), 33, 4);
    let run = |out: &Path, seed: u64| {
        let mut config = base_config(&manifest, &models, &profiles, out);
        config.levels_mbps = vec![2.0];
        config.jitter = 0.1;
        config.seed = seed;
        run_experiment(&config).unwrap()
    };
    let a = run(&dir.path().join("a"), 1);
    let b = run(&dir.path().join("b"), 2);
    assert_ne!(
        a.rows[0].total_seconds, b.rows[0].total_seconds,
        "different seeds should draw different jitter"
    );
}

#[test]
fn dynamic_mode_writes_schedule_and_epoch_series() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, profiles) = prepare(dir.path(), 8, 5);
    let mut config = base_config(&manifest, &models, &profiles, &dir.path().join("out"));
    config.levels_mbps = vec![2.0, 10.0];
    config.mode = RunMode::Dynamic { partitions: 5 };
    config.seed = 13;
    let report = run_experiment(&config).unwrap();

    assert!(dir.path().join("out/schedule.json").exists());
    assert!(dir.path().join("out/epochs.csv").exists());
    // 4 policies x 5 epochs.
    assert_eq!(report.epoch_rows.len(), 20);
    let items: usize = report.epoch_rows.iter().filter(|r| r.policy == PolicyKind::Selective).map(|r| r.items).sum();
    assert_eq!(items, read_manifest(&manifest).unwrap().len());
    for row in &report.rows {
        assert_eq!(row.link, "dynamic");
    }
}

#[test]
fn sequence_mode_applies_levels_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, profiles) = prepare(dir.path(), 9, 5);
    let mut config = base_config(&manifest, &models, &profiles, &dir.path().join("out"));
    config.levels_mbps = vec![10.0, 2.0];
    config.mode = RunMode::Sequence;
    let report = run_experiment(&config).unwrap();
    let selective: Vec<_> = report
        .epoch_rows
        .iter()
        .filter(|r| r.policy == PolicyKind::Selective)
        .collect();
    assert_eq!(selective.len(), 2);
    assert_eq!(selective[0].link_mbps, 10.0);
    assert_eq!(selective[1].link_mbps, 2.0);
    assert!(!dir.path().join("out/schedule.json").exists());
}

#[test]
fn selective_without_models_is_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _, profiles) = prepare(dir.path(), 14, 2);
    let mut config = ExperimentConfig::new(&manifest, dir.path().join("out"));
    config.profiles = Some(profiles);
    let err = run_experiment(&config).unwrap_err();
    assert!(matches!(err, ExperimentError::MissingModels), "{err}");
}

#[test]
fn compressing_policies_without_profiles_are_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, _) = prepare(dir.path(), 15, 2);
    let mut config = ExperimentConfig::new(&manifest, dir.path().join("out"));
    config.models = Some(models);
    config.policies = vec![PolicyKind::Uncompressed, PolicyKind::Compressed];
    let err = run_experiment(&config).unwrap_err();
    assert!(matches!(err, ExperimentError::MissingProfiles { .. }), "{err}");
    let message = err.to_string();
    assert!(message.contains("oracle"), "error should point at the oracle step: {message}");
}

#[test]
fn raw_only_analytic_run_needs_no_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _, _) = prepare(dir.path(), 16, 2);
    let mut config = ExperimentConfig::new(&manifest, dir.path().join("out"));
    config.policies = vec![PolicyKind::Uncompressed];
    let report = run_experiment(&config).unwrap();
    assert_eq!(report.rows.len(), 3, "one raw row per default level");
    assert!(report.meta.oracle_flips_with_decompression.is_none());
}

#[test]
fn shaped_transfer_time_agrees_with_the_analytic_link() {
    // 1 MiB raw at 2 MB/s: the analytic link says 0.524 s; the shaped
    // socket path must land within 10%.
    let payload_len = 1_048_576u64;
    let rate = 2_000_000.0;
    let spec = LinkSpec::new(rate, 0.0, 0.0).unwrap();
    let analytic = selzip::link::transmission_time(payload_len, &spec);

    let server = serve("127.0.0.1:0").unwrap();
    let client = TransferClient::new(server.endpoint()).with_shaping(spec);
    let item = TransferItem::new("agree-1", label("blob"), vec![0x5A; payload_len as usize]);
    let outcome = client.send(&item, &Decision::forced_raw()).unwrap();
    server.shutdown();

    let relative = (outcome.transmission_time - analytic).abs() / analytic;
    assert!(
        relative < 0.10,
        "shaped {} vs analytic {analytic} ({:.1}% off)",
        outcome.transmission_time,
        relative * 100.0
    );
}

#[test]
fn live_experiment_over_loopback_matches_analytic_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, models, profiles) = prepare(dir.path(), 41, 3);

    // Analytic pass for reference decisions at the same level.
    let mut analytic = base_config(&manifest, &models, &profiles, &dir.path().join("a"));
    analytic.levels_mbps = vec![16.0];
    analytic.policies = vec![PolicyKind::Uncompressed, PolicyKind::Selective];
    let analytic_report = run_experiment(&analytic).unwrap();

    let mut live = base_config(&manifest, &models, &profiles, &dir.path().join("l"));
    live.levels_mbps = vec![16.0];
    live.policies = vec![PolicyKind::Uncompressed, PolicyKind::Selective];
    live.live = Some(LiveConfig::default());
    let live_report = run_experiment(&live).unwrap();

    let frac = |report: &selzip::experiment::ExperimentReport| {
        report
            .rows
            .iter()
            .find(|r| r.policy == PolicyKind::Selective)
            .unwrap()
            .compressed_fraction
    };
    // Same corpus, same models; the live estimator sees the shaped rate, so
    // the compressed fraction should land close to the analytic run's.
    let (fa, fl) = (frac(&analytic_report), frac(&live_report));
    assert!(
        (fa - fl).abs() <= 0.15,
        "analytic compressed fraction {fa} vs live {fl}"
    );
    // Live runs measure decision time; overhead must be accounted and small.
    let selective_live = live_report
        .rows
        .iter()
        .find(|r| r.policy == PolicyKind::Selective)
        .unwrap();
    assert!(selective_live.frac_overhead < 0.05);
}
