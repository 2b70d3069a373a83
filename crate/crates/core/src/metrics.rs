//! Best-possible baseline and aggregate experiment metrics.
//!
//! The time oracle answers "should this item have been compressed?" from
//! dual measurements: each item timed both raw and compressed under the same
//! link conditions, compress winning only on a strict improvement. Comparing
//! a policy's decisions against the oracle yields success and error rates;
//! comparing totals yields speedups and normalized data usage. Everything
//! here is pure aggregation over finished runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::EpochSchedule;
use crate::policy::{Action, Decision, DecisionReason};
use crate::transfer::TransferOutcome;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("decision lists differ in length: {selective} vs {oracle}")]
    LengthMismatch { selective: usize, oracle: usize },
    #[error("no items to aggregate")]
    NoItems,
}

/// Transfer policies the harness can replay over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Send everything raw.
    Uncompressed,
    /// Compress everything.
    Compressed,
    /// The decision engine.
    Selective,
    /// Hindsight-optimal per-item choice from dual measurements.
    TimeOracle,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Uncompressed => "uncompressed",
            PolicyKind::Compressed => "compressed",
            PolicyKind::Selective => "selective",
            PolicyKind::TimeOracle => "oracle",
        })
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uncompressed" | "raw" => Ok(PolicyKind::Uncompressed),
            "compressed" => Ok(PolicyKind::Compressed),
            "selective" => Ok(PolicyKind::Selective),
            "oracle" | "timeoracle" | "time-oracle" => Ok(PolicyKind::TimeOracle),
            other => Err(format!(
                "unknown policy `{other}` (expected uncompressed, compressed, selective, oracle)"
            )),
        }
    }
}

/// Both sides of one item's dual measurement under identical link
/// conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeasurement {
    pub item_id: String,
    pub raw_total: f64,
    pub compressed_total: f64,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
}

/// Hindsight-optimal choice: compress only when it strictly beat raw.
pub fn time_oracle(m: &ItemMeasurement) -> Decision {
    let (action, reason) = if m.compressed_total < m.raw_total {
        (Action::Compress, DecisionReason::TradeoffFavorsCompress)
    } else {
        (Action::SendRaw, DecisionReason::TradeoffFavorsRaw)
    };
    Decision {
        action,
        reason,
        predicted_compressed_size: None,
        predicted_compression_latency: None,
    }
}

pub fn total_time(outcomes: &[TransferOutcome]) -> f64 {
    outcomes.iter().map(|o| o.total).sum()
}

pub fn total_wire_bytes(outcomes: &[TransferOutcome]) -> u64 {
    outcomes.iter().map(|o| o.bytes_on_wire).sum()
}

/// Aggregate speedup of `policy` relative to `baseline` over the same items:
/// baseline time divided by policy time. Greater than 1 means faster.
pub fn speedup(policy: &[TransferOutcome], baseline: &[TransferOutcome]) -> f64 {
    total_time(baseline) / total_time(policy)
}

/// Bytes on the wire under `policy` as a fraction of the baseline's bytes.
pub fn data_usage(policy: &[TransferOutcome], baseline: &[TransferOutcome]) -> f64 {
    total_wire_bytes(policy) as f64 / total_wire_bytes(baseline) as f64
}

/// Agreement of a policy's decisions with the oracle's.
///
/// A false positive compressed an item the oracle would send raw; a false
/// negative sent raw an item the oracle would compress. The three rates
/// partition the items, so they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub success_rate: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
}

pub fn confusion(selective: &[Action], oracle: &[Action]) -> Result<ConfusionStats, MetricsError> {
    if selective.len() != oracle.len() {
        return Err(MetricsError::LengthMismatch {
            selective: selective.len(),
            oracle: oracle.len(),
        });
    }
    if selective.is_empty() {
        return Err(MetricsError::NoItems);
    }
    let mut success = 0usize;
    let mut false_positive = 0usize;
    let mut false_negative = 0usize;
    for (s, o) in selective.iter().zip(oracle) {
        match (s, o) {
            (a, b) if a == b => success += 1,
            (Action::Compress, Action::SendRaw) => false_positive += 1,
            (Action::SendRaw, Action::Compress) => false_negative += 1,
            _ => unreachable!("two-action decision space"),
        }
    }
    let n = selective.len() as f64;
    Ok(ConfusionStats {
        success_rate: success as f64 / n,
        false_positive_rate: false_positive as f64 / n,
        false_negative_rate: false_negative as f64 / n,
    })
}

/// Where a run's client time went, as fractions of the aggregate total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub overhead: f64,
    pub compression: f64,
    pub transmission: f64,
}

pub fn breakdown(outcomes: &[TransferOutcome]) -> Result<LatencyBreakdown, MetricsError> {
    let total = total_time(outcomes);
    if outcomes.is_empty() || total <= 0.0 {
        return Err(MetricsError::NoItems);
    }
    Ok(LatencyBreakdown {
        overhead: outcomes.iter().map(|o| o.overhead).sum::<f64>() / total,
        compression: outcomes.iter().map(|o| o.compression_time).sum::<f64>() / total,
        transmission: outcomes.iter().map(|o| o.transmission_time).sum::<f64>() / total,
    })
}

/// Fraction of items compressed within each epoch of a dynamic run.
/// `actions` must be in corpus order, matching the schedule's partitions.
pub fn compressed_fraction_series(actions: &[Action], schedule: &EpochSchedule) -> Vec<f64> {
    (0..schedule.epochs.len())
        .map(|e| {
            let range = schedule.partition_range(e);
            if range.is_empty() {
                return 0.0;
            }
            let compressed = actions[range.clone()]
                .iter()
                .filter(|a| **a == Action::Compress)
                .count();
            compressed as f64 / range.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{EpochSchedule, LinkSpec};

    fn measurement(raw: f64, compressed: f64) -> ItemMeasurement {
        ItemMeasurement {
            item_id: "m".to_string(),
            raw_total: raw,
            compressed_total: compressed,
            raw_bytes: 1000,
            compressed_bytes: 400,
        }
    }

    fn outcome(total_parts: (f64, f64, f64), bytes: u64) -> TransferOutcome {
        let (overhead, compression, transmission) = total_parts;
        TransferOutcome::new("o", Action::SendRaw, bytes, overhead, compression, transmission, 0.0)
    }

    #[test]
    fn oracle_compresses_only_strict_wins() {
        assert_eq!(time_oracle(&measurement(2.0, 1.2)).action, Action::Compress);
        assert_eq!(time_oracle(&measurement(1.5, 2.0)).action, Action::SendRaw);
        assert_eq!(time_oracle(&measurement(1.0, 1.0)).action, Action::SendRaw);
    }

    #[test]
    fn speedup_is_baseline_over_policy_time() {
        let baseline = vec![outcome((0.0, 0.0, 6.0), 100), outcome((0.0, 0.0, 4.0), 100)];
        let policy = vec![outcome((0.0, 1.0, 1.5), 40), outcome((0.0, 0.5, 1.0), 40)];
        assert!((speedup(&policy, &baseline) - 2.5).abs() < 1e-12);
        assert_eq!(speedup(&baseline, &baseline), 1.0);
    }

    #[test]
    fn data_usage_is_wire_bytes_ratio() {
        let baseline = vec![outcome((0.0, 0.0, 1.0), 1000), outcome((0.0, 0.0, 1.0), 3000)];
        let policy = vec![outcome((0.0, 0.1, 0.3), 250), outcome((0.0, 0.1, 0.7), 750)];
        assert_eq!(data_usage(&policy, &baseline), 0.25);
    }

    #[test]
    fn confusion_identical_lists_is_full_success() {
        let actions = vec![Action::Compress, Action::SendRaw, Action::Compress];
        let stats = confusion(&actions, &actions).unwrap();
        assert_eq!(stats.success_rate, 1.0);
        assert_eq!(stats.false_positive_rate, 0.0);
        assert_eq!(stats.false_negative_rate, 0.0);
    }

    #[test]
    fn confusion_separates_error_directions() {
        let selective = vec![Action::Compress, Action::SendRaw, Action::Compress, Action::SendRaw];
        let oracle = vec![Action::SendRaw, Action::Compress, Action::Compress, Action::SendRaw];
        let stats = confusion(&selective, &oracle).unwrap();
        assert_eq!(stats.success_rate, 0.5);
        assert_eq!(stats.false_positive_rate, 0.25);
        assert_eq!(stats.false_negative_rate, 0.25);
        let sum = stats.success_rate + stats.false_positive_rate + stats.false_negative_rate;
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_rejects_mismatched_lengths() {
        assert!(matches!(
            confusion(&[Action::Compress], &[]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(confusion(&[], &[]), Err(MetricsError::NoItems)));
    }

    #[test]
    fn breakdown_fractions_sum_to_one() {
        let outcomes = vec![
            outcome((0.001, 0.1, 0.5), 100),
            outcome((0.002, 0.0, 1.5), 200),
            outcome((0.0005, 0.3, 0.2), 300),
        ];
        let b = breakdown(&outcomes).unwrap();
        assert!((b.overhead + b.compression + b.transmission - 1.0).abs() < 1e-9);
        assert!(b.transmission > b.overhead);
    }

    #[test]
    fn breakdown_needs_nonzero_time() {
        assert!(breakdown(&[]).is_err());
    }

    #[test]
    fn series_tracks_per_epoch_compression() {
        let links = [LinkSpec::from_mbps(10.0).unwrap(), LinkSpec::from_mbps(2.0).unwrap()];
        let schedule = EpochSchedule::from_levels(&links, 6).unwrap();
        let actions = vec![
            Action::SendRaw,
            Action::SendRaw,
            Action::Compress,
            Action::Compress,
            Action::Compress,
            Action::SendRaw,
        ];
        let series = compressed_fraction_series(&actions, &schedule);
        assert_eq!(series.len(), 2);
        assert!((series[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((series[1] - 2.0 / 3.0).abs() < 1e-12);
    }
}
