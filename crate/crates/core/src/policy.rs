//! Per-item compress-or-send-raw decision.
//!
//! The decision runs in two steps. A cheap gate first rules out items that
//! are too small to be worth the codec call and items whose type is already
//! compressed (images, audio, video). Everything else gets the tradeoff test:
//! compress exactly when the predicted compressed transfer plus the predicted
//! compression latency beats sending the original bytes at the current
//! throughput estimate. Ties favor sending raw, since compression then buys
//! nothing and costs CPU.
//!
//! Per-type models are linear: compressed size is the original size divided
//! by a measured compressibility ratio, and compression latency is an affine
//! function of the original size.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid model for `{label}`: {reason}")]
    InvalidModel { label: String, reason: String },
    #[error("throughput must be positive and finite, got {0}")]
    InvalidThroughput(f64),
    #[error("data type label must be non-empty")]
    EmptyLabel,
}

/// Normalized data-type name ("text", "image", ...). Lowercased and trimmed
/// on construction so lookups and exclusion checks are case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DataTypeLabel(String);

impl DataTypeLabel {
    pub fn new(name: &str) -> Result<Self, PolicyError> {
        let normalized = name.trim().to_ascii_lowercase();
        if normalized.is_empty() {
            return Err(PolicyError::EmptyLabel);
        }
        Ok(Self(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DataTypeLabel {
    type Error = PolicyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(&value)
    }
}

impl From<DataTypeLabel> for String {
    fn from(label: DataTypeLabel) -> String {
        label.0
    }
}

impl fmt::Display for DataTypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Linear cost model for one data type.
///
/// `alpha` is seconds of compression latency per byte, `beta` the fixed
/// per-call latency in seconds, and `compressibility` the original/compressed
/// size ratio. Values below 1 mean the codec expands that type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeModel {
    pub label: DataTypeLabel,
    pub alpha: f64,
    pub beta: f64,
    pub compressibility: f64,
}

impl TypeModel {
    pub fn new(
        label: DataTypeLabel,
        alpha: f64,
        beta: f64,
        compressibility: f64,
    ) -> Result<Self, PolicyError> {
        let model = Self {
            label,
            alpha,
            beta,
            compressibility,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let invalid = |reason: &str| PolicyError::InvalidModel {
            label: self.label.to_string(),
            reason: reason.to_string(),
        };
        if !self.compressibility.is_finite() || self.compressibility <= 0.0 {
            return Err(invalid("compressibility must be finite and positive"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(invalid("alpha must be finite and non-negative"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(invalid("beta must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One payload awaiting a transfer decision.
#[derive(Debug, Clone)]
pub struct TransferItem {
    pub id: String,
    pub label: DataTypeLabel,
    pub payload: Vec<u8>,
}

impl TransferItem {
    pub fn new(id: impl Into<String>, label: DataTypeLabel, payload: Vec<u8>) -> Self {
        Self {
            id: id.into(),
            label,
            payload,
        }
    }

    pub fn size(&self) -> u64 {
        self.payload.len() as u64
    }
}

/// Tunables for the decision gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Items strictly smaller than this are always sent raw.
    pub min_size_bytes: u64,
    /// Types assumed precompressed; never re-compressed.
    pub excluded_labels: BTreeSet<DataTypeLabel>,
    /// Throughput assumed when no estimate is available, bytes/second.
    pub default_throughput: f64,
}

pub const DEFAULT_MIN_SIZE_BYTES: u64 = 4096;
pub const DEFAULT_THROUGHPUT_BPS: f64 = 625_000.0;

impl Default for PolicyConfig {
    fn default() -> Self {
        let excluded = ["image", "audio", "video"]
            .iter()
            .map(|l| DataTypeLabel::new(l).expect("static label"))
            .collect();
        Self {
            min_size_bytes: DEFAULT_MIN_SIZE_BYTES,
            excluded_labels: excluded,
            default_throughput: DEFAULT_THROUGHPUT_BPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Compress,
    SendRaw,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Compress => "compress",
            Action::SendRaw => "send_raw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    BelowSizeThreshold,
    ExcludedType,
    TradeoffFavorsCompress,
    TradeoffFavorsRaw,
}

impl fmt::Display for DecisionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionReason::BelowSizeThreshold => "below_size_threshold",
            DecisionReason::ExcludedType => "excluded_type",
            DecisionReason::TradeoffFavorsCompress => "tradeoff_favors_compress",
            DecisionReason::TradeoffFavorsRaw => "tradeoff_favors_raw",
        })
    }
}

/// Outcome of a decision. The predicted fields are populated only when the
/// tradeoff was actually evaluated, i.e. the gate did not fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub reason: DecisionReason,
    pub predicted_compressed_size: Option<u64>,
    pub predicted_compression_latency: Option<f64>,
}

impl Decision {
    fn gated(reason: DecisionReason) -> Self {
        Self {
            action: Action::SendRaw,
            reason,
            predicted_compressed_size: None,
            predicted_compression_latency: None,
        }
    }

    /// Raw send that skipped the decision entirely (fixed policies, codec
    /// fallback paths).
    pub fn forced_raw() -> Self {
        Self::gated(DecisionReason::TradeoffFavorsRaw)
    }

    /// Unconditional compress used by the compress-everything policy.
    pub fn forced_compress() -> Self {
        Self {
            action: Action::Compress,
            reason: DecisionReason::TradeoffFavorsCompress,
            predicted_compressed_size: None,
            predicted_compression_latency: None,
        }
    }
}

/// Predicted compressed size in whole bytes: original size divided by the
/// type's compressibility ratio, rounded to nearest.
pub fn predict_compressed_size(size: u64, model: &TypeModel) -> Result<u64, PolicyError> {
    model.validate()?;
    let predicted = (size as f64 / model.compressibility).round();
    Ok(predicted.max(0.0) as u64)
}

/// Predicted compression latency in seconds for an item of `size` bytes.
pub fn predict_compression_latency(size: u64, model: &TypeModel) -> Result<f64, PolicyError> {
    model.validate()?;
    Ok(model.alpha * size as f64 + model.beta)
}

/// First decision step. Returns the forced raw decision when the item is
/// below the size cutoff or of an excluded type, `None` when the tradeoff
/// should run.
pub fn threshold_gate(item: &TransferItem, config: &PolicyConfig) -> Option<Decision> {
    gate_for(item.size(), &item.label, config)
}

/// Gate on (size, label) without needing the payload in memory.
pub fn gate_for(size: u64, label: &DataTypeLabel, config: &PolicyConfig) -> Option<Decision> {
    if size < config.min_size_bytes {
        return Some(Decision::gated(DecisionReason::BelowSizeThreshold));
    }
    if config.excluded_labels.contains(label) {
        return Some(Decision::gated(DecisionReason::ExcludedType));
    }
    None
}

/// Full decision: gate, then compare the predicted compressed-path time
/// (compressed bytes over the wire plus compression latency) against the
/// raw-path time at the given throughput. Strictly-less wins for compression;
/// ties send raw.
pub fn decide(
    item: &TransferItem,
    model: &TypeModel,
    throughput_bps: f64,
    config: &PolicyConfig,
) -> Result<Decision, PolicyError> {
    decide_for_size(item.size(), &item.label, model, throughput_bps, config)
}

/// Same as [`decide`] but on (size, label), for callers replaying metadata.
pub fn decide_for_size(
    size: u64,
    label: &DataTypeLabel,
    model: &TypeModel,
    throughput_bps: f64,
    config: &PolicyConfig,
) -> Result<Decision, PolicyError> {
    if !throughput_bps.is_finite() || throughput_bps <= 0.0 {
        return Err(PolicyError::InvalidThroughput(throughput_bps));
    }
    if let Some(decision) = gate_for(size, label, config) {
        return Ok(decision);
    }
    let compressed_size = predict_compressed_size(size, model)?;
    let compression_latency = predict_compression_latency(size, model)?;
    let compressed_path = compressed_size as f64 / throughput_bps + compression_latency;
    let raw_path = size as f64 / throughput_bps;
    let (action, reason) = if compressed_path < raw_path {
        (Action::Compress, DecisionReason::TradeoffFavorsCompress)
    } else {
        (Action::SendRaw, DecisionReason::TradeoffFavorsRaw)
    };
    Ok(Decision {
        action,
        reason,
        predicted_compressed_size: Some(compressed_size),
        predicted_compression_latency: Some(compression_latency),
    })
}
