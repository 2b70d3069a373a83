//! Selective compression for constrained uplinks.
//!
//! Compressing before transmit saves time only when the link is slow relative
//! to the CPU; on fast links the compression latency dominates and raw sends
//! win. This crate makes that call per item: per-type linear models predict
//! compressed size and compression latency, an EWMA tracker estimates current
//! throughput from completed transfers, and [`policy::decide`] compares the
//! predicted compressed-path time against the raw-path time.
//!
//! Around the decision engine sits an evaluation harness: synthetic corpus
//! generation ([`corpus`]), model training ([`training`]), emulated and shaped
//! links ([`link`]), a client/server transfer path ([`transfer`]), a
//! best-possible time oracle with aggregate metrics ([`metrics`]), and an
//! experiment runner that ties them together ([`experiment`]).

pub mod codec;
pub mod corpus;
pub mod estimator;
pub mod experiment;
pub mod link;
pub mod metrics;
pub mod policy;
pub mod training;
pub mod transfer;

pub use codec::{Codec, CodecError, DeflateCodec, IdentityCodec};
pub use estimator::{EstimatorConfig, EstimatorState, SharedEstimator, ThroughputSample};
pub use link::{AnalyticLink, EpochSchedule, LinkSpec};
pub use metrics::{ItemMeasurement, PolicyKind};
pub use policy::{
    Action, DataTypeLabel, Decision, DecisionReason, PolicyConfig, TransferItem, TypeModel,
};
pub use training::{ModelSet, TrainingSample};
pub use transfer::TransferOutcome;
