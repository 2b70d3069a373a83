//! Throughput tracking from completed transfers.
//!
//! Every finished send yields one (bytes, elapsed) sample; the estimator
//! keeps an exponentially weighted moving average of the observed rates. No
//! probe traffic is generated. Until the warmup count is reached the
//! estimate falls back to a configured prior, so the first decisions of a
//! run have something sane to work with.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("sample elapsed time must be positive and finite, got {0}")]
    InvalidElapsed(f64),
    #[error("sample must cover at least one byte")]
    EmptySample,
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
}

/// One completed transfer: how many bytes went over the wire and how long
/// the transmission took.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputSample {
    bytes_transferred: u64,
    elapsed: f64,
}

impl ThroughputSample {
    pub fn new(bytes_transferred: u64, elapsed: f64) -> Result<Self, EstimatorError> {
        if bytes_transferred == 0 {
            return Err(EstimatorError::EmptySample);
        }
        if !elapsed.is_finite() || elapsed <= 0.0 {
            return Err(EstimatorError::InvalidElapsed(elapsed));
        }
        Ok(Self {
            bytes_transferred,
            elapsed,
        })
    }

    /// Observed rate in bytes/second.
    pub fn rate(&self) -> f64 {
        self.bytes_transferred as f64 / self.elapsed
    }
}

pub const DEFAULT_DECAY: f64 = 0.05;
/// 5 Mbps expressed in bytes/second; a mid-range cellular uplink.
pub const DEFAULT_PRIOR_BPS: f64 = 625_000.0;
pub const DEFAULT_WARMUP_SAMPLES: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Weight given to each new sample, in (0, 1].
    pub decay: f64,
    /// Estimate reported before warmup completes, bytes/second.
    pub prior_bps: f64,
    /// Number of samples required before the EWMA is trusted.
    pub warmup_samples: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            decay: DEFAULT_DECAY,
            prior_bps: DEFAULT_PRIOR_BPS,
            warmup_samples: DEFAULT_WARMUP_SAMPLES,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !self.decay.is_finite() || self.decay <= 0.0 || self.decay > 1.0 {
            return Err(EstimatorError::InvalidConfig(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if !self.prior_bps.is_finite() || self.prior_bps <= 0.0 {
            return Err(EstimatorError::InvalidConfig(format!(
                "prior must be positive, got {}",
                self.prior_bps
            )));
        }
        Ok(())
    }
}

/// EWMA over observed transfer rates.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    config: EstimatorConfig,
    ewma: Option<f64>,
    sample_count: u64,
}

impl EstimatorState {
    pub fn new(config: EstimatorConfig) -> Result<Self, EstimatorError> {
        config.validate()?;
        Ok(Self {
            config,
            ewma: None,
            sample_count: 0,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Fold one completed transfer into the average. The first sample seeds
    /// the EWMA directly.
    pub fn add_sample(&mut self, sample: ThroughputSample) {
        let rate = sample.rate();
        self.ewma = Some(match self.ewma {
            None => rate,
            Some(current) => (1.0 - self.config.decay) * current + self.config.decay * rate,
        });
        self.sample_count += 1;
    }

    /// Current throughput estimate in bytes/second. Reports the prior until
    /// warmup completes.
    pub fn current_estimate(&self) -> f64 {
        match self.ewma {
            Some(value) if self.sample_count >= self.config.warmup_samples => value,
            _ => self.config.prior_bps,
        }
    }

    /// Drop all history; the next estimate is the prior again. Used when the
    /// network context changes (e.g. interface switch).
    pub fn reset(&mut self) {
        self.ewma = None;
        self.sample_count = 0;
    }
}

impl Default for EstimatorState {
    fn default() -> Self {
        Self::new(EstimatorConfig::default()).expect("default config is valid")
    }
}

/// Cloneable handle to one estimator shared between the transfer path (which
/// writes samples) and the decision path (which reads the estimate). All
/// access goes through a single lock, so readers never observe a torn update.
#[derive(Debug, Clone, Default)]
pub struct SharedEstimator(Arc<Mutex<EstimatorState>>);

impl SharedEstimator {
    pub fn new(config: EstimatorConfig) -> Result<Self, EstimatorError> {
        Ok(Self(Arc::new(Mutex::new(EstimatorState::new(config)?))))
    }

    pub fn add_sample(&self, sample: ThroughputSample) {
        self.0.lock().expect("estimator lock").add_sample(sample);
    }

    pub fn current_estimate(&self) -> f64 {
        self.0.lock().expect("estimator lock").current_estimate()
    }

    pub fn reset(&self) {
        self.0.lock().expect("estimator lock").reset();
    }

    pub fn sample_count(&self) -> u64 {
        self.0.lock().expect("estimator lock").sample_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(bytes: u64, elapsed: f64) -> ThroughputSample {
        ThroughputSample::new(bytes, elapsed).unwrap()
    }

    #[test]
    fn first_sample_seeds_the_average() {
        let mut est = EstimatorState::default();
        est.add_sample(sample(100_000, 0.8));
        assert_eq!(est.current_estimate(), 125_000.0);
    }

    #[test]
    fn ewma_blends_new_rates_by_decay() {
        let mut est = EstimatorState::default();
        est.add_sample(sample(100_000, 1.0));
        est.add_sample(sample(105_000, 1.0));
        // 0.95 * 100_000 + 0.05 * 105_000
        assert!((est.current_estimate() - 100_250.0).abs() < 1e-9);
    }

    #[test]
    fn constant_rate_is_a_fixed_point() {
        let mut est = EstimatorState::default();
        for _ in 0..50 {
            est.add_sample(sample(250_000, 1.0));
        }
        assert!((est.current_estimate() - 250_000.0).abs() < 1e-6);
    }

    #[test]
    fn prior_reported_before_any_sample() {
        let est = EstimatorState::default();
        assert_eq!(est.current_estimate(), DEFAULT_PRIOR_BPS);
    }

    #[test]
    fn reset_returns_to_prior() {
        let mut est = EstimatorState::default();
        est.add_sample(sample(1_000_000, 1.0));
        assert_eq!(est.current_estimate(), 1_000_000.0);
        est.reset();
        assert_eq!(est.sample_count(), 0);
        assert_eq!(est.current_estimate(), DEFAULT_PRIOR_BPS);
    }

    #[test]
    fn warmup_holds_the_prior_until_enough_samples() {
        let config = EstimatorConfig {
            warmup_samples: 3,
            ..EstimatorConfig::default()
        };
        let mut est = EstimatorState::new(config).unwrap();
        est.add_sample(sample(1_000_000, 1.0));
        est.add_sample(sample(1_000_000, 1.0));
        assert_eq!(est.current_estimate(), DEFAULT_PRIOR_BPS);
        est.add_sample(sample(1_000_000, 1.0));
        assert_eq!(est.current_estimate(), 1_000_000.0);
    }

    #[test]
    fn invalid_samples_are_rejected() {
        assert!(ThroughputSample::new(0, 1.0).is_err());
        assert!(ThroughputSample::new(10, 0.0).is_err());
        assert!(ThroughputSample::new(10, -1.0).is_err());
        assert!(ThroughputSample::new(10, f64::NAN).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for decay in [0.0, -0.1, 1.5, f64::NAN] {
            let config = EstimatorConfig {
                decay,
                ..EstimatorConfig::default()
            };
            assert!(EstimatorState::new(config).is_err());
        }
    }

    #[test]
    fn step_change_follows_the_geometric_approach_curve() {
        // After converging to rate b, n samples at 2b leave the estimate at
        // b * (2 - (1 - decay)^n).
        let b = 500_000.0;
        let decay = DEFAULT_DECAY;
        let mut est = EstimatorState::default();
        est.add_sample(sample(500_000, 1.0));
        for n in 1..=40u32 {
            est.add_sample(sample(1_000_000, 1.0));
            let expected = b * (2.0 - (1.0 - decay).powi(n as i32));
            let got = est.current_estimate();
            assert!(
                (got - expected).abs() / expected < 1e-12,
                "n={n}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn shared_handle_sees_one_state() {
        let shared = SharedEstimator::default();
        let writer = shared.clone();
        writer.add_sample(sample(200_000, 1.0));
        assert_eq!(shared.current_estimate(), 200_000.0);
        assert_eq!(shared.sample_count(), 1);
    }

    #[test]
    fn concurrent_updates_do_not_tear() {
        let shared = SharedEstimator::default();
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let handle = shared.clone();
                std::thread::spawn(move || {
                    for _ in 0..100 {
                        handle.add_sample(sample(100_000, 1.0));
                        let estimate = handle.current_estimate();
                        assert!(estimate.is_finite() && estimate > 0.0);
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(shared.sample_count(), 800);
        assert!((shared.current_estimate() - 100_000.0).abs() < 1e-6);
    }
}
