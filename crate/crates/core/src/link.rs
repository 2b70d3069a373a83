//! Emulated network links.
//!
//! Two modes. The analytic link turns a byte count into a transfer time with
//! plain arithmetic (rtt + bytes/bandwidth, optionally jittered), which makes
//! experiments deterministic and fast. The shaped writer paces a real socket
//! stream with a token bucket so live transfers observe the same sustained
//! rate. Epoch schedules describe how link conditions change over a run:
//! the corpus is cut into equal-count partitions and each partition gets one
//! link level.

use std::io::{self, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("rtt must be non-negative and finite, got {0}")]
    InvalidRtt(f64),
    #[error("jitter fraction must be in [0, 1), got {0}")]
    InvalidJitter(f64),
    #[error("schedule needs at least one link level")]
    NoLevels,
    #[error("schedule needs at least one partition")]
    NoPartitions,
    #[error("schedule file {path}: {reason}")]
    InvalidScheduleFile { path: PathBuf, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Bytes/second carried by one megabit/second.
pub const BYTES_PER_SEC_PER_MBPS: f64 = 125_000.0;

/// One link condition: sustained bandwidth, round-trip time, and a uniform
/// multiplicative jitter band applied to whole transfers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub bandwidth_bps: f64,
    pub rtt: f64,
    pub jitter_fraction: f64,
}

impl LinkSpec {
    pub fn new(bandwidth_bps: f64, rtt: f64, jitter_fraction: f64) -> Result<Self, LinkError> {
        if !bandwidth_bps.is_finite() || bandwidth_bps <= 0.0 {
            return Err(LinkError::InvalidBandwidth(bandwidth_bps));
        }
        if !rtt.is_finite() || rtt < 0.0 {
            return Err(LinkError::InvalidRtt(rtt));
        }
        if !jitter_fraction.is_finite() || !(0.0..1.0).contains(&jitter_fraction) {
            return Err(LinkError::InvalidJitter(jitter_fraction));
        }
        Ok(Self {
            bandwidth_bps,
            rtt,
            jitter_fraction,
        })
    }

    /// Jitter-free, zero-rtt link at `mbps` megabits/second.
    pub fn from_mbps(mbps: f64) -> Result<Self, LinkError> {
        Self::new(mbps * BYTES_PER_SEC_PER_MBPS, 0.0, 0.0)
    }

    pub fn mbps(&self) -> f64 {
        self.bandwidth_bps / BYTES_PER_SEC_PER_MBPS
    }
}

/// Nominal transfer time for `bytes` over `link`, before jitter.
pub fn transmission_time(bytes: u64, link: &LinkSpec) -> f64 {
    link.rtt + bytes as f64 / link.bandwidth_bps
}

/// Analytic link with a seeded jitter stream. Identical seeds replay
/// identical jitter, which keeps whole experiments reproducible.
#[derive(Debug, Clone)]
pub struct AnalyticLink {
    spec: LinkSpec,
    rng: StdRng,
}

impl AnalyticLink {
    pub fn new(spec: LinkSpec, seed: u64) -> Self {
        Self {
            spec,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    pub fn spec(&self) -> &LinkSpec {
        &self.spec
    }

    /// Next jitter multiplier: 1 + u with u uniform in the jitter band, or
    /// exactly 1 when the band is zero (no randomness consumed).
    pub fn jitter_multiplier(&mut self) -> f64 {
        let j = self.spec.jitter_fraction;
        if j == 0.0 {
            1.0
        } else {
            1.0 + self.rng.gen_range(-j..=j)
        }
    }

    /// Transfer time for `bytes` with one fresh jitter draw.
    pub fn transmission_time(&mut self, bytes: u64) -> f64 {
        transmission_time(bytes, &self.spec) * self.jitter_multiplier()
    }
}

/// Token bucket capacity for shaped sockets: the largest slice granted per
/// write, which bounds sleep granularity.
pub const SHAPER_BUCKET_BYTES: usize = 64 * 1024;

/// Write-side pacing wrapper. Every byte costs tokens and the bucket starts
/// empty, so a transfer of n bytes takes n/rate seconds end to end; there is
/// no free initial burst that would let short writes through unshaped.
pub struct ShapedWriter<W: Write> {
    inner: W,
    rate_bps: f64,
    tokens: f64,
    last_refill: Instant,
}

impl<W: Write> ShapedWriter<W> {
    pub fn new(inner: W, rate_bps: f64) -> Self {
        Self {
            inner,
            rate_bps,
            tokens: 0.0,
            last_refill: Instant::now(),
        }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    fn refill(&mut self) {
        let now = Instant::now();
        let dt = now.duration_since(self.last_refill).as_secs_f64();
        self.last_refill = now;
        self.tokens = (self.tokens + dt * self.rate_bps).min(SHAPER_BUCKET_BYTES as f64);
    }

    /// Block until `n` tokens are available, then consume them.
    fn take(&mut self, n: usize) {
        self.refill();
        let needed = n as f64;
        if self.tokens < needed {
            let wait = (needed - self.tokens) / self.rate_bps;
            std::thread::sleep(Duration::from_secs_f64(wait));
            self.refill();
        }
        self.tokens -= needed;
    }
}

impl<W: Write> Write for ShapedWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let chunk = buf.len().min(SHAPER_BUCKET_BYTES);
        self.take(chunk);
        self.inner.write(&buf[..chunk])
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// One stretch of a dynamic run: which corpus partition travels under which
/// link condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub partition_index: usize,
    pub link: LinkSpec,
}

/// Ordered epochs covering a corpus exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub seed: u64,
    pub n_items: usize,
    pub epochs: Vec<Epoch>,
}

impl EpochSchedule {
    /// Fixed schedule: one epoch per given level, in order.
    pub fn from_levels(levels: &[LinkSpec], n_items: usize) -> Result<Self, LinkError> {
        if levels.is_empty() {
            return Err(LinkError::NoLevels);
        }
        Ok(Self {
            seed: 0,
            n_items,
            epochs: levels
                .iter()
                .enumerate()
                .map(|(i, &link)| Epoch {
                    partition_index: i,
                    link,
                })
                .collect(),
        })
    }

    /// Item index range covered by epoch `idx`: contiguous, equal-count up
    /// to rounding, covering the corpus exactly once overall.
    pub fn partition_range(&self, idx: usize) -> Range<usize> {
        let k = self.epochs.len();
        let n = self.n_items;
        (idx * n / k)..((idx + 1) * n / k)
    }

    /// Epoch that carries item `item_idx`.
    pub fn epoch_for_item(&self, item_idx: usize) -> usize {
        let k = self.epochs.len();
        let n = self.n_items;
        debug_assert!(item_idx < n);
        // Inverse of partition_range's rounding: the last epoch whose start
        // is <= item_idx.
        (0..k)
            .rev()
            .find(|&e| e * n / k <= item_idx)
            .expect("item within schedule")
    }
}

/// Sample a dynamic schedule: `n_partitions` equal-count partitions, each
/// assigned one level drawn uniformly (seeded) from `levels`.
pub fn make_schedule(
    n_items: usize,
    n_partitions: usize,
    levels: &[LinkSpec],
    seed: u64,
) -> Result<EpochSchedule, LinkError> {
    if levels.is_empty() {
        return Err(LinkError::NoLevels);
    }
    if n_partitions == 0 {
        return Err(LinkError::NoPartitions);
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let epochs = (0..n_partitions)
        .map(|partition_index| Epoch {
            partition_index,
            link: levels[rng.gen_range(0..levels.len())],
        })
        .collect();
    Ok(EpochSchedule {
        seed,
        n_items,
        epochs,
    })
}

/// On-disk description of a dynamic schedule; together with the corpus size
/// it reproduces the epoch assignment exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub seed: u64,
    pub levels_mbps: Vec<f64>,
    pub n_partitions: usize,
}

impl ScheduleFile {
    pub fn to_schedule(&self, n_items: usize) -> Result<EpochSchedule, LinkError> {
        let levels = self
            .levels_mbps
            .iter()
            .map(|&mbps| LinkSpec::from_mbps(mbps))
            .collect::<Result<Vec<_>, _>>()?;
        make_schedule(n_items, self.n_partitions, &levels, self.seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), LinkError> {
        let text = serde_json::to_string_pretty(self).expect("schedule serializes");
        std::fs::write(path, text + "\n").map_err(|source| LinkError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LinkError> {
        let text = std::fs::read_to_string(path).map_err(|source| LinkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| LinkError::InvalidScheduleFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
