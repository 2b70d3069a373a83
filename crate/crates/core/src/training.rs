//! Offline fitting of per-type cost models.
//!
//! Training runs the real codec over a corpus, times each call, and reduces
//! the measurements to one [`TypeModel`] per data type: a least-squares line
//! through (size, latency) and a size-weighted compressibility ratio. A
//! global fallback model fitted over every sample covers labels never seen
//! in training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codec, CodecError};
use crate::corpus::CorpusItem;
use crate::policy::{DataTypeLabel, PolicyError, TypeModel};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("cannot fit a model from an empty sample list")]
    NoSamples,
    #[error("degenerate fit for `{label}`: {reason}")]
    DegenerateFit { label: String, reason: String },
    #[error("no readable corpus entries")]
    EmptyCorpus,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("model file {path}: {reason}")]
    InvalidModelFile { path: PathBuf, reason: String },
}

/// One timed codec run over one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub label: DataTypeLabel,
    pub original_size: u64,
    pub compressed_size: u64,
    /// Seconds for one compression call (median over repeats).
    pub compression_latency: f64,
}

pub const DEFAULT_MEASURE_REPS: usize = 3;

/// Compress `payload` `DEFAULT_MEASURE_REPS` times and keep the median
/// latency; repeated runs squeeze out scheduler noise.
pub fn measure_sample(
    payload: &[u8],
    label: &DataTypeLabel,
    codec: &dyn Codec,
) -> Result<TrainingSample, TrainingError> {
    measure_sample_with_reps(payload, label, codec, DEFAULT_MEASURE_REPS)
}

pub fn measure_sample_with_reps(
    payload: &[u8],
    label: &DataTypeLabel,
    codec: &dyn Codec,
    reps: usize,
) -> Result<TrainingSample, TrainingError> {
    let reps = reps.max(1);
    let mut latencies = Vec::with_capacity(reps);
    let mut compressed_size = 0u64;
    for rep in 0..reps {
        let start = Instant::now();
        let compressed = codec.compress(payload)?;
        latencies.push(start.elapsed().as_secs_f64());
        if rep == 0 {
            compressed_size = compressed.len() as u64;
        }
    }
    Ok(TrainingSample {
        label: label.clone(),
        original_size: payload.len() as u64,
        compressed_size,
        compression_latency: median(&mut latencies),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Fit one type's model from its samples.
///
/// Latency coefficients come from ordinary least squares of latency on size,
/// clamped at zero. When every sample has the same size the slope is
/// unidentifiable, so the fit degrades to a flat model at the mean latency.
/// Compressibility is the ratio of total original to total compressed bytes,
/// which weights large items proportionally to the bytes they contribute.
pub fn fit_type_model(samples: &[TrainingSample]) -> Result<TypeModel, TrainingError> {
    let first = samples.first().ok_or(TrainingError::NoSamples)?;
    let label = first.label.clone();

    let total_original: u128 = samples.iter().map(|s| s.original_size as u128).sum();
    let total_compressed: u128 = samples.iter().map(|s| s.compressed_size as u128).sum();
    if total_original == 0 {
        return Err(TrainingError::DegenerateFit {
            label: label.to_string(),
            reason: "every sample is empty".to_string(),
        });
    }
    if total_compressed == 0 {
        return Err(TrainingError::DegenerateFit {
            label: label.to_string(),
            reason: "zero compressed bytes".to_string(),
        });
    }
    let compressibility = total_original as f64 / total_compressed as f64;

    let n = samples.len() as f64;
    let mean_size = samples.iter().map(|s| s.original_size as f64).sum::<f64>() / n;
    let mean_latency = samples.iter().map(|s| s.compression_latency).sum::<f64>() / n;

    let mut distinct_sizes: Vec<u64> = samples.iter().map(|s| s.original_size).collect();
    distinct_sizes.sort_unstable();
    distinct_sizes.dedup();

    let (alpha, beta) = if distinct_sizes.len() >= 2 {
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for s in samples {
            let dx = s.original_size as f64 - mean_size;
            sxx += dx * dx;
            sxy += dx * (s.compression_latency - mean_latency);
        }
        let alpha = sxy / sxx;
        (alpha, mean_latency - alpha * mean_size)
    } else {
        (0.0, mean_latency)
    };

    Ok(TypeModel::new(
        label,
        alpha.max(0.0),
        beta.max(0.0),
        compressibility,
    )?)
}

/// Trained models for one codec: one per observed label plus a global
/// fallback used for labels the training corpus never contained.
#[derive(Debug, Clone)]
pub struct ModelSet {
    per_label: BTreeMap<DataTypeLabel, TypeModel>,
    pub global_fallback: TypeModel,
    pub codec_id: String,
    /// Unix seconds at fit time.
    pub trained_at: u64,
}

pub const GLOBAL_FALLBACK_LABEL: &str = "global";

impl ModelSet {
    pub fn new(
        models: impl IntoIterator<Item = TypeModel>,
        global_fallback: TypeModel,
        codec_id: impl Into<String>,
    ) -> Self {
        let per_label = models.into_iter().map(|m| (m.label.clone(), m)).collect();
        Self {
            per_label,
            global_fallback,
            codec_id: codec_id.into(),
            trained_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Model for `label`, or the global fallback when the label was never
    /// trained.
    pub fn model_for(&self, label: &DataTypeLabel) -> &TypeModel {
        self.per_label.get(label).unwrap_or(&self.global_fallback)
    }

    pub fn labels(&self) -> impl Iterator<Item = &DataTypeLabel> {
        self.per_label.keys()
    }

    pub fn len(&self) -> usize {
        self.per_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_label.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = ModelSetFile {
            codec_id: self.codec_id.clone(),
            trained_at: self.trained_at,
            models: self.per_label.values().cloned().collect(),
            global_fallback: self.global_fallback.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model set serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| TrainingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ModelSetFile =
            serde_json::from_str(&text).map_err(|e| TrainingError::InvalidModelFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let mut per_label = BTreeMap::new();
        for model in file.models {
            model
                .validate()
                .map_err(|e| TrainingError::InvalidModelFile {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
            if per_label.insert(model.label.clone(), model).is_some() {
                return Err(TrainingError::InvalidModelFile {
                    path: path.to_path_buf(),
                    reason: "duplicate label".to_string(),
                });
            }
        }
        file.global_fallback
            .validate()
            .map_err(|e| TrainingError::InvalidModelFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            per_label,
            global_fallback: file.global_fallback,
            codec_id: file.codec_id,
            trained_at: file.trained_at,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSetFile {
    codec_id: String,
    trained_at: u64,
    models: Vec<TypeModel>,
    global_fallback: TypeModel,
}

/// Measure and fit models over a whole corpus. Unreadable entries are
/// skipped with a warning; labels whose fit degenerates (e.g. only empty
/// payloads) fall back to the global model.
pub fn train_corpus(
    items: &[CorpusItem],
    codec: &dyn Codec,
    reps: usize,
) -> Result<ModelSet, TrainingError> {
    let mut by_label: BTreeMap<DataTypeLabel, Vec<TrainingSample>> = BTreeMap::new();
    let mut all_samples = Vec::with_capacity(items.len());
    for item in items {
        let payload = match std::fs::read(&item.path) {
            Ok(payload) => payload,
            Err(e) => {
                log::warn!("skipping unreadable corpus entry {}: {e}", item.path.display());
                continue;
            }
        };
        let sample = measure_sample_with_reps(&payload, &item.label, codec, reps)?;
        by_label
            .entry(item.label.clone())
            .or_default()
            .push(sample.clone());
        all_samples.push(sample);
    }
    if all_samples.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }

    let global_fallback = {
        let mut global = fit_type_model(&all_samples)?;
        global.label = DataTypeLabel::new(GLOBAL_FALLBACK_LABEL)?;
        global
    };
    let mut models = Vec::with_capacity(by_label.len());
    for (label, samples) in &by_label {
        match fit_type_model(samples) {
            Ok(model) => models.push(model),
            Err(e) => log::warn!("no model for `{label}`, using global fallback: {e}"),
        }
    }
    Ok(ModelSet::new(models, global_fallback, codec.id()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::DeflateCodec;

    fn label(name: &str) -> DataTypeLabel {
        DataTypeLabel::new(name).unwrap()
    }

    fn sample(size: u64, compressed: u64, latency: f64) -> TrainingSample {
        TrainingSample {
            label: label("text"),
            original_size: size,
            compressed_size: compressed,
            compression_latency: latency,
        }
    }

    #[test]
    fn exact_linear_data_is_recovered() {
        let alpha = 2.0e-8;
        let beta = 0.003;
        let samples: Vec<_> = [10_000u64, 50_000, 200_000, 1_000_000]
            .iter()
            .map(|&s| sample(s, s / 4, alpha * s as f64 + beta))
            .collect();
        let model = fit_type_model(&samples).unwrap();
        assert!((model.alpha - alpha).abs() / alpha < 1e-9);
        assert!((model.beta - beta).abs() / beta < 1e-9);
    }

    #[test]
    fn residuals_vanish_on_exact_linear_data() {
        let samples: Vec<_> = (1..=20u64)
            .map(|i| {
                let s = i * 10_000;
                sample(s, s / 3, 1.5e-8 * s as f64 + 0.002)
            })
            .collect();
        let model = fit_type_model(&samples).unwrap();
        let rss: f64 = samples
            .iter()
            .map(|s| {
                let predicted = model.alpha * s.original_size as f64 + model.beta;
                (predicted - s.compression_latency).powi(2)
            })
            .sum();
        assert!(rss < 1e-12, "rss = {rss}");
    }

    #[test]
    fn compressibility_is_byte_weighted() {
        let samples = vec![sample(1000, 250, 0.001), sample(2000, 500, 0.002)];
        let model = fit_type_model(&samples).unwrap();
        assert_eq!(model.compressibility, 4.0);
    }

    #[test]
    fn single_size_falls_back_to_flat_latency() {
        let samples = vec![
            sample(1000, 400, 0.010),
            sample(1000, 410, 0.020),
            sample(1000, 390, 0.030),
        ];
        let model = fit_type_model(&samples).unwrap();
        assert_eq!(model.alpha, 0.0);
        assert!((model.beta - 0.020).abs() < 1e-12);
    }

    #[test]
    fn all_empty_samples_are_degenerate() {
        let samples = vec![sample(0, 8, 0.001), sample(0, 8, 0.001)];
        match fit_type_model(&samples) {
            Err(TrainingError::DegenerateFit { .. }) => {}
            other => panic!("expected degenerate fit, got {other:?}"),
        }
    }

    #[test]
    fn empty_sample_list_is_an_error() {
        assert!(matches!(fit_type_model(&[]), Err(TrainingError::NoSamples)));
    }

    #[test]
    fn negative_ols_coefficients_clamp_to_zero() {
        // Latency decreasing in size forces a negative slope.
        let samples = vec![sample(1000, 500, 0.030), sample(2000, 1000, 0.010)];
        let model = fit_type_model(&samples).unwrap();
        assert_eq!(model.alpha, 0.0);
    }

    #[test]
    fn fits_are_deterministic() {
        let samples: Vec<_> = (1..=50u64)
            .map(|i| sample(i * 1234, i * 300, 0.001 * i as f64 + 0.5e-9 * (i * i) as f64))
            .collect();
        let a = fit_type_model(&samples).unwrap();
        let b = fit_type_model(&samples).unwrap();
        assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        assert_eq!(a.beta.to_bits(), b.beta.to_bits());
        assert_eq!(a.compressibility.to_bits(), b.compressibility.to_bits());
    }

    #[test]
    fn measured_zero_buffer_compresses_heavily() {
        let codec = DeflateCodec::default();
        let payload = vec![0u8; 1 << 20];
        let s = measure_sample(&payload, &label("zeros"), &codec).unwrap();
        let ratio = s.original_size as f64 / s.compressed_size as f64;
        assert!(ratio > 50.0, "ratio = {ratio}");
        assert!(s.compression_latency > 0.0);
    }

    #[test]
    fn measured_random_bytes_barely_compress() {
        use rand::{RngCore, SeedableRng};
        let codec = DeflateCodec::default();
        let mut payload = vec![0u8; 64 * 1024];
        rand::rngs::StdRng::seed_from_u64(7).fill_bytes(&mut payload);
        let s = measure_sample(&payload, &label("noise"), &codec).unwrap();
        assert!(s.compressed_size as f64 >= 0.99 * s.original_size as f64);
    }

    #[test]
    fn measured_empty_payload_is_still_a_sample() {
        let codec = DeflateCodec::default();
        let s = measure_sample(b"", &label("text"), &codec).unwrap();
        assert_eq!(s.original_size, 0);
        assert!(s.compressed_size > 0); // container framing
    }

    #[test]
    fn model_set_prefers_exact_label_and_falls_back() {
        let text = TypeModel::new(label("text"), 1e-8, 0.001, 4.0).unwrap();
        let fallback = TypeModel::new(label("global"), 2e-8, 0.002, 2.0).unwrap();
        let set = ModelSet::new([text.clone()], fallback.clone(), "deflate");
        assert_eq!(set.model_for(&label("text")), &text);
        assert_eq!(set.model_for(&label("mystery")), &fallback);
    }

    #[test]
    fn model_set_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.json");
        let set = ModelSet::new(
            [
                TypeModel::new(label("text"), 1e-8, 0.001, 4.12).unwrap(),
                TypeModel::new(label("image"), 2e-8, 0.002, 1.02).unwrap(),
            ],
            TypeModel::new(label("global"), 1.5e-8, 0.0015, 2.0).unwrap(),
            "deflate",
        );
        set.save(&path).unwrap();
        let loaded = ModelSet::load(&path).unwrap();
        assert_eq!(loaded.codec_id, "deflate");
        assert_eq!(loaded.trained_at, set.trained_at);
        assert_eq!(loaded.len(), 2);
        assert_eq!(
            loaded.model_for(&label("text")).compressibility,
            set.model_for(&label("text")).compressibility
        );
    }

    #[test]
    fn invalid_model_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.json");
        std::fs::write(
            &path,
            r#"{"codec_id":"deflate","trained_at":0,"models":[{"label":"x","alpha":-1.0,"beta":0.0,"compressibility":2.0}],"global_fallback":{"label":"global","alpha":0.0,"beta":0.0,"compressibility":1.0}}"#,
        )
        .unwrap();
        assert!(matches!(
            ModelSet::load(&path),
            Err(TrainingError::InvalidModelFile { .. })
        ));
    }
}
