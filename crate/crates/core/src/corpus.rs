//! Corpus manifests and synthetic corpus generation.
//!
//! A corpus is a directory of payload files plus a JSON-lines manifest, one
//! `{path, label}` record per item, paths relative to the manifest. The
//! synthetic generator produces three payload classes with known codec
//! behavior: token text that compresses well, random bytes that do not, and
//! tiny high-entropy items that sit below any sensible size cutoff. Output
//! is byte-identical for a given spec and seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::DataTypeLabel;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {reason}")]
    InvalidManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
}

/// One corpus entry, resolved against the manifest location.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    /// Stable identifier; the manifest-relative path string.
    pub id: String,
    pub label: DataTypeLabel,
    pub path: PathBuf,
    pub size: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: DataTypeLabel,
}

/// Read a manifest and stat every referenced payload. Entries whose file is
/// missing or unreadable are skipped with a warning so one bad row cannot
/// sink a whole run.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<CorpusItem>, CorpusError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| CorpusError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(line).map_err(|e| CorpusError::InvalidManifest {
                path: manifest_path.to_path_buf(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let path = base.join(&row.path);
        let size = match std::fs::metadata(&path) {
            Ok(meta) => meta.len(),
            Err(e) => {
                log::warn!("skipping unreadable corpus entry {}: {e}", path.display());
                continue;
            }
        };
        let mut id = row.path.clone();
        let mut dup = 1;
        while !seen_ids.insert(id.clone()) {
            dup += 1;
            id = format!("{}#{dup}", row.path);
        }
        items.push(CorpusItem {
            id,
            label: row.label,
            path,
            size,
        });
    }
    Ok(items)
}

/// Payload families the generator can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadClass {
    /// Token text from a skewed vocabulary; compresses around 3-4x.
    Text,
    /// Uniform random bytes; incompressible.
    RandomBytes,
    /// Random bytes with sparse zero runs: compresses by only a few percent,
    /// which puts the compress-or-not tradeoff near typical link crossover
    /// points instead of far to one side.
    NearIncompressible,
    /// Short opaque blobs meant to sit under the policy's size floor; the
    /// codec's framing makes them strictly expand.
    TinyOpaque,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: DataTypeLabel,
    pub class: PayloadClass,
    pub count: usize,
    pub min_size: u64,
    pub max_size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
}

// Text-generator shape. Vocabulary size and Zipf exponent were calibrated
// against DEFLATE level 6: 1 MiB payloads land near 3.4x (2.5-3x for small
// ones), the range typical of logged text, keeping well clear of both the
// incompressible and the trivially compressible ends.
const TEXT_VOCAB_WORDS: usize = 1024;
const TEXT_ZIPF_EXPONENT: f64 = 1.0;
const TEXT_WORDS_PER_LINE: usize = 12;

// Near-incompressible shape: a zero run this long every span of random
// bytes compresses 2-3% under DEFLATE level 6.
const NEAR_INCOMPRESSIBLE_SPAN: usize = 500;
const NEAR_INCOMPRESSIBLE_RUN: usize = 16;

/// Generate one payload of exactly `size` bytes.
pub fn generate_payload(class: PayloadClass, size: u64, rng: &mut StdRng) -> Vec<u8> {
    let size = size as usize;
    match class {
        PayloadClass::RandomBytes | PayloadClass::TinyOpaque => {
            let mut buf = vec![0u8; size];
            rng.fill_bytes(&mut buf);
            buf
        }
        PayloadClass::NearIncompressible => {
            let mut buf = vec![0u8; size];
            rng.fill_bytes(&mut buf);
            let mut i = NEAR_INCOMPRESSIBLE_SPAN;
            while i + NEAR_INCOMPRESSIBLE_RUN <= buf.len() {
                buf[i..i + NEAR_INCOMPRESSIBLE_RUN].fill(0);
                i += NEAR_INCOMPRESSIBLE_SPAN + NEAR_INCOMPRESSIBLE_RUN;
            }
            buf
        }
        PayloadClass::Text => {
            let vocab = build_vocab(rng);
            let zipf = Zipf::new(TEXT_VOCAB_WORDS as u64, TEXT_ZIPF_EXPONENT)
                .expect("static zipf parameters");
            let mut out = String::with_capacity(size + 16);
            let mut words_on_line = 0;
            while out.len() < size {
                let rank = zipf.sample(rng) as usize - 1;
                out.push_str(&vocab[rank]);
                words_on_line += 1;
                if words_on_line == TEXT_WORDS_PER_LINE {
                    out.push('\n');
                    words_on_line = 0;
                } else {
                    out.push(' ');
                }
            }
            let mut bytes = out.into_bytes();
            bytes.truncate(size);
            bytes
        }
    }
}

fn build_vocab(rng: &mut StdRng) -> Vec<String> {
    (0..TEXT_VOCAB_WORDS)
        .map(|_| {
            let len = rng.gen_range(3..=9);
            let mut word = String::new();
            for _ in 0..len {
                let _ = write!(word, "{}", (b'a' + rng.gen_range(0..26u8)) as char);
            }
            word
        })
        .collect()
}

/// Write a synthetic corpus under `out_dir`: payloads in `items/`, a
/// `manifest.jsonl`, and a copy of `spec` (as `corpus_spec.json`) so any
/// corpus can be regenerated. Returns the manifest path. Items from all
/// classes are shuffled together (seeded) so contiguous corpus slices mix
/// classes.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf, CorpusError> {
    let total: usize = spec.classes.iter().map(|c| c.count).sum();
    if total == 0 {
        return Err(CorpusError::InvalidSpec("zero items requested".to_string()));
    }
    for class in &spec.classes {
        if class.min_size > class.max_size {
            return Err(CorpusError::InvalidSpec(format!(
                "class `{}` has min_size > max_size",
                class.label
            )));
        }
    }

    let items_dir = out_dir.join("items");
    std::fs::create_dir_all(&items_dir).map_err(|source| CorpusError::Io {
        path: items_dir.clone(),
        source,
    })?;

    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut generated: Vec<(DataTypeLabel, Vec<u8>)> = Vec::with_capacity(total);
    for class in &spec.classes {
        for _ in 0..class.count {
            let size = log_uniform_size(class.min_size, class.max_size, &mut rng);
            let payload = generate_payload(class.class, size, &mut rng);
            generated.push((class.label.clone(), payload));
        }
    }
    // Fisher-Yates with the same seeded stream keeps the shuffle reproducible.
    for i in (1..generated.len()).rev() {
        let j = rng.gen_range(0..=i);
        generated.swap(i, j);
    }

    let mut manifest = String::new();
    for (idx, (label, payload)) in generated.iter().enumerate() {
        let rel = format!("items/item-{idx:05}.bin");
        let path = out_dir.join(&rel);
        std::fs::write(&path, payload).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        let row = ManifestRow {
            path: rel,
            label: label.clone(),
        };
        manifest.push_str(&serde_json::to_string(&row).expect("manifest row serializes"));
        manifest.push('\n');
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest).map_err(|source| CorpusError::Io {
        path: manifest_path.clone(),
        source,
    })?;

    let spec_path = out_dir.join("corpus_spec.json");
    let spec_text = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&spec_path, spec_text + "\n").map_err(|source| CorpusError::Io {
        path: spec_path,
        source,
    })?;

    Ok(manifest_path)
}

fn log_uniform_size(min: u64, max: u64, rng: &mut StdRng) -> u64 {
    if min == max {
        return min;
    }
    let (lo, hi) = ((min.max(1)) as f64, max as f64);
    let x = rng.gen_range(lo.ln()..=hi.ln()).exp();
    (x.round() as u64).clamp(min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Codec, DeflateCodec};

    fn label(name: &str) -> DataTypeLabel {
        DataTypeLabel::new(name).unwrap()
    }

    fn ratio(payload: &[u8]) -> f64 {
        let codec = DeflateCodec::default();
        payload.len() as f64 / codec.compress(payload).unwrap().len() as f64
    }

    #[test]
    fn text_payload_compresses_in_the_expected_band() {
        let mut rng = StdRng::seed_from_u64(11);
        let payload = generate_payload(PayloadClass::Text, 1_000_000, &mut rng);
        assert_eq!(payload.len(), 1_000_000);
        let r = ratio(&payload);
        assert!((3.0..6.0).contains(&r), "text ratio {r}");
    }

    #[test]
    fn random_payload_is_incompressible() {
        let mut rng = StdRng::seed_from_u64(12);
        let payload = generate_payload(PayloadClass::RandomBytes, 1_000_000, &mut rng);
        let r = ratio(&payload);
        assert!((0.99..1.01).contains(&r), "random ratio {r}");
    }

    #[test]
    fn near_incompressible_payload_compresses_a_few_percent() {
        let mut rng = StdRng::seed_from_u64(19);
        let payload = generate_payload(PayloadClass::NearIncompressible, 500_000, &mut rng);
        let r = ratio(&payload);
        assert!((1.01..1.05).contains(&r), "near-incompressible ratio {r}");
    }

    #[test]
    fn tiny_payloads_strictly_expand() {
        let mut rng = StdRng::seed_from_u64(13);
        let codec = DeflateCodec::default();
        for _ in 0..20 {
            let size = rng.gen_range(16..=256u64);
            let payload = generate_payload(PayloadClass::TinyOpaque, size, &mut rng);
            assert_eq!(payload.len() as u64, size);
            let compressed = codec.compress(&payload).unwrap();
            assert!(
                compressed.len() > payload.len(),
                "tiny item went from {} to {}",
                payload.len(),
                compressed.len()
            );
        }
    }

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            seed,
            classes: vec![
                ClassSpec {
                    label: label("text"),
                    class: PayloadClass::Text,
                    count: 6,
                    min_size: 8_192,
                    max_size: 32_768,
                },
                ClassSpec {
                    label: label("image"),
                    class: PayloadClass::RandomBytes,
                    count: 4,
                    min_size: 8_192,
                    max_size: 16_384,
                },
                ClassSpec {
                    label: label("tiny"),
                    class: PayloadClass::TinyOpaque,
                    count: 4,
                    min_size: 16,
                    max_size: 256,
                },
            ],
        }
    }

    #[test]
    fn generated_corpus_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&small_spec(5), dir.path()).unwrap();
        let items = read_manifest(&manifest).unwrap();
        assert_eq!(items.len(), 14);
        for item in &items {
            assert_eq!(std::fs::metadata(&item.path).unwrap().len(), item.size);
        }
        let labels: BTreeSet<_> = items.iter().map(|i| i.label.as_str().to_string()).collect();
        assert_eq!(labels, ["image", "text", "tiny"].map(String::from).into());
    }

    #[test]
    fn same_seed_generates_identical_corpora() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small_spec(99), a.path()).unwrap();
        generate_corpus(&small_spec(99), b.path()).unwrap();
        let read_all = |root: &Path| {
            let manifest = std::fs::read(root.join("manifest.jsonl")).unwrap();
            let mut entries: Vec<_> = std::fs::read_dir(root.join("items"))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            let payloads: Vec<_> = entries.iter().map(|p| std::fs::read(p).unwrap()).collect();
            (manifest, payloads)
        };
        assert_eq!(read_all(a.path()), read_all(b.path()));
    }

    #[test]
    fn different_seeds_differ() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small_spec(1), a.path()).unwrap();
        generate_corpus(&small_spec(2), b.path()).unwrap();
        assert_ne!(
            std::fs::read(a.path().join("items/item-00000.bin")).unwrap(),
            std::fs::read(b.path().join("items/item-00000.bin")).unwrap()
        );
    }

    #[test]
    fn unreadable_entries_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&small_spec(3), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("items/item-00003.bin")).unwrap();
        let items = read_manifest(&manifest).unwrap();
        assert_eq!(items.len(), 13);
    }

    #[test]
    fn malformed_manifest_rows_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{\"path\": \"x.bin\"}\n").unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(CorpusError::InvalidManifest { line: 1, .. })
        ));
    }

    #[test]
    fn empty_spec_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            seed: 0,
            classes: vec![],
        };
        assert!(matches!(
            generate_corpus(&spec, dir.path()),
            Err(CorpusError::InvalidSpec(_))
        ));
    }
}
