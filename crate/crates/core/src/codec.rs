//! Codec seam between the decision engine and the byte compressor.
//!
//! Everything downstream (training, transfer, the oracle) talks to a
//! [`Codec`] so the compressor can be swapped without touching the policy.
//! The default is DEFLATE in a zlib container at level 6, which is what the
//! wire protocol's `deflate` codec id means.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("compression failed: {0}")]
    Compress(std::io::Error),
    #[error("decompression failed: {0}")]
    Decompress(std::io::Error),
}

pub trait Codec: Send + Sync {
    /// Stable identifier carried in the wire protocol and in model files.
    fn id(&self) -> &'static str;
    fn compress(&self, data: &[u8]) -> Result<Vec<u8>, CodecError>;
    fn decompress(&self, data: &[u8]) -> Result<Vec<u8>, CodecError>;
}

/// DEFLATE (zlib container). Level 6 is the speed/ratio middle ground used
/// throughout the harness.
pub struct DeflateCodec {
    level: Compression,
}

pub const DEFAULT_DEFLATE_LEVEL: u32 = 6;

impl DeflateCodec {
    pub fn new(level: u32) -> Self {
        Self {
            level: Compression::new(level),
        }
    }
}

impl Default for DeflateCodec {
    fn default() -> Self {
        Self::new(DEFAULT_DEFLATE_LEVEL)
    }
}

impl Codec for DeflateCodec {
    fn id(&self) -> &'static str {
        "deflate"
    }

    fn compress(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        let mut encoder = ZlibEncoder::new(Vec::with_capacity(data.len() / 2 + 64), self.level);
        encoder.write_all(data).map_err(CodecError::Compress)?;
        encoder.finish().map_err(CodecError::Compress)
    }

    fn decompress(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        let mut decoder = ZlibDecoder::new(data);
        let mut out = Vec::with_capacity(data.len() * 2 + 64);
        decoder
            .read_to_end(&mut out)
            .map_err(CodecError::Decompress)?;
        Ok(out)
    }
}

/// Pass-through codec used for raw sends on the wire.
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn id(&self) -> &'static str {
        "identity"
    }

    fn compress(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        Ok(data.to_vec())
    }

    fn decompress(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        Ok(data.to_vec())
    }
}

/// Resolve a wire codec id to an implementation.
pub fn codec_by_id(id: &str) -> Option<Box<dyn Codec>> {
    match id {
        "deflate" => Some(Box::new(DeflateCodec::default())),
        "identity" => Some(Box::new(IdentityCodec)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deflate_round_trips() {
        let codec = DeflateCodec::default();
        let data = b"the quick brown fox jumps over the lazy dog".repeat(100);
        let compressed = codec.compress(&data).unwrap();
        assert!(compressed.len() < data.len());
        assert_eq!(codec.decompress(&compressed).unwrap(), data);
    }

    #[test]
    fn deflate_handles_empty_input() {
        let codec = DeflateCodec::default();
        let compressed = codec.compress(b"").unwrap();
        assert!(!compressed.is_empty()); // container framing survives
        assert_eq!(codec.decompress(&compressed).unwrap(), b"");
    }

    #[test]
    fn deflate_rejects_garbage() {
        let codec = DeflateCodec::default();
        assert!(codec.decompress(b"definitely not zlib").is_err());
    }

    #[test]
    fn identity_is_a_noop() {
        let codec = IdentityCodec;
        let data = vec![7u8; 128];
        assert_eq!(codec.compress(&data).unwrap(), data);
        assert_eq!(codec.decompress(&data).unwrap(), data);
    }

    #[test]
    fn lookup_by_wire_id() {
        assert_eq!(codec_by_id("deflate").unwrap().id(), "deflate");
        assert_eq!(codec_by_id("identity").unwrap().id(), "identity");
        assert!(codec_by_id("brotli").is_none());
    }
}
