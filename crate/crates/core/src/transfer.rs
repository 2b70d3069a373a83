//! Client/server transfer path with per-item codec choice.
//!
//! The client POSTs each payload over a short-lived HTTP/1.1 connection.
//! Three headers carry the transfer metadata: `X-Selzip-Codec` (`deflate` or
//! `identity`), `X-Selzip-Label`, and `X-Selzip-Item`. The server undoes the
//! codec, times that work, and answers with a JSON acknowledgment
//! `{received_bytes, decompressed_bytes, decompression_time}`.
//!
//! Client-side timing splits each send into overhead (bookkeeping up to the
//! first byte), compression time, and transmission time. Transmission is the
//! request/response wall time minus the server-reported decompression time,
//! so server CPU does not masquerade as network. The total deliberately
//! excludes decompression: it is the sender's cost picture, with the server
//! cost reported alongside.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{codec_by_id, Codec, DeflateCodec};
use crate::estimator::{SharedEstimator, ThroughputSample};
use crate::link::{LinkSpec, ShapedWriter};
use crate::policy::{Action, Decision, TransferItem};

pub const HEADER_CODEC: &str = "X-Selzip-Codec";
pub const HEADER_LABEL: &str = "X-Selzip-Label";
pub const HEADER_ITEM: &str = "X-Selzip-Item";

const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;
const IO_TIMEOUT: Duration = Duration::from_secs(30);

/// Server acknowledgment for one transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub received_bytes: u64,
    pub decompressed_bytes: u64,
    /// Seconds the server spent undoing the codec; 0 for raw sends.
    pub decompression_time: f64,
}

/// Complete accounting for one finished transfer.
///
/// `total` is always overhead + compression_time + transmission_time; the
/// server-side decompression time is recorded but not part of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub item_id: String,
    pub action_taken: Action,
    pub bytes_on_wire: u64,
    pub overhead: f64,
    pub compression_time: f64,
    pub transmission_time: f64,
    pub decompression_time: f64,
    pub total: f64,
    /// True when a Compress decision fell back to raw because the codec
    /// failed on this payload.
    pub codec_fallback: bool,
}

impl TransferOutcome {
    pub fn new(
        item_id: impl Into<String>,
        action_taken: Action,
        bytes_on_wire: u64,
        overhead: f64,
        compression_time: f64,
        transmission_time: f64,
        decompression_time: f64,
    ) -> Self {
        Self {
            item_id: item_id.into(),
            action_taken,
            bytes_on_wire,
            overhead,
            compression_time,
            transmission_time,
            decompression_time,
            total: overhead + compression_time + transmission_time,
            codec_fallback: false,
        }
    }

    /// Fold extra caller-side bookkeeping (e.g. decision time) into the
    /// outcome, keeping the total consistent.
    pub fn add_overhead(&mut self, seconds: f64) {
        self.overhead += seconds;
        self.total = self.overhead + self.compression_time + self.transmission_time;
    }
}

/// Timings salvaged from a transfer that failed partway.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialTimings {
    pub overhead: f64,
    pub compression_time: f64,
}

#[derive(Debug, Error)]
pub enum TransferError {
    /// Network-level failure; safe to retry.
    #[error("transport failure: {source}")]
    Transport {
        source: std::io::Error,
        partial: PartialTimings,
    },
    /// The server answered with a non-success status.
    #[error("server rejected transfer with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed server response: {0}")]
    MalformedResponse(String),
}

impl TransferError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransferError::Transport { .. })
    }
}

/// Sender for one endpoint. Optionally paces writes through a token bucket
/// and feeds completed transfers to a shared throughput estimator.
pub struct TransferClient {
    endpoint: String,
    codec: Box<dyn Codec>,
    estimator: Option<SharedEstimator>,
    shaping: Option<LinkSpec>,
}

impl TransferClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            codec: Box::new(DeflateCodec::default()),
            estimator: None,
            shaping: None,
        }
    }

    pub fn with_codec(mut self, codec: Box<dyn Codec>) -> Self {
        self.codec = codec;
        self
    }

    pub fn with_estimator(mut self, estimator: SharedEstimator) -> Self {
        self.estimator = Some(estimator);
        self
    }

    /// Pace writes so the sustained rate matches `link`'s bandwidth.
    pub fn with_shaping(mut self, link: LinkSpec) -> Self {
        self.shaping = Some(link);
        self
    }

    /// Execute one decided transfer. A codec failure under a Compress
    /// decision falls back to sending raw and flags the outcome rather than
    /// losing the item.
    pub fn send(
        &self,
        item: &TransferItem,
        decision: &Decision,
    ) -> Result<TransferOutcome, TransferError> {
        let start = Instant::now();
        let mut codec_fallback = false;
        let (body, wire_codec, compression_time) = match decision.action {
            Action::Compress => {
                let t = Instant::now();
                match self.codec.compress(&item.payload) {
                    Ok(compressed) => {
                        (compressed, self.codec.id(), t.elapsed().as_secs_f64())
                    }
                    Err(e) => {
                        log::warn!("codec failed on {}, falling back to raw: {e}", item.id);
                        codec_fallback = true;
                        (item.payload.clone(), "identity", 0.0)
                    }
                }
            }
            Action::SendRaw => (item.payload.clone(), "identity", 0.0),
        };
        let action_taken = if codec_fallback {
            Action::SendRaw
        } else {
            decision.action
        };

        let transport_err = |source: std::io::Error, overhead: f64| TransferError::Transport {
            source,
            partial: PartialTimings {
                overhead,
                compression_time,
            },
        };

        let head = format!(
            "POST /transfer HTTP/1.1\r\n\
             Host: {host}\r\n\
             Content-Length: {len}\r\n\
             {HEADER_ITEM}: {id}\r\n\
             {HEADER_LABEL}: {label}\r\n\
             {HEADER_CODEC}: {codec}\r\n\
             Connection: close\r\n\r\n",
            host = self.endpoint,
            len = body.len(),
            id = item.id,
            label = item.label,
            codec = wire_codec,
        );

        let stream = TcpStream::connect(&self.endpoint)
            .map_err(|e| transport_err(e, start.elapsed().as_secs_f64() - compression_time))?;
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(IO_TIMEOUT)).ok();
        stream.set_write_timeout(Some(IO_TIMEOUT)).ok();

        let overhead = (start.elapsed().as_secs_f64() - compression_time).max(0.0);
        let tx_start = Instant::now();
        let write_result = match self.shaping {
            Some(link) => {
                let mut writer = ShapedWriter::new(&stream, link.bandwidth_bps);
                writer
                    .write_all(head.as_bytes())
                    .and_then(|_| writer.write_all(&body))
                    .and_then(|_| writer.flush())
            }
            None => {
                let mut writer = &stream;
                writer
                    .write_all(head.as_bytes())
                    .and_then(|_| writer.write_all(&body))
                    .and_then(|_| writer.flush())
            }
        };
        write_result.map_err(|e| transport_err(e, overhead))?;

        let (status, response_body) = read_http_response(&stream)
            .map_err(|e| transport_err(e, overhead))?;
        let wall = tx_start.elapsed().as_secs_f64();

        if !(200..300).contains(&status) {
            return Err(TransferError::Rejected {
                status,
                message: String::from_utf8_lossy(&response_body).into_owned(),
            });
        }
        let ack: Ack = serde_json::from_slice(&response_body)
            .map_err(|e| TransferError::MalformedResponse(e.to_string()))?;
        if ack.received_bytes != body.len() as u64 {
            log::warn!(
                "byte accounting mismatch on {}: sent {}, server saw {}",
                item.id,
                body.len(),
                ack.received_bytes
            );
        }

        let transmission_time = (wall - ack.decompression_time).max(0.0);
        let bytes_on_wire = body.len() as u64;
        if let Some(estimator) = &self.estimator {
            if let Ok(sample) = ThroughputSample::new(bytes_on_wire, transmission_time) {
                estimator.add_sample(sample);
            }
        }

        let mut outcome = TransferOutcome::new(
            item.id.clone(),
            action_taken,
            bytes_on_wire,
            overhead,
            compression_time,
            transmission_time,
            ack.decompression_time,
        );
        outcome.codec_fallback = codec_fallback;
        Ok(outcome)
    }
}

fn read_http_response(stream: &TcpStream) -> std::io::Result<(u16, Vec<u8>)> {
    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "bad status line")
        })?;
    let headers = read_headers(&mut reader)?;
    let length: usize = headers
        .get("content-length")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    Ok((status, body))
}

fn read_headers<R: BufRead>(reader: &mut R) -> std::io::Result<BTreeMap<String, String>> {
    let mut headers = BTreeMap::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            return Ok(headers);
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
        }
    }
}

/// Decompressed payload delivered to a server-side observer.
#[derive(Debug, Clone)]
pub struct ReceivedItem {
    pub item_id: String,
    pub label: String,
    pub wire_codec: String,
    pub wire_bytes: u64,
    pub payload: Vec<u8>,
}

type PayloadHook = Arc<dyn Fn(&ReceivedItem) + Send + Sync>;

/// Server knobs. The payload hook gives tests and collectors access to each
/// decompressed payload without widening the wire protocol.
#[derive(Default, Clone)]
pub struct ServerOptions {
    pub on_payload: Option<PayloadHook>,
}

/// Running server; shuts down when dropped or via [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(thread) = self.accept_thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop_and_join();
        }
    }
}

/// Bind and start serving transfers. Each connection is handled on its own
/// thread, so concurrent clients do not serialize against each other.
pub fn serve(bind: &str) -> std::io::Result<ServerHandle> {
    serve_with_options(bind, ServerOptions::default())
}

pub fn serve_with_options(bind: &str, options: ServerOptions) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let accept_thread = std::thread::spawn(move || {
        for incoming in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            match incoming {
                Ok(stream) => {
                    let opts = options.clone();
                    std::thread::spawn(move || handle_connection(stream, &opts));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

fn handle_connection(stream: TcpStream, options: &ServerOptions) {
    stream.set_read_timeout(Some(IO_TIMEOUT)).ok();
    stream.set_write_timeout(Some(IO_TIMEOUT)).ok();
    if let Err(e) = serve_one_request(&stream, options) {
        log::debug!("connection ended: {e}");
    }
}

fn serve_one_request(stream: &TcpStream, options: &ServerOptions) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let _path = parts.next().unwrap_or("");
    let version = parts.next().unwrap_or("");
    if method != "POST" || !version.starts_with("HTTP/1.") {
        return respond_error(stream, 400, "expected HTTP/1.x POST");
    }
    let headers = read_headers(&mut reader)?;
    let length = match headers.get("content-length").and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n <= MAX_BODY_BYTES => n,
        Some(_) => return respond_error(stream, 413, "body too large"),
        None => return respond_error(stream, 400, "missing or invalid Content-Length"),
    };
    let wire_codec = headers
        .get(&HEADER_CODEC.to_ascii_lowercase())
        .cloned()
        .unwrap_or_else(|| "identity".to_string());
    let item_id = headers
        .get(&HEADER_ITEM.to_ascii_lowercase())
        .cloned()
        .unwrap_or_default();
    let label = headers
        .get(&HEADER_LABEL.to_ascii_lowercase())
        .cloned()
        .unwrap_or_default();

    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;

    let Some(codec) = codec_by_id(&wire_codec) else {
        return respond_error(stream, 400, &format!("unknown codec `{wire_codec}`"));
    };

    let (payload, decompression_time) = if wire_codec == "identity" {
        (body.clone(), 0.0)
    } else {
        let t = Instant::now();
        match codec.decompress(&body) {
            Ok(payload) => (payload, t.elapsed().as_secs_f64()),
            Err(e) => {
                return respond_error(stream, 422, &format!("decompression failed: {e}"));
            }
        }
    };

    let ack = Ack {
        received_bytes: body.len() as u64,
        decompressed_bytes: payload.len() as u64,
        decompression_time,
    };
    // Hook before the ack: once the client sees 200 the payload has been
    // fully handed over, so callers may assert on hook side effects.
    if let Some(hook) = &options.on_payload {
        hook(&ReceivedItem {
            item_id,
            label,
            wire_codec,
            wire_bytes: body.len() as u64,
            payload,
        });
    }
    respond_json(stream, 200, "OK", &serde_json::to_string(&ack).expect("ack serializes"))?;
    Ok(())
}

fn respond_error(stream: &TcpStream, status: u16, message: &str) -> std::io::Result<()> {
    let body = serde_json::json!({ "error": message }).to_string();
    let reason = match status {
        400 => "Bad Request",
        413 => "Payload Too Large",
        422 => "Unprocessable Entity",
        _ => "Error",
    };
    respond_json(stream, status, reason, &body)
}

fn respond_json(
    stream: &TcpStream,
    status: u16,
    reason: &str,
    body: &str,
) -> std::io::Result<()> {
    let mut writer = stream;
    write!(
        writer,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    writer.flush()
}
