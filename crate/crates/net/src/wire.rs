//! JSON bodies exchanged between the client and the workers.
//!
//! Vectors travel as base64 of little-endian f32 and ids as decimal
//! strings. Every response is wrapped in an [`Envelope`].

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sieve_core::index::SearchConfig;
use sieve_core::Metric;

use crate::error::{NetError, Result};

pub fn encode_vector(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_vector(s: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD.decode(s).map_err(|e| NetError::BadRequest(format!("vector is not base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(NetError::BadRequest(format!("vector has {} bytes, not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn encode_bytes(b: &[u8]) -> String {
    STANDARD.encode(b)
}

pub fn decode_bytes(s: &str) -> Result<Vec<u8>> {
    STANDARD.decode(s).map_err(|e| NetError::BadRequest(format!("not base64: {e}")))
}

pub fn parse_id(s: &str) -> Result<u64> {
    s.parse().map_err(|_| NetError::BadRequest(format!("id {s:?} is not a decimal u64")))
}

pub fn parse_ids(ids: &[String]) -> Result<Vec<u64>> {
    ids.iter().map(|s| parse_id(s)).collect()
}

pub fn id_strings(ids: &[u64]) -> Vec<String> {
    ids.iter().map(u64::to_string).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub msg: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl<T> Envelope<T> {
    pub fn ok(payload: T) -> Self {
        Self { status: "ok".into(), payload: Some(payload), error: None }
    }

    pub fn err(e: &NetError) -> Self {
        Self {
            status: "error".into(),
            payload: None,
            error: Some(ErrorBody { code: e.code().to_string(), msg: e.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterRequest {
    pub vector: String,
    pub config: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub score: f32,
    /// Partition holding the id on the answering replica.
    pub pid: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterResponse {
    pub candidates: Vec<Candidate>,
    pub partitions_scanned: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRequest {
    pub vector: String,
    pub ids: Vec<String>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineResponse {
    pub results: Vec<Scored>,
    /// Requested ids this shard does not hold.
    pub missing: Vec<String>,
}

/// Either encode a vector (`apply = false`), append an already encoded
/// entry (`pid` and `code` with `apply = true`), or both at once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertIndexRequest {
    pub id: String,
    #[serde(default)]
    pub vector: Option<String>,
    #[serde(default)]
    pub pid: Option<u32>,
    /// Packed code bytes, base64.
    #[serde(default)]
    pub code: Option<String>,
    pub apply: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertIndexResponse {
    pub pid: u32,
    pub code: String,
    pub applied: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertFullRequest {
    pub id: String,
    pub vector: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertFullResponse {
    /// Vectors on the shard after the insert.
    pub vectors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeleteRequest {
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeleteResponse {
    /// Ids that were live on this worker and are now deleted.
    pub deleted: usize,
}

/// Install search parameters given inline (base64 of the binary
/// parameter file) or as a path readable by the worker.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InstallRequest {
    #[serde(default)]
    pub params: Option<String>,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstallResponse {
    pub installed: bool,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRequest {
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointResponse {
    pub vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub ready: bool,
    pub dim: usize,
    pub metric: Option<Metric>,
    pub n_partitions: usize,
    /// Live (not deleted) ids.
    pub vectors: usize,
    pub partition_lens: Vec<usize>,
    pub params_digest: String,
    pub batches: u64,
    pub largest_batch: usize,
    /// Sorted tombstoned ids; only with `?detail=1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tombstones: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub dim: usize,
    pub metric: Metric,
    pub vectors: usize,
    pub deleted: usize,
}
