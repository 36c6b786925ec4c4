//! KV cache data model: per-layer K/V tensors, chunk identity, concatenation,
//! and the two deviation metrics used to drive selective recompute.
//!
//! Convention: K is stored without positional encoding in every cache, so a
//! chunk's tensors are position-free and deviations never confuse a rotation
//! with a real difference. V never carries positional encoding.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ForwardAttention;
use sha2::{Digest, Sha256};
use std::fmt;

/// Which computation produced a cache: full prefill, concatenated precomputed
/// chunks, or the selectively recomputed result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheRole {
    Full,
    Pre,
    New,
}

/// One layer's K and V tensors, tokens × hidden. K is position-free.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    pub k: Matrix,
    pub v: Matrix,
}

impl LayerKV {
    pub fn new(k: Matrix, v: Matrix) -> Result<Self> {
        if k.rows() != v.rows() || k.cols() != v.cols() {
            return Err(Error::shape(
                format!("K and V of equal shape ({}x{})", k.rows(), k.cols()),
                format!("V {}x{}", v.rows(), v.cols()),
            ));
        }
        Ok(LayerKV { k, v })
    }

    pub fn num_tokens(&self) -> usize {
        self.k.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.k.cols()
    }
}

#[derive(Debug, Clone)]
pub struct KVCache {
    pub role: CacheRole,
    pub layers: Vec<LayerKV>,
    pub global_positions: Vec<usize>,
    /// (start, end) token ranges, one per input chunk; they partition
    /// [0, num_tokens).
    pub chunk_boundaries: Vec<(usize, usize)>,
}

impl KVCache {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.num_tokens())
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.hidden_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let tokens = self.num_tokens();
        if self.layers.iter().any(|l| l.num_tokens() != tokens) {
            return Err(Error::shape(
                format!("{tokens} tokens on every layer"),
                "unequal layer token counts".to_string(),
            ));
        }
        if self.global_positions.len() != tokens {
            return Err(Error::shape(
                format!("{tokens} positions"),
                format!("{}", self.global_positions.len()),
            ));
        }
        if !self.global_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::domain(
                "global positions must be strictly increasing".to_string(),
            ));
        }
        let mut cursor = 0usize;
        for &(s, e) in &self.chunk_boundaries {
            if s != cursor || e < s {
                return Err(Error::domain(format!(
                    "chunk boundaries must partition [0, {tokens}); got ({s}, {e}) at {cursor}"
                )));
            }
            cursor = e;
        }
        if cursor != tokens {
            return Err(Error::domain(format!(
                "chunk boundaries cover [0, {cursor}) but cache has {tokens} tokens"
            )));
        }
        Ok(())
    }
}

/// 256-bit chunk identity: digest(model digest ‖ little-endian token ids).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkHash(pub [u8; 32]);

impl ChunkHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s)
            .map_err(|e| Error::domain(format!("invalid chunk hash {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::domain(format!("chunk hash must be 32 bytes: {s:?}")))?;
        Ok(ChunkHash(arr))
    }
}

impl fmt::Display for ChunkHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn chunk_hash(model_digest: &[u8; 32], token_ids: &[u32]) -> ChunkHash {
    let mut hasher = Sha256::new();
    hasher.update(model_digest);
    for &id in token_ids {
        hasher.update(id.to_le_bytes());
    }
    ChunkHash(hasher.finalize().into())
}

/// Precomputed KV of one text chunk, standalone at positions [0, len).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkKV {
    pub chunk_hash: ChunkHash,
    pub token_ids: Vec<u32>,
    pub precompute_length: usize,
    pub layers: Vec<LayerKV>,
}

impl ChunkKV {
    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.hidden_dim())
    }

    /// Recompute the identity digest and compare with the stored one.
    pub fn verify_hash(&self, model_digest: &[u8; 32]) -> bool {
        chunk_hash(model_digest, &self.token_ids) == self.chunk_hash
    }
}

/// Which vectors the per-token deviation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeviationMode {
    /// L2 over the concatenated (K, V) difference of a token.
    #[default]
    KvConcat,
    /// L2 over the K difference only.
    KOnly,
}

/// Per-token deviation of a candidate layer against an oracle layer, both in
/// the position-free K convention.
pub fn kv_deviation(candidate: &LayerKV, oracle: &LayerKV, mode: DeviationMode) -> Result<Vec<f64>> {
    if candidate.k.rows() != oracle.k.rows() || candidate.k.cols() != oracle.k.cols() {
        return Err(Error::shape(
            format!("{}x{}", oracle.k.rows(), oracle.k.cols()),
            format!("{}x{}", candidate.k.rows(), candidate.k.cols()),
        ));
    }
    let mut out = Vec::with_capacity(candidate.num_tokens());
    for t in 0..candidate.num_tokens() {
        out.push(token_deviation(
            candidate.k.row(t),
            candidate.v.row(t),
            oracle.k.row(t),
            oracle.v.row(t),
            mode,
        ));
    }
    Ok(out)
}

pub(crate) fn token_deviation(
    ck: &[f32],
    cv: &[f32],
    ok: &[f32],
    ov: &[f32],
    mode: DeviationMode,
) -> f64 {
    let mut ss = 0.0f64;
    for (&a, &b) in ck.iter().zip(ok.iter()) {
        let d = a as f64 - b as f64;
        ss += d * d;
    }
    if mode == DeviationMode::KvConcat {
        for (&a, &b) in cv.iter().zip(ov.iter()) {
            let d = a as f64 - b as f64;
            ss += d * d;
        }
    }
    ss.sqrt()
}

/// L2 (Frobenius) norm of the difference between two forward attention
/// matrices of the same layer and shape.
pub fn attention_deviation(a: &ForwardAttention, oracle: &ForwardAttention) -> Result<f64> {
    if a.layer != oracle.layer {
        return Err(Error::domain(format!(
            "attention deviation across layers {} vs {}",
            a.layer, oracle.layer
        )));
    }
    if a.rows.rows() != oracle.rows.rows() || a.rows.cols() != oracle.rows.cols() {
        return Err(Error::shape(
            format!("{}x{}", oracle.rows.rows(), oracle.rows.cols()),
            format!("{}x{}", a.rows.rows(), a.rows.cols()),
        ));
    }
    let mut ss = 0.0f64;
    for (&x, &y) in a.rows.data().iter().zip(oracle.rows.data().iter()) {
        let d = x as f64 - y as f64;
        ss += d * d;
    }
    Ok(ss.sqrt())
}

/// Deviation summary for one layer.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DeviationReport {
    pub layer: usize,
    pub per_token_kv_dev: Vec<f64>,
    pub attn_dev: f64,
}

/// Concatenate precomputed chunk caches into one cache with role `Pre`.
/// Positions are assigned contiguously from `start_position`; K stays
/// position-free.
pub fn concat_chunks(chunks: &[ChunkKV], start_position: usize) -> Result<KVCache> {
    if chunks.is_empty() {
        return Err(Error::domain("cannot concatenate zero chunks".to_string()));
    }
    let num_layers = chunks[0].num_layers();
    let hidden = chunks[0].hidden_dim();
    for c in chunks {
        if c.num_layers() != num_layers {
            return Err(Error::shape(
                format!("{num_layers} layers"),
                format!("chunk {} has {}", c.chunk_hash, c.num_layers()),
            ));
        }
        if c.hidden_dim() != hidden {
            return Err(Error::shape(
                format!("hidden dim {hidden}"),
                format!("chunk {} has {}", c.chunk_hash, c.hidden_dim()),
            ));
        }
    }
    let total: usize = chunks.iter().map(|c| c.num_tokens()).sum();
    let mut layers = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let mut k = Matrix::zeros(total, hidden);
        let mut v = Matrix::zeros(total, hidden);
        let mut row = 0usize;
        for c in chunks {
            for t in 0..c.num_tokens() {
                k.set_row(row, c.layers[layer].k.row(t));
                v.set_row(row, c.layers[layer].v.row(t));
                row += 1;
            }
        }
        layers.push(LayerKV { k, v });
    }
    let mut boundaries = Vec::with_capacity(chunks.len());
    let mut cursor = 0usize;
    for c in chunks {
        boundaries.push((cursor, cursor + c.num_tokens()));
        cursor += c.num_tokens();
    }
    let cache = KVCache {
        role: CacheRole::Pre,
        layers,
        global_positions: (start_position..start_position + total).collect(),
        chunk_boundaries: boundaries,
    };
    cache.validate()?;
    Ok(cache)
}
